"""Squared-exponential kernel and numerically guarded Gram matrix utilities.

The covariate effect curves carry a GP prior evaluated on the finite grid of
observed covariate values, so everything here works with explicit Gram
matrices and their eigendecompositions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ConfigError, NumericalError

# relative jitter added to Gram diagonals before factorization
JITTER_SCALE = 1e-6


@dataclass(frozen=True)
class KernelParams:
    lengthscale: float = 0.5
    variance: float = 1.0

    def __post_init__(self):
        if not self.lengthscale > 0:
            raise ConfigError(f"kernel lengthscale must be positive, got {self.lengthscale}")
        if not self.variance > 0:
            raise ConfigError(f"kernel variance must be positive, got {self.variance}")


@dataclass
class GramMatrix:
    """Eigendecomposition K = Q diag(eigvals) Q^T of a jittered kernel Gram matrix."""

    K: np.ndarray
    eigvals: np.ndarray
    eigvecs: np.ndarray

    @property
    def n(self) -> int:
        return self.K.shape[0]

    def solve(self, b: np.ndarray) -> np.ndarray:
        """K^{-1} b via the eigendecomposition."""
        proj = self.eigvecs.T @ b
        return self.eigvecs @ (proj / self.eigvals.reshape(-1, *([1] * (proj.ndim - 1))))

    def log_det(self) -> float:
        return float(np.sum(np.log(self.eigvals)))


def se_kernel(x1: np.ndarray, x2: np.ndarray, params: KernelParams) -> np.ndarray:
    """Squared-exponential cross-kernel variance * exp(-(x1-x2)^2 / (2 l^2))."""
    x1 = np.asarray(x1, dtype=float).ravel()
    x2 = np.asarray(x2, dtype=float).ravel()
    sq = (x1[:, None] - x2[None, :]) ** 2
    return params.variance * np.exp(-sq / (2.0 * params.lengthscale ** 2))


def gram(x: np.ndarray, params: KernelParams) -> GramMatrix:
    """Jittered Gram matrix of the SE kernel on grid x, with its eigendecomposition.

    A diagonal jitter of JITTER_SCALE * variance keeps the matrix positive
    definite when grid points coincide or the lengthscale is large.
    """
    x = np.asarray(x, dtype=float).ravel()
    if x.size == 0:
        raise ConfigError("kernel grid must be non-empty")
    if not np.all(np.isfinite(x)):
        raise NumericalError("kernel grid contains non-finite values")
    K = se_kernel(x, x, params)
    K[np.diag_indices_from(K)] += JITTER_SCALE * params.variance
    eigvals, eigvecs = np.linalg.eigh(K)
    if eigvals[0] <= 0:
        raise NumericalError("kernel Gram matrix is not positive definite after jitter")
    return GramMatrix(K=K, eigvals=eigvals, eigvecs=eigvecs)
