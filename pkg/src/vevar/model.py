"""Core model structures: subject data, coefficient indexing, lagged designs,
and the Gaussian VAR likelihood with diagonal noise covariance.

Coefficients are indexed by (source, lag, target), all 1-based.  The flat
index is ``j = (target-1)*R*L + (lag-1)*R + source``, matching a column-major
vectorization of the RL x R coefficient matrix whose rows follow the lag
concatenation ``u_t = [x_{t-1}, ..., x_{t-L}]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class VevarError(Exception):
    """Base class for errors raised by this package."""


class DataError(VevarError):
    """Invalid or inconsistent input data."""


class ConfigError(VevarError):
    """Invalid configuration."""


class NumericalError(VevarError):
    """Numerical breakdown during fitting (non-finite values, failed factorization)."""


@dataclass
class SubjectDataset:
    """One subject's observed time series plus covariates and group label.

    series is T x R (rows = time points, columns = nodes), covariates has
    length P, group is an integer in 1..G.
    """

    subject_id: int
    series: np.ndarray
    covariates: np.ndarray
    group: int

    def __post_init__(self):
        self.series = np.asarray(self.series, dtype=float)
        self.covariates = np.atleast_1d(np.asarray(self.covariates, dtype=float))
        if self.series.ndim != 2:
            raise DataError(f"subject {self.subject_id}: series must be 2-D, got shape {self.series.shape}")
        if not np.all(np.isfinite(self.series)):
            raise DataError(f"subject {self.subject_id}: series contains non-finite values")
        if not np.all(np.isfinite(self.covariates)):
            raise DataError(f"subject {self.subject_id}: covariates contain non-finite values")
        if self.group < 1:
            raise DataError(f"subject {self.subject_id}: group must be >= 1, got {self.group}")

    @property
    def n_timepoints(self) -> int:
        return self.series.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.series.shape[1]


@dataclass(frozen=True)
class CoefficientIndex:
    """Position of one VAR coefficient: influence of `source` at `lag` on `target`."""

    source: int
    lag: int
    target: int


@dataclass
class ModelConfig:
    """Fixed hyperparameters of the hierarchical model.

    pi_delta / pi_phi are the prior inclusion probabilities for group-level
    edges and per-edge covariate effects.  sigma2_w and sigma2_mu are the
    slab variances of the covariate weights and the baseline edge strength.
    (a0, b0) / (a1, b1) are inverse-gamma shape/rate pairs for the subject
    coefficient dispersion around absent and present edges, (a_xi, b_xi) the
    pair for the observation noise variances.  The kernel parameters control
    the squared-exponential prior on covariate effect curves.  With
    intercept_only=True, the covariate machinery is disabled and edges carry
    a constant group-level strength.
    """

    R: int
    L: int = 1
    G: int = 2
    P: int = 0
    pi_delta: float = 0.1
    pi_phi: float = 0.1
    sigma2_w: float = 1.0
    sigma2_mu: float = 1.0
    a0: float = 2.0
    b0: float = 1.0
    a1: float = 2.0
    b1: float = 1.0
    a_xi: float = 2.0
    b_xi: float = 1.0
    kernel_lengthscale: float = 0.5
    kernel_variance: float = 1.0
    intercept_only: bool = False

    def __post_init__(self):
        for name in ("R", "L", "G"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.P < 0:
            raise ConfigError("P must be nonnegative")
        for name in ("pi_delta", "pi_phi"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{name} must lie strictly between 0 and 1, got {v}")
        for name in ("sigma2_w", "sigma2_mu", "a0", "b0", "a1", "b1",
                     "a_xi", "b_xi", "kernel_lengthscale", "kernel_variance"):
            v = getattr(self, name)
            if not v > 0:
                raise ConfigError(f"{name} must be strictly positive, got {v}")

    @property
    def n_coefficients(self) -> int:
        return self.R * self.L * self.R


@dataclass
class LaggedDesign:
    """Regression form of one subject's series: X[t] = U[t] @ B + noise.

    U is (T-L) x RL with row t equal to [x_{t+L-1}, ..., x_t] concatenated,
    X is (T-L) x R with row t equal to x_{t+L} (1-based t).
    """

    U: np.ndarray
    X: np.ndarray


def flat_index(idx: CoefficientIndex, R: int, L: int) -> int:
    """Map a (source, lag, target) triple to its 1-based flat coefficient index."""
    if not 1 <= idx.source <= R:
        raise IndexError(f"source {idx.source} out of range 1..{R}")
    if not 1 <= idx.lag <= L:
        raise IndexError(f"lag {idx.lag} out of range 1..{L}")
    if not 1 <= idx.target <= R:
        raise IndexError(f"target {idx.target} out of range 1..{R}")
    return (idx.target - 1) * R * L + (idx.lag - 1) * R + idx.source


def unflatten(j: int, R: int, L: int) -> CoefficientIndex:
    """Inverse of flat_index: recover (source, lag, target) from a 1-based j."""
    n = R * L * R
    if not 1 <= j <= n:
        raise IndexError(f"flat index {j} out of range 1..{n}")
    j0 = j - 1
    target = j0 // (R * L)
    rem = j0 % (R * L)
    lag = rem // R
    source = rem % R
    return CoefficientIndex(source=source + 1, lag=lag + 1, target=target + 1)


def build_lagged_design(subject: SubjectDataset | np.ndarray, L: int) -> LaggedDesign:
    """Unroll a series into the lagged regression design (Eq. form X = U B + E).

    Requires at least L+2 time points so the design has at least two rows.
    """
    series = subject.series if isinstance(subject, SubjectDataset) else np.asarray(subject, dtype=float)
    if series.ndim != 2:
        raise DataError(f"series must be 2-D, got shape {series.shape}")
    if not np.all(np.isfinite(series)):
        raise DataError("series contains non-finite values")
    T = series.shape[0]
    if T < L + 2:
        raise DataError(f"series too short: need T >= L+2 = {L + 2}, got T = {T}")
    U = np.hstack([series[L - ell: T - ell] for ell in range(1, L + 1)])
    X = series[L:].copy()
    return LaggedDesign(U=U, X=X)


def subject_loglik(design: LaggedDesign, beta_s: np.ndarray, xi: np.ndarray) -> float:
    """Gaussian log-likelihood of one subject's responses given coefficients.

    beta_s is the flat (RL)R coefficient vector, xi the length-R vector of
    per-target noise variances.  The likelihood factors over target columns:
    column r of X is N(U @ B[:, r], xi_r * I).
    """
    U, X = design.U, design.X
    n, RL = U.shape
    R = X.shape[1]
    beta_s = np.asarray(beta_s, dtype=float).ravel()
    xi = np.asarray(xi, dtype=float).ravel()
    if beta_s.size != RL * R:
        raise DataError(f"beta_s has {beta_s.size} entries, expected {RL * R}")
    if xi.size != R:
        raise DataError(f"xi has {xi.size} entries, expected {R}")
    if np.any(xi <= 0):
        raise DataError("xi must be strictly positive")
    B = beta_s.reshape(R, RL).T  # column r = coefficients for target r
    resid = X - U @ B
    rss = np.sum(resid ** 2, axis=0)
    return float(-0.5 * n * R * np.log(2.0 * np.pi)
                 - 0.5 * n * np.sum(np.log(xi))
                 - 0.5 * np.sum(rss / xi))


def group_function_eval(mu_j: float, w_j: np.ndarray, phi_j, m: np.ndarray) -> float:
    """Evaluate a group-level edge strength mu_j + sum_p w_jp * phi_jp(m_p).

    phi_j is a sequence of P univariate callables.  Callers must treat the
    edge value as exactly zero when the edge's inclusion indicator is off.
    """
    w_j = np.asarray(w_j, dtype=float).ravel()
    m = np.asarray(m, dtype=float).ravel()
    if not (len(w_j) == len(phi_j) == len(m)):
        raise DataError(f"length mismatch: w has {len(w_j)}, phi has {len(phi_j)}, m has {len(m)}")
    return float(mu_j + sum(w * phi(mv) for w, phi, mv in zip(w_j, phi_j, m)))


def validate_subjects(data: list[SubjectDataset], config: ModelConfig) -> None:
    """Check a dataset against a model configuration; raises DataError on mismatch."""
    if not data:
        raise DataError("no subjects provided")
    counts = np.zeros(config.G, dtype=int)
    for sub in data:
        if sub.n_nodes != config.R:
            raise DataError(f"subject {sub.subject_id}: series has {sub.n_nodes} columns, expected R={config.R}")
        if sub.n_timepoints < config.L + 2:
            raise DataError(f"subject {sub.subject_id}: series too short (T={sub.n_timepoints}, need >= {config.L + 2})")
        if sub.covariates.size != config.P:
            raise DataError(f"subject {sub.subject_id}: {sub.covariates.size} covariates, expected P={config.P}")
        if not 1 <= sub.group <= config.G:
            raise DataError(f"subject {sub.subject_id}: group {sub.group} out of range 1..{config.G}")
        counts[sub.group - 1] += 1
    for g in range(config.G):
        if counts[g] == 0:
            raise DataError(f"group {g + 1} has no subjects")
