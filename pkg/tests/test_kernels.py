import numpy as np
import pytest

from vevar.kernels import JITTER_SCALE, GramMatrix, KernelParams, gram, se_kernel
from vevar.model import ConfigError, NumericalError


class TestSeKernel:
    def test_pointwise_values(self):
        params = KernelParams(lengthscale=0.5, variance=1.0)
        K = se_kernel(np.array([0.0, 1.0]), np.array([0.0, 1.0]), params)
        assert K[0, 0] == pytest.approx(1.0)
        assert K[0, 1] == pytest.approx(np.exp(-1.0 / (2 * 0.25)))
        assert K[0, 1] == K[1, 0]

    def test_variance_scales_amplitude(self):
        p1 = KernelParams(0.5, 1.0)
        p3 = KernelParams(0.5, 3.0)
        x = np.linspace(-1, 1, 7)
        np.testing.assert_allclose(se_kernel(x, x, p3), 3.0 * se_kernel(x, x, p1))

    def test_decays_with_distance(self):
        params = KernelParams(0.5, 1.0)
        vals = se_kernel(np.array([0.0]), np.array([0.0, 0.5, 1.0, 2.0]), params)[0]
        assert np.all(np.diff(vals) < 0)

    def test_invalid_params(self):
        with pytest.raises(ConfigError):
            KernelParams(lengthscale=0.0)
        with pytest.raises(ConfigError):
            KernelParams(variance=-1.0)


class TestGram:
    def test_matches_kernel_plus_jitter(self):
        params = KernelParams(0.5, 2.0)
        x = np.array([-1.0, 0.0, 0.3, 1.0])
        g = gram(x, params)
        expected = se_kernel(x, x, params) + JITTER_SCALE * 2.0 * np.eye(4)
        np.testing.assert_allclose(g.K, expected)

    def test_eigendecomposition_reconstructs(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(-1, 1, size=12)
        g = gram(x, KernelParams())
        recon = g.eigvecs @ np.diag(g.eigvals) @ g.eigvecs.T
        np.testing.assert_allclose(recon, g.K, atol=1e-10)
        assert np.all(g.eigvals > 0)

    def test_solve_and_logdet(self):
        rng = np.random.default_rng(7)
        x = rng.uniform(-1, 1, size=9)
        g = gram(x, KernelParams())
        b = rng.normal(size=9)
        np.testing.assert_allclose(g.solve(b), np.linalg.solve(g.K, b), atol=1e-8)
        assert g.log_det() == pytest.approx(np.linalg.slogdet(g.K)[1])

    def test_solve_matrix_rhs(self):
        x = np.linspace(-1, 1, 5)
        g = gram(x, KernelParams())
        B = np.arange(10.0).reshape(5, 2)
        np.testing.assert_allclose(g.solve(B), np.linalg.solve(g.K, B), atol=1e-8)

    def test_duplicate_points_survive(self):
        # coincident grid points are exactly what the jitter is for
        x = np.array([0.5, 0.5, 0.5, -0.2])
        g = gram(x, KernelParams())
        assert np.all(g.eigvals > 0)

    def test_non_finite_grid(self):
        with pytest.raises(NumericalError):
            gram(np.array([0.0, np.inf]), KernelParams())
        with pytest.raises(ConfigError):
            gram(np.array([]), KernelParams())
