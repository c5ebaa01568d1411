import numpy as np
import pytest
from scipy import stats

from vevar.model import (
    CoefficientIndex,
    ConfigError,
    DataError,
    LaggedDesign,
    ModelConfig,
    SubjectDataset,
    build_lagged_design,
    flat_index,
    group_function_eval,
    subject_loglik,
    unflatten,
    validate_subjects,
)


class TestFlatIndex:
    def test_worked_example(self):
        # source=3, lag=2, target=2 with R=3, L=2 lands at position 12
        idx = CoefficientIndex(source=3, lag=2, target=2)
        assert flat_index(idx, R=3, L=2) == 12

    def test_first_and_last(self):
        assert flat_index(CoefficientIndex(1, 1, 1), R=4, L=3) == 1
        assert flat_index(CoefficientIndex(4, 3, 4), R=4, L=3) == 4 * 3 * 4

    def test_round_trip_bijection(self):
        R, L = 4, 2
        seen = set()
        for j in range(1, R * L * R + 1):
            idx = unflatten(j, R, L)
            assert flat_index(idx, R, L) == j
            seen.add((idx.source, idx.lag, idx.target))
        assert len(seen) == R * L * R

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            flat_index(CoefficientIndex(0, 1, 1), R=2, L=1)
        with pytest.raises(IndexError):
            flat_index(CoefficientIndex(1, 2, 1), R=2, L=1)
        with pytest.raises(IndexError):
            unflatten(0, R=2, L=1)
        with pytest.raises(IndexError):
            unflatten(9, R=2, L=1)

    def test_flat_vector_matches_matrix_layout(self):
        # beta_s[j-1] must be B[(lag-1)*R + source - 1, target - 1]
        R, L = 3, 2
        rng = np.random.default_rng(0)
        B = rng.normal(size=(R * L, R))
        beta_s = B.T.ravel()
        for j in range(1, R * L * R + 1):
            idx = unflatten(j, R, L)
            row = (idx.lag - 1) * R + idx.source - 1
            assert beta_s[j - 1] == B[row, idx.target - 1]


class TestLaggedDesign:
    def test_scalar_series(self):
        # R=1, L=1, series (1,2,3): rows pair each value with its successor
        design = build_lagged_design(np.array([[1.0], [2.0], [3.0]]), L=1)
        np.testing.assert_array_equal(design.U, [[1.0], [2.0]])
        np.testing.assert_array_equal(design.X, [[2.0], [3.0]])

    def test_two_nodes_two_lags(self):
        series = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0]])
        design = build_lagged_design(series, L=2)
        # u_t = [x_{t-1}, x_{t-2}]
        np.testing.assert_array_equal(design.U, [[3.0, 4.0, 1.0, 2.0],
                                                 [5.0, 6.0, 3.0, 4.0]])
        np.testing.assert_array_equal(design.X, [[5.0, 6.0], [7.0, 8.0]])

    def test_minimum_length_boundary(self):
        L = 3
        series = np.arange(2 * (L + 2), dtype=float).reshape(L + 2, 2)
        design = build_lagged_design(series, L=L)
        assert design.U.shape == (2, 2 * L)
        assert design.X.shape == (2, 2)

    def test_too_short_raises(self):
        series = np.ones((3, 2))
        with pytest.raises(DataError):
            build_lagged_design(series, L=2)

    def test_non_finite_raises(self):
        series = np.ones((5, 2))
        series[2, 0] = np.nan
        with pytest.raises(DataError):
            build_lagged_design(series, L=1)

    def test_accepts_subject(self):
        sub = SubjectDataset(1, np.ones((6, 2)), np.zeros(3), group=1)
        design = build_lagged_design(sub, L=1)
        assert design.U.shape == (5, 2)


class TestSubjectLoglik:
    def test_zero_residual_unit_noise(self):
        # perfect fit with xi = 1 leaves only the normalizing constant
        U = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        B = np.array([[0.5, -0.2], [0.3, 0.7]])
        X = U @ B
        design = LaggedDesign(U=U, X=X)
        beta_s = B.T.ravel()
        ll = subject_loglik(design, beta_s, np.ones(2))
        assert ll == pytest.approx(-0.5 * 3 * 2 * np.log(2 * np.pi))

    def test_single_observation_constant(self):
        design = LaggedDesign(U=np.array([[2.0]]), X=np.array([[6.0]]))
        ll = subject_loglik(design, np.array([3.0]), np.array([1.0]))
        assert ll == pytest.approx(-0.5 * np.log(2 * np.pi))

    def test_matches_per_element_gaussian(self):
        rng = np.random.default_rng(42)
        R, L, T = 3, 2, 11
        series = rng.normal(size=(T, R))
        design = build_lagged_design(series, L=L)
        beta_s = rng.normal(size=R * L * R)
        xi = rng.uniform(0.5, 2.0, size=R)
        B = beta_s.reshape(R, R * L).T
        mean = design.U @ B
        expected = sum(
            stats.norm.logpdf(design.X[t, r], mean[t, r], np.sqrt(xi[r]))
            for t in range(T - L) for r in range(R)
        )
        assert subject_loglik(design, beta_s, xi) == pytest.approx(expected)

    def test_rejects_bad_shapes(self):
        design = LaggedDesign(U=np.ones((2, 2)), X=np.ones((2, 2)))
        with pytest.raises(DataError):
            subject_loglik(design, np.ones(3), np.ones(2))
        with pytest.raises(DataError):
            subject_loglik(design, np.ones(4), np.ones(3))
        with pytest.raises(DataError):
            subject_loglik(design, np.ones(4), np.array([1.0, -1.0]))


class TestGroupFunctionEval:
    def test_linear_combination(self):
        phis = [np.sin, np.cos, lambda v: v ** 2]
        m = np.array([0.3, -0.5, 1.2])
        w = np.array([1.0, 2.0, -1.0])
        val = group_function_eval(0.25, w, phis, m)
        assert val == pytest.approx(0.25 + np.sin(0.3) + 2 * np.cos(-0.5) - 1.44)

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            group_function_eval(0.0, np.ones(2), [np.sin], np.ones(2))


class TestConfigValidation:
    def test_defaults_are_valid(self):
        cfg = ModelConfig(R=5, P=3)
        assert cfg.pi_delta == 0.1 and cfg.pi_phi == 0.1
        assert cfg.kernel_lengthscale == 0.5 and cfg.kernel_variance == 1.0
        assert cfg.n_coefficients == 25

    def test_rejects_bad_values(self):
        with pytest.raises(ConfigError):
            ModelConfig(R=0)
        with pytest.raises(ConfigError):
            ModelConfig(R=2, pi_delta=0.0)
        with pytest.raises(ConfigError):
            ModelConfig(R=2, pi_phi=1.0)
        with pytest.raises(ConfigError):
            ModelConfig(R=2, sigma2_w=-1.0)
        with pytest.raises(ConfigError):
            ModelConfig(R=2, a_xi=0.0)

    def test_validate_subjects(self):
        cfg = ModelConfig(R=2, L=1, G=2, P=1)
        good = [
            SubjectDataset(1, np.zeros((5, 2)), [0.1], group=1),
            SubjectDataset(2, np.zeros((5, 2)), [0.2], group=2),
        ]
        validate_subjects(good, cfg)
        with pytest.raises(DataError):
            validate_subjects([], cfg)
        with pytest.raises(DataError):
            validate_subjects([good[0]], cfg)  # group 2 empty
        with pytest.raises(DataError):
            validate_subjects([good[0], SubjectDataset(3, np.zeros((5, 3)), [0.0], group=2)], cfg)
        with pytest.raises(DataError):
            validate_subjects([good[0], SubjectDataset(3, np.zeros((2, 2)), [0.0], group=2)], cfg)
