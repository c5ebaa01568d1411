import numpy as np
import pytest

from vevar.model import ConfigError
from vevar.simulate import (
    BandFunction,
    SimConfig,
    build_group_functions,
    generate_series,
    is_stationary,
    sample_covariates,
    sample_subject_coefs,
    simulate_study,
)


def small_config(**kw):
    base = dict(R=10, L=1, T=200, group_sizes=(30, 60), P=6, seed=0)
    base.update(kw)
    return SimConfig(**base)


class TestSampleCovariates:
    def test_column_ranges_and_means(self):
        m = sample_covariates(1000, seed=1, P=6)
        assert m.shape == (1000, 6)
        assert np.all(np.abs(m[:, :5]) < 1.0)
        assert np.all(np.abs(m[:, :5].mean(axis=0)) < 0.1)
        assert set(np.unique(m[:, 5])) <= {0.0, 1.0}

    def test_reproducible(self):
        np.testing.assert_array_equal(sample_covariates(20, seed=7), sample_covariates(20, seed=7))


class TestBandFunctions:
    def test_constant_band(self):
        fn = BandFunction(band=0, kind="constant", covariates=(), sign=1.0)
        m = np.array([[0.3, -0.8, 1.0]])
        assert fn.evaluate(m)[0] == pytest.approx(0.15)
        flipped = BandFunction(band=0, kind="constant", covariates=(), sign=-1.0)
        assert flipped.evaluate(m)[0] == pytest.approx(-0.15)

    def test_linear_band(self):
        fn = BandFunction(band=1, kind="linear", covariates=(2,), sign=1.0)
        assert fn.evaluate(np.array([[0.0, 0.4, 0.0]]))[0] == pytest.approx(0.1)

    def test_quadratic_affine_rescale(self):
        # raw m^2 has range [0,1]; the affine map onto [-0.2, 0.2] is 0.4 m^2 - 0.2
        fn = BandFunction(band=3, kind="quadratic", covariates=(1,), sign=1.0)
        grid = np.linspace(-1, 1, 401).reshape(-1, 1)
        vals = fn.evaluate(grid)
        np.testing.assert_allclose(vals, 0.4 * grid[:, 0] ** 2 - 0.2)
        assert vals.min() == pytest.approx(-0.2)
        assert vals.max() == pytest.approx(0.2)

    def test_rescale_windows(self):
        grid = np.linspace(-1, 1, 1001).reshape(-1, 1)
        for band, kind, window in [(2, "power_040", (-0.2, 0.2)),
                                   (3, "quadratic", (-0.2, 0.2)),
                                   (4, "sine", (-0.2, 0.2)),
                                   (7, "power_070", (-0.15, 0.35))]:
            fn = BandFunction(band=band, kind=kind, covariates=(1,), sign=1.0)
            vals = fn.evaluate(grid)
            assert vals.min() >= window[0] - 1e-12
            assert vals.max() <= window[1] + 1e-12
            # the affine map attains both ends of the window
            assert vals.min() == pytest.approx(window[0], abs=1e-6)
            assert vals.max() == pytest.approx(window[1], abs=1e-6)

    def test_difference_band(self):
        fn = BandFunction(band=6, kind="difference", covariates=(1, 3), sign=1.0)
        assert fn.evaluate(np.array([[0.5, 9.9, -0.5]]))[0] == pytest.approx(0.3)


class TestBuildGroupFunctions:
    def test_band_structure_and_choices(self):
        sim = small_config()
        truth = build_group_functions(sim, seed=3)
        J = sim.n_coefficients
        assert len(truth.functions) == J
        for j0, fn in enumerate(truth.functions):
            band = truth.bands[j0]
            if band > 7:
                assert fn is None
                continue
            assert fn.band == band
            assert fn.sign in (-1.0, 1.0)
            if band == 0:
                assert fn.covariates == ()
            elif band == 5:
                assert fn.covariates == (6,)
            elif band == 6:
                assert len(set(fn.covariates)) == 2
                assert all(1 <= p <= 5 for p in fn.covariates)
            else:
                assert len(fn.covariates) == 1 and 1 <= fn.covariates[0] <= 5

    def test_effect_truth_matches_function_covariates(self):
        sim = small_config()
        truth = build_group_functions(sim, seed=5)
        for g0 in range(sim.G):
            for j0, fn in enumerate(truth.functions):
                expected = set()
                if fn is not None and not truth.dropped[g0, j0]:
                    expected = set(fn.covariates)
                got = {p + 1 for p in np.where(truth.true_covariate_effects[g0, j0])[0]}
                assert got == expected

    def test_edges_are_undropped_in_band(self):
        sim = small_config()
        truth = build_group_functions(sim, seed=8)
        in_band = truth.bands <= 7
        np.testing.assert_array_equal(truth.true_edges, in_band[None, :] & ~truth.dropped)

    def test_full_dropout_kills_all_edges(self):
        truth = build_group_functions(small_config(dropout_prob=1.0), seed=2)
        assert not truth.true_edges.any()
        assert not truth.true_covariate_effects.any()

    def test_groups_share_bank(self):
        sim = small_config()
        truth = build_group_functions(sim, seed=11)
        m = sample_covariates(5, seed=0)
        both = np.where(truth.true_edges[0] & truth.true_edges[1])[0]
        assert both.size > 0
        for j0 in both[:10]:
            np.testing.assert_array_equal(truth.group_function_values(1, j0 + 1, m),
                                          truth.group_function_values(2, j0 + 1, m))


class TestSubjectCoefs:
    def test_out_of_band_exactly_zero(self):
        sim = small_config()
        truth = build_group_functions(sim, seed=1)
        m = sample_covariates(sim.n_subjects, seed=2, P=sim.P)
        coefs = sample_subject_coefs(truth, m, sim, seed=3)
        out = truth.bands > 7
        assert out.any()
        assert np.all(coefs[:, out] == 0.0)

    def test_variance_moment(self):
        sim = SimConfig(R=1, L=1, T=10, group_sizes=(10000,), P=3, seed=0)
        truth = build_group_functions(sim, seed=4)
        m = sample_covariates(sim.n_subjects, seed=5, P=3)
        coefs = sample_subject_coefs(truth, m, sim, seed=6)
        # R=1 has the single band-0 entry: constant mean, variance 0.08
        var = coefs[:, 0].var()
        assert abs(var - 0.08) < 0.15 * 0.08

    def test_dropped_entries_center_at_zero(self):
        sim = SimConfig(R=1, L=1, T=10, group_sizes=(10000,), P=3, dropout_prob=1.0, seed=0)
        truth = build_group_functions(sim, seed=4)
        m = sample_covariates(sim.n_subjects, seed=5, P=3)
        coefs = sample_subject_coefs(truth, m, sim, seed=6)
        assert abs(coefs[:, 0].mean()) < 0.01
        assert abs(coefs[:, 0].var() - 0.08) < 0.15 * 0.08


class TestStationarity:
    def test_zero_matrix(self):
        assert is_stationary(np.zeros((6, 3)), L=2)

    def test_scalar_explosive(self):
        assert not is_stationary(np.array([[1.1]]), L=1)
        assert is_stationary(np.array([[0.9]]), L=1)

    def test_eigenvalue_oracle(self):
        A = np.array([[0.9, 0.0], [0.3, -0.5]])  # eigenvalues 0.9 and -0.5
        assert is_stationary(A.T, L=1)
        A2 = np.array([[1.05, 0.0], [0.3, -0.5]])
        assert not is_stationary(A2.T, L=1)

    def test_two_lag_companion(self):
        # x_t = 0.5 x_{t-1} + 0.6 x_{t-2} has a root beyond 1
        B = np.array([[0.5], [0.6]])
        assert not is_stationary(B, L=2)
        assert is_stationary(np.array([[0.5], [0.3]]), L=2)


class TestGenerateSeries:
    def test_noise_moment_with_zero_coefficients(self):
        sim = SimConfig(R=2, L=1, T=10000, group_sizes=(1,), P=3, seed=0)
        x = generate_series(np.zeros((2, 2)), sim, seed=9)
        var = x[1:].var(axis=0)
        assert np.all(np.abs(var - 0.5) < 0.05)

    def test_deterministic_recursion_one_lag(self):
        sim = SimConfig(R=2, L=1, T=4, group_sizes=(1,), P=3, noise_var=0.0, seed=0)
        B = np.array([[0.5, 0.1], [0.0, -0.4]])
        x = generate_series(B, sim, seed=0, init=np.array([[1.0, 2.0]]))
        np.testing.assert_allclose(x[1], np.array([1.0, 2.0]) @ B)
        np.testing.assert_allclose(x[2], x[1] @ B)
        np.testing.assert_allclose(x[3], x[2] @ B)

    def test_deterministic_recursion_two_lags(self):
        sim = SimConfig(R=1, L=2, T=5, group_sizes=(1,), P=3, noise_var=0.0, seed=0)
        B = np.array([[0.5], [0.25]])  # x_t = 0.5 x_{t-1} + 0.25 x_{t-2}
        x = generate_series(B, sim, seed=0, init=np.array([[1.0], [2.0]]))
        assert x[2, 0] == pytest.approx(0.5 * 2.0 + 0.25 * 1.0)
        assert x[3, 0] == pytest.approx(0.5 * x[2, 0] + 0.25 * 2.0)

    def test_reproducible(self):
        sim = SimConfig(R=3, L=1, T=50, group_sizes=(1,), P=3, seed=0)
        B = 0.1 * np.eye(3)
        np.testing.assert_array_equal(generate_series(B, sim, seed=4),
                                      generate_series(B, sim, seed=4))


class TestSimulateStudy:
    def test_end_to_end_defaults(self):
        sim = small_config(seed=12)
        subjects, truth = simulate_study(sim)
        assert len(subjects) == 90
        assert sum(1 for s in subjects if s.group == 1) == 30
        assert sum(1 for s in subjects if s.group == 2) == 60
        assert truth.subject_coefs.shape == (90, sim.n_coefficients)
        out_of_band = truth.bands > 7
        for s, sub in enumerate(subjects):
            assert sub.series.shape == (200, 10)
            flat = truth.subject_coefs[s]
            assert np.all(flat[out_of_band] == 0.0)
            B_s = flat.reshape(sim.R, sim.R * sim.L).T
            assert is_stationary(B_s, sim.L)
        np.testing.assert_array_equal(truth.covariates[0], subjects[0].covariates)

    def test_reproducible_study(self):
        a_subj, a_truth = simulate_study(small_config(seed=5))
        b_subj, b_truth = simulate_study(small_config(seed=5))
        np.testing.assert_array_equal(a_subj[3].series, b_subj[3].series)
        np.testing.assert_array_equal(a_truth.subject_coefs, b_truth.subject_coefs)
        np.testing.assert_array_equal(a_truth.true_edges, b_truth.true_edges)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            SimConfig(R=0)
        with pytest.raises(ConfigError):
            SimConfig(T=2, L=1)
        with pytest.raises(ConfigError):
            SimConfig(dropout_prob=1.5)
        with pytest.raises(ConfigError):
            SimConfig(P=2)
