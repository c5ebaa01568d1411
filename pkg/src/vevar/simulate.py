"""Synthetic study generator: banded covariate-driven VAR coefficients,
per-group edge dropout, stationarity-checked series.

Coefficient matrices B (RL x R) carry a band structure: the entry at
(row j, column j') gets a function of the covariates determined by the band
b = |j - j'|, with b > 7 exactly zero.  The function bank is drawn once and
shared by all groups; groups then differ through independent edge dropout.
Dispersion and noise parameters are variances, not standard deviations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ConfigError, DataError, NumericalError, SubjectDataset

MAX_BAND = 7
MAX_STATIONARITY_REJECTIONS = 1000

# raw analytic ranges over m in [-1, 1] and target windows for rescaled bands
_RESCALE = {
    2: ((0.0, 2.0 ** 0.40), (-0.2, 0.2)),
    3: ((0.0, 1.0), (-0.2, 0.2)),
    4: ((-0.2, 0.2), (-0.2, 0.2)),
    7: ((0.0, 2.0 ** 0.70), (-0.15, 0.35)),
}

_BAND_KIND = {
    0: "constant",
    1: "linear",
    2: "power_040",
    3: "quadratic",
    4: "sine",
    5: "binary",
    6: "difference",
    7: "power_070",
}


@dataclass
class SimConfig:
    """Study-level generation settings.  Defaults follow the reference design
    at desk scale (R=10 instead of 100)."""

    R: int = 10
    L: int = 1
    T: int = 200
    group_sizes: tuple = (30, 60)
    P: int = 6
    noise_var: float = 0.5
    init_var: float = 0.25
    #: dispersion of subject coefficients around the group function value;
    #: enters the sampler as the scale (standard deviation) of the Normal
    subject_coef_var: float = 0.08
    dropout_prob: float = 0.2
    sign_flip_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.group_sizes = tuple(int(n) for n in self.group_sizes)
        if self.R < 1 or self.L < 1:
            raise ConfigError("R and L must be positive")
        if self.T < self.L + 2:
            raise ConfigError(f"T must be at least L+2 = {self.L + 2}")
        if self.P < 3:
            raise ConfigError("need at least 3 covariates (two continuous choices plus one binary)")
        if not self.group_sizes or any(n < 1 for n in self.group_sizes):
            raise ConfigError("group_sizes must be positive")
        for name in ("noise_var", "init_var", "subject_coef_var"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        for name in ("dropout_prob", "sign_flip_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")

    @property
    def G(self) -> int:
        return len(self.group_sizes)

    @property
    def n_subjects(self) -> int:
        return sum(self.group_sizes)

    @property
    def n_coefficients(self) -> int:
        return self.R * self.L * self.R


@dataclass
class BandFunction:
    """One entry of the shared function bank: band id, which covariates it
    reads (1-based), sign flip, and the affine rescale window if any."""

    band: int
    kind: str
    covariates: tuple
    sign: float

    def evaluate(self, m: np.ndarray) -> np.ndarray:
        """Value of the (signed, rescaled) function at covariate rows m (n x P)."""
        m = np.atleast_2d(np.asarray(m, dtype=float))
        if self.kind == "constant":
            raw = np.full(m.shape[0], 0.15)
        elif self.kind == "linear":
            raw = 0.25 * m[:, self.covariates[0] - 1]
        elif self.kind == "power_040":
            raw = (1.0 + m[:, self.covariates[0] - 1]) ** 0.40
        elif self.kind == "quadratic":
            raw = m[:, self.covariates[0] - 1] ** 2
        elif self.kind == "sine":
            raw = 0.20 * np.sin(np.pi * m[:, self.covariates[0] - 1])
        elif self.kind == "binary":
            raw = 0.20 * m[:, self.covariates[0] - 1]
        elif self.kind == "difference":
            raw = 0.3 * m[:, self.covariates[0] - 1] - 0.3 * m[:, self.covariates[1] - 1]
        elif self.kind == "power_070":
            raw = (1.0 + m[:, self.covariates[0] - 1]) ** 0.70
        else:
            raise ConfigError(f"unknown band function kind {self.kind!r}")
        if self.band in _RESCALE:
            (lo, hi), (a, b) = _RESCALE[self.band]
            raw = a + (raw - lo) * (b - a) / (hi - lo)
        return self.sign * raw


@dataclass
class SimTruth:
    """Ground truth of one generated study, aligned with flat coefficient
    indices j = (target-1)*RL + row."""

    config: SimConfig
    functions: list
    bands: np.ndarray
    dropped: np.ndarray
    true_edges: np.ndarray
    true_covariate_effects: np.ndarray
    covariates: np.ndarray | None = None
    groups: np.ndarray | None = None
    subject_coefs: np.ndarray | None = None

    def group_function_values(self, g: int, j: int, m: np.ndarray) -> np.ndarray:
        """Group g's edge-strength function for flat coefficient j at rows of m.

        Exactly zero when the entry is out of band or dropped for this group.
        """
        m = np.atleast_2d(np.asarray(m, dtype=float))
        fn = self.functions[j - 1]
        if fn is None or self.dropped[g - 1, j - 1]:
            return np.zeros(m.shape[0])
        return fn.evaluate(m)

    def mean_matrix(self, g: int, m: np.ndarray) -> np.ndarray:
        """All J group-level strengths for group g at covariate rows m (n x J)."""
        m = np.atleast_2d(np.asarray(m, dtype=float))
        out = np.zeros((m.shape[0], len(self.functions)))
        for j0, fn in enumerate(self.functions):
            if fn is not None and not self.dropped[g - 1, j0]:
                out[:, j0] = fn.evaluate(m)
        return out


def _band_of_entries(R: int, L: int) -> np.ndarray:
    """Band |row - col| for each flat coefficient index (1-based rows/cols)."""
    J = R * L * R
    j0 = np.arange(J)
    col = j0 // (R * L) + 1      # target
    row = j0 % (R * L) + 1       # position in the lag-stacked regressor
    return np.abs(row - col)


def sample_covariates(n: int, seed, P: int = 6) -> np.ndarray:
    """n covariate rows: columns 1..P-1 uniform on (-1,1), column P Bernoulli(0.5)."""
    if n < 1:
        raise ConfigError("n must be at least 1")
    if P < 2:
        raise ConfigError("P must be at least 2")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    m = np.empty((n, P))
    m[:, : P - 1] = rng.uniform(-1.0, 1.0, size=(n, P - 1))
    m[:, P - 1] = rng.integers(0, 2, size=n).astype(float)
    return m


def build_group_functions(sim: SimConfig, seed) -> SimTruth:
    """Draw the shared function bank, then per-group dropout.

    Covariate choices are drawn independently for each in-band entry from the
    continuous covariates 1..P-1 (the difference band picks two distinct
    ones); the binary band always reads covariate P.  Sign flips apply after
    rescaling and are shared across groups.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    J = sim.n_coefficients
    bands = _band_of_entries(sim.R, sim.L)
    continuous = np.arange(1, sim.P)
    functions: list = [None] * J
    for j0 in range(J):
        b = int(bands[j0])
        if b > MAX_BAND:
            continue
        if b == 0:
            covs: tuple = ()
        elif b == 5:
            covs = (sim.P,)
        elif b == 6:
            pair = rng.choice(continuous, size=2, replace=False)
            covs = (int(pair[0]), int(pair[1]))
        else:
            covs = (int(rng.choice(continuous)),)
        sign = -1.0 if rng.random() < sim.sign_flip_prob else 1.0
        functions[j0] = BandFunction(band=b, kind=_BAND_KIND[b], covariates=covs, sign=sign)
    in_band = bands <= MAX_BAND
    dropped = (rng.random(size=(sim.G, J)) < sim.dropout_prob) & in_band[None, :]
    true_edges = in_band[None, :] & ~dropped
    effects = np.zeros((sim.G, J, sim.P), dtype=bool)
    for j0, fn in enumerate(functions):
        if fn is None:
            continue
        for g0 in range(sim.G):
            if not dropped[g0, j0]:
                for p in fn.covariates:
                    effects[g0, j0, p - 1] = True
    return SimTruth(config=sim, functions=functions, bands=bands, dropped=dropped,
                    true_edges=true_edges, true_covariate_effects=effects)


def _subject_groups(sim: SimConfig) -> np.ndarray:
    return np.repeat(np.arange(1, sim.G + 1), sim.group_sizes)


def sample_subject_coefs(truth: SimTruth, covariates: np.ndarray, sim: SimConfig, seed) -> np.ndarray:
    """Subject coefficient vectors: Normal around the group function value
    with scale subject_coef_var on in-band entries, exactly zero elsewhere.
    Dropped entries keep the noise but center at zero.  Subjects are laid
    out group-by-group per sim.group_sizes."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    covariates = np.asarray(covariates, dtype=float)
    if covariates.shape != (sim.n_subjects, sim.P):
        raise DataError(f"covariates must be {sim.n_subjects} x {sim.P}, got {covariates.shape}")
    groups = _subject_groups(sim)
    J = sim.n_coefficients
    in_band = truth.bands <= MAX_BAND
    coefs = np.zeros((sim.n_subjects, J))
    sd = sim.subject_coef_var
    for g in range(1, sim.G + 1):
        rows = np.where(groups == g)[0]
        means = truth.mean_matrix(g, covariates[rows])
        noise = rng.normal(size=(rows.size, J))
        coefs[rows] = np.where(in_band[None, :], means + sd * noise, 0.0)
    return coefs


def is_stationary(B_s: np.ndarray, L: int) -> bool:
    """Spectral radius of the VAR companion matrix built from B_s is < 1.

    B_s stacks the per-lag coefficient blocks row-wise (RL x R); the
    companion uses their transposes, which leaves the spectrum unchanged.
    """
    B_s = np.asarray(B_s, dtype=float)
    RL, R = B_s.shape
    if RL != R * L:
        raise DataError(f"B_s must be {R * L} x {R} for L={L}, got {B_s.shape}")
    comp = np.zeros((R * L, R * L))
    for ell in range(L):
        comp[:R, ell * R:(ell + 1) * R] = B_s[ell * R:(ell + 1) * R, :].T
    if L > 1:
        comp[R:, :-R] = np.eye(R * (L - 1))
    return bool(np.max(np.abs(np.linalg.eigvals(comp))) < 1.0)


def generate_series(B_s: np.ndarray, sim: SimConfig, seed, init: np.ndarray | None = None) -> np.ndarray:
    """One stationary subject's T x R series: first L rows N(0, init_var I),
    then x_t = u_t B + e_t with e_t ~ N(0, noise_var I).

    An explicit init (L x R) replaces the random initial rows; with
    noise_var=0 the recursion is deterministic, which the tests exploit.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    B_s = np.asarray(B_s, dtype=float)
    R, L, T = sim.R, sim.L, sim.T
    if B_s.shape != (R * L, R):
        raise DataError(f"B_s must be {R * L} x {R}, got {B_s.shape}")
    eps = rng.normal(size=(T, R))
    x = np.empty((T, R))
    if init is not None:
        init = np.asarray(init, dtype=float)
        if init.shape != (L, R):
            raise DataError(f"init must be {L} x {R}, got {init.shape}")
        x[:L] = init
    else:
        x[:L] = np.sqrt(sim.init_var) * eps[:L]
    noise_sd = np.sqrt(sim.noise_var)
    for t in range(L, T):
        u = x[t - L:t][::-1].ravel()  # [x_{t-1}, ..., x_{t-L}]
        x[t] = u @ B_s + noise_sd * eps[t]
    return x


def simulate_study(sim: SimConfig) -> tuple[list[SubjectDataset], SimTruth]:
    """Full study draw: covariates, shared bank with per-group dropout,
    stationarity-checked subject coefficients, and time series.

    A subject failing the stationarity check has only its coefficient noise
    redrawn; the group functions stand.  Per-subject RNG streams come from
    spawning the master seed, so subjects are reproducible independently.
    """
    master = np.random.SeedSequence(sim.seed)
    cov_ss, fun_ss, subj_parent = master.spawn(3)
    covariates = sample_covariates(sim.n_subjects, np.random.default_rng(cov_ss), sim.P)
    truth = build_group_functions(sim, np.random.default_rng(fun_ss))
    groups = _subject_groups(sim)
    J = sim.n_coefficients
    in_band = truth.bands <= MAX_BAND
    sd = sim.subject_coef_var

    subjects: list[SubjectDataset] = []
    coefs = np.zeros((sim.n_subjects, J))
    subj_streams = subj_parent.spawn(sim.n_subjects)
    for s in range(sim.n_subjects):
        rng = np.random.default_rng(subj_streams[s])
        mean = truth.mean_matrix(int(groups[s]), covariates[s]).ravel()
        rejections = 0
        while True:
            flat = np.where(in_band, mean + sd * rng.normal(size=J), 0.0)
            B_s = flat.reshape(sim.R, sim.R * sim.L).T
            if is_stationary(B_s, sim.L):
                break
            rejections += 1
            if rejections > MAX_STATIONARITY_REJECTIONS:
                raise NumericalError(
                    f"subject {s + 1}: {rejections} consecutive non-stationary coefficient "
                    f"draws; the drawn group functions appear pathological (group {groups[s]})")
        coefs[s] = flat
        series = generate_series(B_s, sim, rng)
        subjects.append(SubjectDataset(subject_id=s + 1, series=series,
                                       covariates=covariates[s].copy(), group=int(groups[s])))
    truth.covariates = covariates
    truth.groups = groups
    truth.subject_coefs = coefs
    return subjects, truth
