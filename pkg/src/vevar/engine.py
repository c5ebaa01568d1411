"""Coordinate-ascent variational inference for the hierarchical
varying-effect VAR model.

The variational family factors per group g and flat coefficient j into:
Gaussian subject coefficient blocks q(beta) (block-diagonal by target,
which is exact under diagonal noise), Gaussian baselines q(mu), Bernoulli
edge indicators q(delta), per-covariate GP curve blocks q(phi) on the group
covariate grid, joint slab/indicator blocks q(w_tilde, s) where
q(w_tilde | s=0) stays at the prior, and Inverse-Gamma blocks q(sigma0),
q(sigma1), q(xi_r).

Updates perform mean-coupled coordinate ascent: each block update is the
exact conjugate maximizer of a single surrogate objective in which every
cross-block coupling enters through posterior means (precision and
log-expectations for the Inverse-Gamma blocks), while each block keeps its
own second moments.  Every sweep therefore leaves the surrogate objective
nondecreasing, which is what the fit trace records.  Fully marginal
coupling is deliberately avoided: propagating the posterior variances of
mu, phi and w through the subject-coefficient prior couples the blocks
through O(n_g) variance penalties whose fixed point turns every edge and
covariate off before the means can fit anything.  The exact mean-field
evidence lower bound of a stored state is still available through
compute_elbo for verification.

The zero state of each (phi, w_tilde) pair is a stationary saddle: each
mean update is proportional to the other block's mean, so from a cold
start with both at zero no coordinate update can move either.  fit()
breaks the symmetry on its first sweep with a proposal pass: a covariate
block whose means have never moved is updated once as if the slab weight
were 1, fitting the curve block to the current coefficient residuals; the
joint slab/indicator update then accepts or discards the proposal on its
own evidence.

All Inverse-Gamma parameters are shape/rate pairs: IG(a, b) has density
proportional to x^-(a+1) exp(-b/x), mean of 1/x equal to a/b, and
E[log x] = log b - digamma(a).

q(phi) covariances stay at the prior Gram matrix (the surrogate decouples
them, so the prior value is their maximizer); per-covariate eigendecisions
of the Gram matrix make every curve update an O(n^2) matrix-vector product.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, expit, gammaln, xlogy

from .kernels import KernelParams, gram
from .model import (
    ConfigError,
    ModelConfig,
    NumericalError,
    validate_subjects,
)

RIDGE_PENALTY = 1e-3
MONOTONICITY_RTOL = 1e-6
CONVERGENCE_RTOL = 1e-8
CONVERGENCE_STREAK = 3
DEFAULT_MAX_SWEEPS = 5000
DEFAULT_COLD_START_SWEEPS = 25
SCALE_SELECTION_INNER_ITERS = 100
COVARIATE_INNER_ITERS = 50

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class GroupState:
    """Variational parameters owned by one group (arrays indexed by flat j)."""

    edge_prob: np.ndarray        # (J,) q(delta_j = 1)
    mu_mean: np.ndarray          # (J,)
    mu_var: np.ndarray           # (J,)
    w_mean: np.ndarray           # (J, P) slab mean omega
    w_var: np.ndarray            # (J, P) slab variance
    w_prob: np.ndarray           # (J, P) q(s_jp = 1)
    phi_mean: np.ndarray         # (J, P, n_g) curve posterior mean on the grid
    phi_prec: np.ndarray         # (J, P) grid precision c of the curve fit
    spike_shape: float           # q(sigma0) IG shape
    spike_rate: float
    slab_shape: float            # q(sigma1) IG shape
    slab_rate: float
    noise_shape: np.ndarray      # (R,) q(xi_r) IG shapes
    noise_rate: np.ndarray


@dataclass
class SubjectState:
    """q(beta) for one subject: per-target mean rows and covariance blocks."""

    coef_mean: np.ndarray        # (R, RL)
    coef_cov: np.ndarray         # (R, RL, RL)


@dataclass
class VariationalState:
    config: ModelConfig
    groups: list
    subjects: list

    @property
    def effective_P(self) -> int:
        return 0 if self.config.intercept_only else self.config.P


@dataclass
class ElboTrace:
    values: list
    converged: bool
    sweeps: int


@dataclass
class UpdateSchedule:
    """Per-(group, edge) covariate update order (1-based permutations)."""

    covariate_order: np.ndarray  # (G, J, P)
    n_cold_starts: int = 0
    cold_start_sweeps: int = DEFAULT_COLD_START_SWEEPS

    def validate(self, config: ModelConfig) -> None:
        P = 0 if config.intercept_only else config.P
        expected = (config.G, config.n_coefficients, P)
        order = np.asarray(self.covariate_order)
        if order.shape != expected:
            raise ConfigError(f"covariate_order must have shape {expected}, got {order.shape}")
        if P and not np.all(np.sort(order, axis=-1) == np.arange(1, P + 1)):
            raise ConfigError("covariate_order rows must each be a permutation of 1..P")


def default_schedule(config: ModelConfig) -> UpdateSchedule:
    P = 0 if config.intercept_only else config.P
    order = np.tile(np.arange(1, P + 1), (config.G, config.n_coefficients, 1))
    return UpdateSchedule(covariate_order=order)


def group_members(data: list, G: int) -> list:
    """Per-group lists of positions into the data list, in data order."""
    return [[i for i, sub in enumerate(data) if sub.group == g + 1] for g in range(G)]


class _Workspace:
    """Fixed per-fit quantities: designs, their Gram products, group grids,
    and per-(group, covariate) kernel eigendecompositions."""

    def __init__(self, data: list, config: ModelConfig):
        validate_subjects(data, config)
        from .model import build_lagged_design

        self.config = config
        self.P_eff = 0 if config.intercept_only else config.P
        self.members = group_members(data, config.G)
        designs = [build_lagged_design(sub, config.L) for sub in data]
        self.n_obs_all = np.array([d.U.shape[0] for d in designs])
        self.utu = [d.U.T @ d.U for d in designs]
        self.utx = [d.U.T @ d.X for d in designs]
        self.xsq = [np.sum(d.X ** 2, axis=0) for d in designs]
        self.grids = []
        self.kernels = []
        params = KernelParams(config.kernel_lengthscale, config.kernel_variance)
        for g in range(config.G):
            mem = self.members[g]
            grid = np.stack([data[i].covariates for i in mem]) if mem else np.zeros((0, config.P))
            self.grids.append(grid)
            per_p = []
            for p in range(self.P_eff):
                gm = gram(grid[:, p], params)
                per_p.append((gm.eigvals, gm.eigvecs))
            self.kernels.append(per_p)

    def group_arrays(self, g: int):
        mem = self.members[g]
        utu = np.stack([self.utu[i] for i in mem])
        utx = np.stack([self.utx[i] for i in mem])
        xsq = np.stack([self.xsq[i] for i in mem])
        n_obs = self.n_obs_all[mem]
        return utu, utx, xsq, n_obs


def _covariate_contribs(gs: GroupState):
    """Mean of sum_p w_p phi_p(m_s) per (j, member) plus the slab-weight
    variance penalty sum_p Var(w_p) phi_p(m_s)^2 evaluated at the stored
    curve means."""
    Ew = gs.w_prob * gs.w_mean                                   # (J, P)
    Ew2 = gs.w_prob * (gs.w_mean ** 2 + gs.w_var)
    mean = np.einsum('jp,jpn->jn', Ew, gs.phi_mean)
    wvar = np.einsum('jp,jpn->jn', Ew2 - Ew ** 2, gs.phi_mean ** 2)
    return mean, wvar


def _curve_uncertainty(gs: GroupState, kernels: list):
    """Expected extra dispersion from the curve posteriors per edge:
    sum_p E[w_p^2] tr(K (I + c K)^-1) at the stored fit precisions.  This is
    the part of E[(beta - f)^2] beyond the plug-in curve means; carrying it
    keeps the slab residuals unbiased (the fitted means alone absorb about
    one degree of freedom of noise per accepted curve, which would bias the
    slab scale low and erode the selection margin of near-null edges)."""
    Ew2 = gs.w_prob * (gs.w_mean ** 2 + gs.w_var)                # (J, P)
    out = np.zeros(gs.edge_prob.shape[0])
    for p, (lam, _) in enumerate(kernels):
        clam = np.outer(gs.phi_prec[:, p], lam)
        out += Ew2[:, p] * np.sum(lam[None, :] / (1.0 + clam), axis=1)
    return out


def _init_state(config: ModelConfig, ws: _Workspace) -> VariationalState:
    R, L = config.R, config.L
    RL, J = R * L, config.n_coefficients
    subjects = []
    for i in range(len(ws.n_obs_all)):
        A = ws.utu[i] + RIDGE_PENALTY * np.eye(RL)
        try:
            cov = np.linalg.inv(A)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"subject design {i + 1}: ridge factorization failed") from exc
        mean = (cov @ ws.utx[i]).T
        if not (np.all(np.isfinite(cov)) and np.all(np.isfinite(mean))):
            raise NumericalError(f"subject design {i + 1}: non-finite ridge initialization")
        cov = 0.5 * (cov + cov.T)
        subjects.append(SubjectState(coef_mean=mean, coef_cov=np.repeat(cov[None], R, axis=0)))
    groups = []
    P = ws.P_eff
    for g in range(config.G):
        mem = ws.members[g]
        n_g = len(mem)
        Eb = np.stack([subjects[i].coef_mean.reshape(-1) for i in mem], axis=1)
        groups.append(GroupState(
            edge_prob=np.full(J, config.pi_delta),
            mu_mean=Eb.mean(axis=1),
            mu_var=np.full(J, config.sigma2_mu),
            w_mean=np.zeros((J, P)),
            w_var=np.full((J, P), config.sigma2_w),
            w_prob=np.full((J, P), config.pi_phi),
            phi_mean=np.zeros((J, P, n_g)),
            phi_prec=np.zeros((J, P)),
            spike_shape=config.a0, spike_rate=config.b0,
            slab_shape=config.a1, slab_rate=config.b1,
            noise_shape=np.full(R, config.a_xi),
            noise_rate=np.full(R, config.b_xi),
        ))
    return VariationalState(config=config, groups=groups, subjects=subjects)


def init_state(config: ModelConfig, data: list, seed: int = 0) -> VariationalState:
    """Deterministic starting point: per-subject ridge coefficient estimates,
    group-averaged baselines, prior values everywhere else.  The seed is
    accepted for interface stability; initialization draws nothing."""
    return _init_state(config, _Workspace(data, config))


def _gather_beta(state: VariationalState, ws: _Workspace, g: int):
    mem = ws.members[g]
    Eb = np.stack([state.subjects[i].coef_mean.reshape(-1) for i in mem], axis=1)
    Vb = np.stack([np.diagonal(state.subjects[i].coef_cov, axis1=1, axis2=2).reshape(-1)
                   for i in mem], axis=1)
    return Eb, Vb


def _update_beta_group(state, ws, g, contrib_mean, e0, e1, ebar):
    config = state.config
    gs = state.groups[g]
    mem = ws.members[g]
    R, RL = config.R, config.R * config.L
    utu, utx, _, _ = ws.group_arrays(g)
    tau = (gs.edge_prob * e1 + (1.0 - gs.edge_prob) * e0).reshape(R, RL)
    fprior = (gs.edge_prob * e1)[:, None] * (gs.mu_mean[:, None] + contrib_mean)  # (J, n_g)
    Lam = ebar[None, :, None, None] * utu[:, None, :, :]
    idx = np.arange(RL)
    Lam[:, :, idx, idx] += tau[None, :, :]
    rhs = ebar[None, :, None] * np.swapaxes(utx, 1, 2) + fprior.T.reshape(len(mem), R, RL)
    try:
        S = np.linalg.inv(Lam.reshape(-1, RL, RL)).reshape(len(mem), R, RL, RL)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"group {g + 1}: coefficient precision factorization failed") from exc
    S = 0.5 * (S + np.swapaxes(S, 2, 3))
    mean = np.einsum('srij,srj->sri', S, rhs)
    if not (np.all(np.isfinite(S)) and np.all(np.isfinite(mean))):
        raise NumericalError(f"group {g + 1}: non-finite coefficient update")
    for si, i in enumerate(mem):
        state.subjects[i].coef_mean = mean[si]
        state.subjects[i].coef_cov = S[si]


def _covariate_pass(kernels, order0_g, q, Eb, u, w_mean, w_var, w_prob,
                    config, logit_pi_phi, dev_start):
    """Run every covariate block of every edge to the joint fixed point of
    its (curve, weight, indicator) conditionals, in per-edge schedule order,
    at per-edge data precision q (edge inclusion times slab precision).
    Edges are mutually independent given the other blocks, so edges sharing
    a covariate at the same schedule position are updated as one batch.

    Each inner iteration alternates two exact coordinate updates of the
    bound: the curve fit given the current weight moments (a kernel ridge in
    the eigenbasis) and the joint slab-weight/indicator update given the
    fresh curve.  Iterating to the fixed point matters because the pair is
    mutually gating: a half-believed weight fits a shrunken curve, which in
    turn buys less weight evidence, and a single lagged alternation per
    sweep drifts to the collapsed side of that feedback even when the
    developed state scores higher.

    dev_start=True ignores the stored weight state and starts every block
    from a developed hypothesis (unit slab mean, full inclusion) instead;
    the caller is responsible for accepting only states that improve the
    objective.  Operates on copies.  Returns the new block arrays, the
    aggregated contribution mean/variance, the per-edge curve-uncertainty
    total, and the per-edge sum of the blocks' local objective terms (weight
    bracket and entropy, indicator KL, curve prior quadratic and KL), whose
    counterpart data terms live in the slab residual the caller
    assembles."""
    J, n = Eb.shape
    P = len(kernels)
    s2w = config.sigma2_w
    wm, wv, wp = w_mean.copy(), w_var.copy(), w_prob.copy()
    pm = np.zeros((J, P, n))
    pc = np.zeros((J, P))
    contrib_mean = np.zeros((J, n))
    contrib_wvar = np.zeros((J, n))
    cu = np.zeros(J)
    lcov = np.zeros(J)
    for k in range(P):
        p_of_j = order0_g[:, k]
        for p in np.unique(p_of_j):
            js = np.flatnonzero(p_of_j == p)
            lam, Q = kernels[p]
            rho_e = (Eb[js] - u[js, None] - contrib_mean[js]) @ Q
            qj = q[js]
            if dev_start:
                om = np.ones(js.size)
                sig = np.full(js.size, s2w)
                gp = np.ones(js.size)
            else:
                om, sig, gp = wm[js, p], wv[js, p], wp[js, p]
            for _ in range(COVARIATE_INNER_ITERS):
                c = qj * gp * (om ** 2 + sig)
                clam = np.outer(c, lam)
                shrink = lam[None, :] / (1.0 + clam)
                mu_e = (qj * gp * om)[:, None] * rho_e * shrink
                trk = np.sum(shrink, axis=1)
                sig_new = 1.0 / (1.0 / s2w
                                 + qj * (np.sum(mu_e ** 2, axis=1) + trk))
                om_new = sig_new * qj * np.sum(mu_e * rho_e, axis=1)
                gp_new = expit(logit_pi_phi + 0.5 * np.log(sig_new / s2w)
                               + om_new ** 2 / (2.0 * sig_new))
                moved = max(float(np.max(np.abs(om_new - om))),
                            float(np.max(np.abs(gp_new - gp))))
                om, sig, gp = om_new, sig_new, gp_new
                if moved < 1e-12:
                    break
            # the stored pair is sequentially consistent: the curve is the
            # conditional given the previous weights, the weights the
            # conditional given that curve
            wm[js, p], wv[js, p], wp[js, p] = om, sig, gp
            mu = mu_e @ Q.T
            pm[js, p, :] = mu
            pc[js, p] = c
            Ew = gp * om
            Ew2 = gp * (om ** 2 + sig)
            contrib_mean[js] += Ew[:, None] * mu
            contrib_wvar[js] += (Ew2 - Ew ** 2)[:, None] * mu ** 2
            cu[js] += Ew2 * np.sum(shrink, axis=1)
            lcov[js] += (gp * (-(om ** 2 + sig) / (2.0 * s2w) + 0.5
                               + 0.5 * np.log(sig / s2w))
                         + _bernoulli_kl_terms(gp, config.pi_phi)
                         - 0.5 * np.sum(mu_e ** 2 / lam[None, :], axis=1)
                         - 0.5 * np.sum(np.log1p(clam) - clam / (1.0 + clam),
                                        axis=1))
    return wm, wv, wp, pm, pc, contrib_mean, contrib_wvar, cu, lcov


def _update_covariate_blocks(gs, kernels, order0_g, Eb, e1, config, logit_pi_phi):
    """Gated covariate update: every block refit at its edge's current data
    precision, stored in place.  Returns the contribution arrays, per-edge
    curve-uncertainty totals, and per-edge local bound terms."""
    q = gs.edge_prob * e1
    wm, wv, wp, pm, pc, cm, cwv, cu, lcov = _covariate_pass(
        kernels, order0_g, q, Eb, gs.mu_mean, gs.w_mean, gs.w_var, gs.w_prob,
        config, logit_pi_phi, dev_start=False)
    gs.w_mean, gs.w_var, gs.w_prob = wm, wv, wp
    gs.phi_mean, gs.phi_prec = pm, pc
    return cm, cwv, cu, lcov


def _develop_structure(kernels, order0_g, config, Eb, Vb, n_g, e1,
                       logit_pi_phi, w_mean, w_var, w_prob):
    """Fit every edge's baseline and covariate blocks at full inclusion and
    slab precision e1 (the developed hypothesis).  The curves are developed
    around a provisional full-inclusion baseline rather than the stored one:
    a deselected edge's stored baseline has relaxed toward zero, and a curve
    developed against it would absorb the constant offset that belongs to
    the refitted baseline.  Returns the developed block arrays, contribution
    arrays, per-edge local objective terms, the refitted baseline moments,
    and the developed slab residual sums."""
    J, n = Eb.shape
    s2m = config.sigma2_mu
    den_on = 1.0 / s2m + e1 * n_g
    v_on = 1.0 / den_on
    if kernels:
        u_pre = e1 * np.sum(Eb, axis=1) / den_on
        wm, wv, wp, pm, pc, cm, cwv, cu, lcov = _covariate_pass(
            kernels, order0_g, np.full(J, e1), Eb, u_pre,
            w_mean, w_var, w_prob, config, logit_pi_phi, dev_start=True)
    else:
        wm, wv, wp = w_mean.copy(), w_var.copy(), w_prob.copy()
        pm = np.zeros((J, wm.shape[1], n))
        pc = np.zeros((J, wm.shape[1]))
        cm = np.zeros((J, n))
        cwv = np.zeros((J, n))
        cu = np.zeros(J)
        lcov = np.zeros(J)
    u_on = e1 * np.sum(Eb - cm, axis=1) / den_on
    Sdiff = (np.sum((Eb - u_on[:, None] - cm) ** 2 + Vb + cwv, axis=1)
             + n_g * v_on + cu)
    return wm, wv, wp, pm, pc, cm, cwv, cu, lcov, u_on, v_on, Sdiff


def _develop_edges(gs, kernels, order0_g, config, Eb, Vb, n_g, e0, e1,
                   elog0, elog1, logit_pi_delta, logit_pi_phi,
                   contrib_mean, contrib_wvar, cu, lcov):
    """Per-edge development proposals against the gated state.  The gated
    conditionals alone are a self-locking fixed point: a deselected edge
    fits no group-mean structure, and an edge without developed structure
    generates no selection evidence, so an edge that decays (or starts
    undecided) can never re-enter no matter how much signal it carries.
    This step fits every edge's baseline and covariate blocks at full
    inclusion, evaluates the edge indicator against that developed
    hypothesis, and accepts the developed state exactly for the edges where
    it improves the edge's additive share of the bound at the current scale
    posteriors (a coordinate move is valid whenever it goes uphill, not
    only when it is the gated conditional).  Returns the spliced slab
    residuals and raw second moments for the scale/indicator loop."""
    s2m = config.sigma2_mu
    Sbeta2 = np.sum(Eb ** 2 + Vb, axis=1)

    def edge_bound(Sdiff, u, v, gd, lc):
        return (gd * (-0.5 * n_g * (_LOG_2PI + elog1) - 0.5 * e1 * Sdiff)
                + (1.0 - gd) * (-0.5 * n_g * (_LOG_2PI + elog0) - 0.5 * e0 * Sbeta2)
                - (u ** 2 + v) / (2.0 * s2m) + 0.5 * np.log(v)
                + _bernoulli_kl_terms(gd, config.pi_delta) + lc)

    def edge_logit(Sdiff):
        return (logit_pi_delta - 0.5 * n_g * (elog1 - elog0)
                - 0.5 * e1 * Sdiff + 0.5 * e0 * Sbeta2)

    base_a = np.sum((Eb - gs.mu_mean[:, None] - contrib_mean) ** 2
                    + Vb + contrib_wvar, axis=1)
    Sdiff_a = base_a + n_g * gs.mu_var + cu
    gda = expit(edge_logit(Sdiff_a))
    la = edge_bound(Sdiff_a, gs.mu_mean, gs.mu_var, gda, lcov)

    (wm_b, wv_b, wp_b, pm_b, pc_b, _, _, _, lcov_b,
     u_on, v_on, Sdiff_b) = _develop_structure(
        kernels, order0_g, config, Eb, Vb, n_g, e1, logit_pi_phi,
        gs.w_mean, gs.w_var, gs.w_prob)
    gdb = expit(edge_logit(Sdiff_b))
    lb = edge_bound(Sdiff_b, u_on, v_on, gdb, lcov_b)

    acc = lb > la
    gs.edge_prob = np.where(acc, gdb, gda)
    gs.mu_mean = np.where(acc, u_on, gs.mu_mean)
    gs.mu_var = np.where(acc, v_on, gs.mu_var)
    if kernels and np.any(acc):
        gs.w_mean[acc] = wm_b[acc]
        gs.w_var[acc] = wv_b[acc]
        gs.w_prob[acc] = wp_b[acc]
        gs.phi_mean[acc] = pm_b[acc]
        gs.phi_prec[acc] = pc_b[acc]
    return np.where(acc, Sdiff_b, Sdiff_a), Sbeta2


def _stored_edge_terms(gs, config, kernels_g, Eb, Vb, n_g):
    """Per-edge slab residual sums and selected-edge local bound terms of
    the stored group blocks (the edge-by-edge decomposition of the same
    quantities _group_bound_parts sums): the residual around the stored
    baseline-plus-curves, and the selection prior mass plus the baseline,
    weight and curve block terms relative to their relaxed values."""
    if kernels_g:
        cm, cwv = _covariate_contribs(gs)
        cu = _curve_uncertainty(gs, kernels_g)
    else:
        cm = np.zeros_like(Eb)
        cwv = np.zeros_like(Eb)
        cu = np.zeros(Eb.shape[0])
    Sdiff = (np.sum((Eb - gs.mu_mean[:, None] - cm) ** 2 + Vb + cwv, axis=1)
             + n_g * gs.mu_var + cu)
    s2m = config.sigma2_mu
    loc = (np.log(config.pi_delta)
           - (gs.mu_mean ** 2 + gs.mu_var) / (2.0 * s2m)
           + 0.5 + 0.5 * np.log(gs.mu_var / s2m))
    if kernels_g:
        s2w = config.sigma2_w
        gp, om, sig = gs.w_prob, gs.w_mean, gs.w_var
        loc = loc + np.sum(
            gp * (-(om ** 2 + sig) / (2.0 * s2w) + 0.5
                  + 0.5 * np.log(sig / s2w))
            + _bernoulli_kl_terms(gp, config.pi_phi), axis=1)
        for p, (lam, Q) in enumerate(kernels_g):
            clam = np.outer(gs.phi_prec[:, p], lam)
            proj = gs.phi_mean[:, p, :] @ Q
            loc = loc - 0.5 * np.sum(proj ** 2 / lam[None, :], axis=1) \
                      - 0.5 * np.sum(np.log1p(clam) - clam / (1.0 + clam),
                                     axis=1)
    return Sdiff, loc


def _copy_group(gs: GroupState) -> GroupState:
    return GroupState(
        edge_prob=gs.edge_prob.copy(),
        mu_mean=gs.mu_mean.copy(), mu_var=gs.mu_var.copy(),
        w_mean=gs.w_mean.copy(), w_var=gs.w_var.copy(), w_prob=gs.w_prob.copy(),
        phi_mean=gs.phi_mean.copy(), phi_prec=gs.phi_prec.copy(),
        spike_shape=gs.spike_shape, spike_rate=gs.spike_rate,
        slab_shape=gs.slab_shape, slab_rate=gs.slab_rate,
        noise_shape=gs.noise_shape.copy(), noise_rate=gs.noise_rate.copy())


def _basin_proposal(gs, config, kernels_g, order0_g, Eb, Vb, n_g,
                    logit_pi_delta, logit_pi_phi):
    """Build one deterministic re-seeded candidate for the group's joint
    scale/selection state.  The block conditionals are locally exact but
    globally myopic: the joint landscape over scales, indicators and
    structure has several self-consistent basins, and in the degenerate one
    (slab decalibrated, every indicator collapsed) each block is individually
    optimal given the others, so no conditional sequence can leave it even
    when a selected basin scores far higher.

    The candidate is found by enumerating selection basins directly.  One
    full-inclusion development pass at a reference precision gives every
    edge its developed residual sum; currently selected edges instead keep
    their stored, converged blocks (a cold redevelopment of an already-fit
    edge only loses ground).  Edges are ordered by raw coefficient scatter
    (what decides spike or slab residency at any fixed point), and every
    prefix of the order defines a hard assignment (prefix structured and
    selected, remainder relaxed and deselected) whose scale posteriors and
    bound share follow in closed form from cumulative sums.  Any
    self-consistent selection state is a top set of this order up to
    marginal edges, so the best prefix locates the best basin without
    trusting any scale heuristic; the winner is polished by the
    scale/selection alternation.  The caller splices the candidate in only
    if it improves the group's exact share of the bound, which keeps the
    move monotone and a no-op once the fit sits in the best basin."""
    J = Eb.shape[0]
    Sbeta2 = np.sum(Eb ** 2 + Vb, axis=1)
    med = float(np.median(Sbeta2)) / n_g
    if not med > 0.0:
        return None
    (wm, wv, wp, pm, pc, _, _, _, lcov, u_on, v_on, Sdiff_dev) = \
        _develop_structure(kernels_g, order0_g, config, Eb, Vb, n_g,
                           1.0 / med, logit_pi_phi,
                           gs.w_mean, gs.w_var, gs.w_prob)
    s2m = config.sigma2_mu
    # per-edge share of a structured, selected edge beyond its scale terms:
    # selection prior mass, baseline prior and entropy, covariate blocks
    on_dev = (np.log(config.pi_delta) - (u_on ** 2 + v_on) / (2.0 * s2m)
              + 0.5 + 0.5 * np.log(v_on / s2m) + lcov)
    kept = gs.edge_prob > 0.5
    Sdiff_cur, on_cur = _stored_edge_terms(gs, config, kernels_g, Eb, Vb, n_g)
    Sd = np.where(kept, Sdiff_cur, Sdiff_dev)
    on_local = np.where(kept, on_cur, on_dev)
    # a relaxed, deselected edge contributes only its prior mass: the
    # baseline and covariate blocks sit at their priors with zero net terms
    off_local = float(np.log1p(-config.pi_delta))

    order = np.argsort(-Sbeta2, kind="stable")
    csum_sd = np.concatenate(([0.0], np.cumsum(Sd[order])))
    csum_sb = np.concatenate(([0.0], np.cumsum(Sbeta2[order])))
    csum_on = np.concatenate(([0.0], np.cumsum(on_local[order])))
    K = np.arange(J + 1)
    slab_shape = config.a1 + 0.5 * n_g * K
    slab_rate = config.b1 + 0.5 * csum_sd
    spike_shape = config.a0 + 0.5 * n_g * (J - K)
    spike_rate = config.b0 + 0.5 * (csum_sb[J] - csum_sb)
    e1 = slab_shape / slab_rate
    e0 = spike_shape / spike_rate
    elog1 = np.log(slab_rate) - digamma(slab_shape)
    elog0 = np.log(spike_rate) - digamma(spike_shape)
    score = (csum_on + (J - K) * off_local
             - 0.5 * n_g * K * elog1 - 0.5 * e1 * csum_sd
             - 0.5 * n_g * (J - K) * elog0 - 0.5 * e0 * (csum_sb[J] - csum_sb)
             + _ig_prior_and_entropy(config.a1, config.b1, slab_shape, slab_rate)
             + _ig_prior_and_entropy(config.a0, config.b0, spike_shape, spike_rate))
    kstar = int(np.argmax(score))
    if not np.isfinite(score[kstar]):
        return None

    cand = _copy_group(gs)
    cand.slab_shape = float(slab_shape[kstar])
    cand.slab_rate = float(slab_rate[kstar])
    cand.spike_shape = float(spike_shape[kstar])
    cand.spike_rate = float(spike_rate[kstar])
    in_prefix = np.zeros(J, dtype=bool)
    in_prefix[order[:kstar]] = True
    use_dev = in_prefix & ~kept
    drop = ~in_prefix
    cand.mu_mean = np.where(use_dev, u_on, np.where(drop, 0.0, gs.mu_mean))
    cand.mu_var = np.where(use_dev, v_on, np.where(drop, s2m, gs.mu_var))
    if kernels_g:
        cand.w_mean = np.where(use_dev[:, None], wm,
                               np.where(drop[:, None], 0.0, gs.w_mean))
        cand.w_var = np.where(use_dev[:, None], wv,
                              np.where(drop[:, None], config.sigma2_w, gs.w_var))
        cand.w_prob = np.where(use_dev[:, None], wp,
                               np.where(drop[:, None], config.pi_phi, gs.w_prob))
        cand.phi_mean = np.where(use_dev[:, None, None], pm,
                                 np.where(drop[:, None, None], 0.0, gs.phi_mean))
        cand.phi_prec = np.where(use_dev[:, None], pc,
                                 np.where(drop[:, None], 0.0, gs.phi_prec))
    # per-edge slab residuals of the assembled state: stored for kept
    # prefix edges, developed for new ones, relaxed (prior baseline
    # variance, prior curve dispersion) for the rest
    Sdiff = Sbeta2 + n_g * s2m
    if kernels_g:
        Sdiff = Sdiff + config.pi_phi * sum(float(np.sum(lam))
                                            for lam, _ in kernels_g)
    Sdiff = np.where(in_prefix, Sd, Sdiff)
    logit = (logit_pi_delta - 0.5 * n_g * (float(elog1[kstar]) - float(elog0[kstar]))
             - 0.5 * float(e1[kstar]) * Sdiff + 0.5 * float(e0[kstar]) * Sbeta2)
    cand.edge_prob = expit(logit)
    _scale_selection_loop(cand, config, Sdiff, Sbeta2, n_g, logit_pi_delta)
    return cand


def _expected_rss(state, ws, g):
    """E||X_r - U b_r||^2 per (member, target): residual at the mean plus
    the trace coupling with the coefficient covariance."""
    mem = ws.members[g]
    utu, utx, xsq, _ = ws.group_arrays(g)
    um = np.stack([state.subjects[i].coef_mean for i in mem])      # (n_g, R, RL)
    S = np.stack([state.subjects[i].coef_cov for i in mem])        # (n_g, R, RL, RL)
    cross = np.einsum('sri,sir->sr', um, utx)
    quad = np.einsum('sri,sij,srj->sr', um, utu, um)
    trace = np.einsum('sij,srij->sr', utu, S)
    return xsq - 2.0 * cross + quad + trace


def _ig_prior_and_entropy(a, b, shape, rate):
    """E_q[log p(x)] + H[q] for prior IG(a, b) and q = IG(shape, rate)."""
    elog = np.log(rate) - digamma(shape)
    einv = shape / rate
    cross = a * np.log(b) - gammaln(a) - (a + 1.0) * elog - b * einv
    entropy = shape + np.log(rate) + gammaln(shape) - (1.0 + shape) * digamma(shape)
    return cross + entropy


def _bernoulli_kl_terms(prob, prior):
    """E_q[log p] + H[q] for Bernoulli factors (equals -KL(q || prior))."""
    return (xlogy(prob, prior) + xlogy(1.0 - prob, 1.0 - prior)
            - xlogy(prob, prob) - xlogy(1.0 - prob, 1.0 - prob))


def _group_bound_parts(gs: GroupState, config: ModelConfig, kernels_g,
                       Eb, Vb, n_g):
    """The bound blocks that depend on the group-level posteriors
    (coefficient prior, baselines, edge indicators, weights, curves, both
    scale components), keyed like the full decomposition.  The complement
    (likelihood, coefficient entropy, noise scales) depends only on the
    subject-level posteriors, so two candidate group states over the same
    coefficients can be compared on this sum alone."""
    parts = {}
    e0 = gs.spike_shape / gs.spike_rate
    e1 = gs.slab_shape / gs.slab_rate
    elog0 = np.log(gs.spike_rate) - digamma(gs.spike_shape)
    elog1 = np.log(gs.slab_rate) - digamma(gs.slab_shape)

    if kernels_g:
        contrib_mean, contrib_wvar = _covariate_contribs(gs)
    else:
        contrib_mean = np.zeros_like(Eb)
        contrib_wvar = np.zeros_like(Eb)
    fmean = gs.mu_mean[:, None] + contrib_mean
    Sdiff = np.sum((Eb - fmean) ** 2 + Vb + contrib_wvar, axis=1) + n_g * gs.mu_var
    if kernels_g:
        Sdiff = Sdiff + _curve_uncertainty(gs, kernels_g)
    Sbeta2 = np.sum(Eb ** 2 + Vb, axis=1)
    gd = gs.edge_prob
    parts["beta_prior"] = float(np.sum(
        gd * (-0.5 * n_g * (_LOG_2PI + elog1) - 0.5 * e1 * Sdiff)
        + (1.0 - gd) * (-0.5 * n_g * (_LOG_2PI + elog0) - 0.5 * e0 * Sbeta2)))

    parts["mu"] = float(np.sum(
        -0.5 * np.log(2.0 * np.pi * config.sigma2_mu)
        - (gs.mu_mean ** 2 + gs.mu_var) / (2.0 * config.sigma2_mu)
        + 0.5 * np.log(2.0 * np.pi * np.e * gs.mu_var)))
    parts["delta"] = float(np.sum(_bernoulli_kl_terms(gd, config.pi_delta)))

    parts["w"] = parts["phi"] = 0.0
    if kernels_g:
        s2w = config.sigma2_w
        gp = gs.w_prob
        parts["w"] = float(np.sum(
            gp * (-0.5 * np.log(2.0 * np.pi * s2w)
                  - (gs.w_mean ** 2 + gs.w_var) / (2.0 * s2w))
            + (1.0 - gp) * (-0.5 * np.log(2.0 * np.pi * s2w) - 0.5)
            + _bernoulli_kl_terms(gp, config.pi_phi)
            + gp * 0.5 * np.log(2.0 * np.pi * np.e * gs.w_var)
            + (1.0 - gp) * 0.5 * np.log(2.0 * np.pi * np.e * s2w)))
        for p, (lam, Q) in enumerate(kernels_g):
            clam = np.outer(gs.phi_prec[:, p], lam)
            # curve prior quadratic plus the KL beyond the mean shift
            proj = gs.phi_mean[:, p, :] @ Q
            quad_k = np.sum(proj ** 2 / lam[None, :], axis=1)
            parts["phi"] += float(np.sum(-0.5 * quad_k))
            parts["phi"] += float(np.sum(
                -0.5 * (np.log1p(clam) - clam / (1.0 + clam))))

    parts["sigma0"] = float(_ig_prior_and_entropy(config.a0, config.b0,
                                                  gs.spike_shape, gs.spike_rate))
    parts["sigma1"] = float(_ig_prior_and_entropy(config.a1, config.b1,
                                                  gs.slab_shape, gs.slab_rate))
    return parts


def _bound_terms(state: VariationalState, ws: _Workspace):
    """The mean-field evidence lower bound of the stored state, decomposed
    into additive blocks.  Every sweep phase either applies the exact
    conditional of this bound or an explicitly bound-guarded move, so it is
    also the objective the coordinate ascent maximizes and the quantity the
    monotonicity guard watches."""
    config = state.config
    R, RL = config.R, config.R * config.L
    parts = {k: 0.0 for k in ("likelihood", "beta_entropy", "beta_prior", "mu",
                              "delta", "w", "phi", "sigma0", "sigma1", "xi")}
    for g in range(config.G):
        gs = state.groups[g]
        mem = ws.members[g]
        n_g = len(mem)
        ebar = gs.noise_shape / gs.noise_rate
        elogxi = np.log(gs.noise_rate) - digamma(gs.noise_shape)

        _, _, _, n_obs = ws.group_arrays(g)
        rss = _expected_rss(state, ws, g)
        parts["likelihood"] += (-0.5 * n_obs.sum() * (R * _LOG_2PI + elogxi.sum())
                                - 0.5 * float(np.sum(rss * ebar[None, :])))
        covs = np.stack([state.subjects[i].coef_cov for i in mem]).reshape(-1, RL, RL)
        sign, logdet = np.linalg.slogdet(covs)
        if np.any(sign <= 0):
            raise NumericalError(f"group {g + 1}: coefficient covariance not positive definite")
        parts["beta_entropy"] += 0.5 * (covs.shape[0] * RL * (_LOG_2PI + 1.0) + logdet.sum())

        Eb, Vb = _gather_beta(state, ws, g)
        for key, val in _group_bound_parts(gs, config,
                                           ws.kernels[g] if ws.P_eff else [],
                                           Eb, Vb, n_g).items():
            parts[key] += val
        parts["xi"] += float(np.sum(_ig_prior_and_entropy(config.a_xi, config.b_xi,
                                                          gs.noise_shape, gs.noise_rate)))
    total = float(sum(parts.values()))
    if not np.isfinite(total):
        bad = [k for k, v in parts.items() if not np.isfinite(v)]
        raise NumericalError(f"non-finite bound contribution from block(s): {', '.join(bad)}")
    return total, parts


def _objective(state: VariationalState, ws: _Workspace, return_parts: bool = False):
    total, parts = _bound_terms(state, ws)
    return (total, parts) if return_parts else total


def fit_objective(state: VariationalState, data: list, config: ModelConfig,
                  return_parts: bool = False):
    """The objective the sweeps maximize coordinatewise (the evidence lower
    bound); this is what ElboTrace records and what the monotonicity guard
    watches."""
    return _objective(state, _Workspace(data, config), return_parts=return_parts)


def compute_elbo(state: VariationalState, data: list, config: ModelConfig,
                 return_parts: bool = False):
    """Mean-field evidence lower bound of the stored state on the data
    (optionally with its additive per-block decomposition)."""
    return fit_objective(state, data, config, return_parts=return_parts)


def _update_scales(gs, config, Sdiff, Sbeta2, n_g):
    """Conjugate update of the spike/slab scale components.  No ordering is
    imposed between the two: the components are exchangeable in the prior,
    and at small group sizes the converged slab (selected edges with their
    structure explained) is legitimately narrower than the spike (everything
    unexplained pooled together)."""
    gd = gs.edge_prob
    gs.slab_shape = config.a1 + 0.5 * n_g * float(gd.sum())
    gs.slab_rate = config.b1 + 0.5 * float(np.sum(gd * Sdiff))
    gs.spike_shape = config.a0 + 0.5 * n_g * float((1.0 - gd).sum())
    gs.spike_rate = config.b0 + 0.5 * float(np.sum((1.0 - gd) * Sbeta2))


def _scale_selection_loop(gs, config, Sdiff, Sbeta2, n_g, logit_pi_delta,
                          after_phase=None, g=0):
    """Scale components and edge indicators, alternated to their joint fixed
    point.  Both are closed-form argmax steps given the residual sums, so
    the alternation is plain coordinate ascent; running it to convergence
    keeps the indicators consistent with the scales they imply (a single
    lagged alternation per sweep lets the scale reaction trail the selection
    by a sweep, which at the larger group size is enough for near-null edges
    to slip in before the spike tightens on them)."""
    for _ in range(SCALE_SELECTION_INNER_ITERS):
        _update_scales(gs, config, Sdiff, Sbeta2, n_g)
        e0 = gs.spike_shape / gs.spike_rate
        e1 = gs.slab_shape / gs.slab_rate
        elog0 = np.log(gs.spike_rate) - digamma(gs.spike_shape)
        elog1 = np.log(gs.slab_rate) - digamma(gs.slab_shape)
        if after_phase:
            after_phase(f"sigma0/sigma1 (group {g + 1})")
        logit = (logit_pi_delta - 0.5 * n_g * (elog1 - elog0)
                 - 0.5 * e1 * Sdiff + 0.5 * e0 * Sbeta2)
        prev_prob = gs.edge_prob
        gs.edge_prob = expit(logit)
        if after_phase:
            after_phase(f"delta (group {g + 1})")
        if float(np.max(np.abs(gs.edge_prob - prev_prob))) < 1e-10:
            break


def _sweep(state: VariationalState, ws: _Workspace, order0: np.ndarray,
           after_phase=None):
    config = state.config
    logit_pi_phi = float(np.log(config.pi_phi) - np.log1p(-config.pi_phi))
    logit_pi_delta = float(np.log(config.pi_delta) - np.log1p(-config.pi_delta))
    for g in range(config.G):
        gs = state.groups[g]
        mem = ws.members[g]
        n_g = len(mem)
        kern = ws.kernels[g] if ws.P_eff else []
        og = order0[g] if ws.P_eff else None
        e0 = gs.spike_shape / gs.spike_rate
        e1 = gs.slab_shape / gs.slab_rate
        ebar = gs.noise_shape / gs.noise_rate
        elog0 = np.log(gs.spike_rate) - digamma(gs.spike_shape)
        elog1 = np.log(gs.slab_rate) - digamma(gs.slab_shape)

        if ws.P_eff:
            contrib_mean, contrib_wvar = _covariate_contribs(gs)
        else:
            contrib_mean = np.zeros((config.n_coefficients, n_g))
            contrib_wvar = np.zeros((config.n_coefficients, n_g))

        _update_beta_group(state, ws, g, contrib_mean, e0, e1, ebar)
        if after_phase:
            after_phase(f"beta (group {g + 1})")
        Eb, Vb = _gather_beta(state, ws, g)

        if ws.P_eff:
            contrib_mean, contrib_wvar, cu, lcov = _update_covariate_blocks(
                gs, kern, og, Eb, e1, config, logit_pi_phi)
            if after_phase:
                after_phase(f"covariate curves/weights (group {g + 1})")
        else:
            cu = np.zeros(config.n_coefficients)
            lcov = np.zeros(config.n_coefficients)

        # baseline block: conjugate update at the gated data precision, so a
        # deselected edge's baseline relaxes to its prior
        prec = gs.edge_prob * e1
        denom = 1.0 / config.sigma2_mu + prec * n_g
        gs.mu_mean = prec * np.sum(Eb - contrib_mean, axis=1) / denom
        gs.mu_var = 1.0 / denom
        if after_phase:
            after_phase(f"mu (group {g + 1})")

        Sdiff, Sbeta2 = _develop_edges(
            gs, kern, og, config, Eb, Vb, n_g, e0, e1, elog0, elog1,
            logit_pi_delta, logit_pi_phi, contrib_mean, contrib_wvar, cu, lcov)
        if after_phase:
            after_phase(f"edge development (group {g + 1})")

        _scale_selection_loop(gs, config, Sdiff, Sbeta2, n_g, logit_pi_delta,
                              after_phase, g)

        _, _, _, n_obs = ws.group_arrays(g)
        rss = _expected_rss(state, ws, g)
        gs.noise_shape = np.full(config.R, config.a_xi + 0.5 * float(n_obs.sum()))
        gs.noise_rate = config.b_xi + 0.5 * rss.sum(axis=0)
        if after_phase:
            after_phase(f"xi (group {g + 1})")

        cand = _basin_proposal(gs, config, kern, og, Eb, Vb, n_g,
                               logit_pi_delta, logit_pi_phi)
        if cand is not None:
            cur = sum(_group_bound_parts(gs, config, kern, Eb, Vb, n_g).values())
            new = sum(_group_bound_parts(cand, config, kern, Eb, Vb, n_g).values())
            if np.isfinite(new) and new > cur:
                gs.edge_prob = cand.edge_prob
                gs.mu_mean, gs.mu_var = cand.mu_mean, cand.mu_var
                gs.w_mean, gs.w_var, gs.w_prob = cand.w_mean, cand.w_var, cand.w_prob
                gs.phi_mean, gs.phi_prec = cand.phi_mean, cand.phi_prec
                gs.spike_shape, gs.spike_rate = cand.spike_shape, cand.spike_rate
                gs.slab_shape, gs.slab_rate = cand.slab_shape, cand.slab_rate
        if after_phase:
            after_phase(f"basin proposal (group {g + 1})")


def cavi_sweep(state: VariationalState, data: list, config: ModelConfig,
               schedule: UpdateSchedule | None = None) -> VariationalState:
    """One full coordinate-ascent sweep; returns the updated copy of state."""
    ws = _Workspace(data, config)
    if schedule is None:
        schedule = default_schedule(config)
    schedule.validate(config)
    order0 = np.asarray(schedule.covariate_order, dtype=int) - 1
    new_state = copy.deepcopy(state)
    _sweep(new_state, ws, order0)
    return new_state


def _diagnose_decrease(snapshot: VariationalState, ws: _Workspace, order0: np.ndarray) -> str:
    state = copy.deepcopy(snapshot)
    last = _objective(state, ws)
    offender = []

    def check(name):
        nonlocal last
        cur = _objective(state, ws)
        if not offender and cur < last - MONOTONICITY_RTOL * max(abs(last), 1.0):
            offender.append(f"{name} ({last:.6f} -> {cur:.6f})")
        last = cur

    _sweep(state, ws, order0, after_phase=check)
    return offender[0] if offender else "not reproduced block-by-block"


def fit(data: list, config: ModelConfig, schedule: UpdateSchedule | None = None,
        seed: int = 0, max_sweeps: int = DEFAULT_MAX_SWEEPS,
        rel_tol: float = CONVERGENCE_RTOL,
        streak: int = CONVERGENCE_STREAK) -> tuple[VariationalState, ElboTrace]:
    """Run the coordinate ascent to convergence: stops once the relative
    objective change stays below rel_tol for `streak` consecutive sweeps,
    or at max_sweeps (the state is still returned, trace.converged False).

    Sweep 1 runs the covariate proposal pass; the trace starts at its end.
    An objective decrease beyond the 1e-6 relative guard aborts with a
    diagnostic naming the first offending block.
    """
    ws = _Workspace(data, config)
    if schedule is None:
        schedule = default_schedule(config)
    schedule.validate(config)
    order0 = np.asarray(schedule.covariate_order, dtype=int) - 1
    state = _init_state(config, ws)
    values = []
    hits = 0
    converged = False
    prev = None
    for sweep in range(1, max_sweeps + 1):
        snapshot = copy.deepcopy(state)
        _sweep(state, ws, order0)
        current = _objective(state, ws)
        values.append(current)
        if prev is not None:
            if current < prev - MONOTONICITY_RTOL * max(abs(prev), 1.0):
                block = _diagnose_decrease(snapshot, ws, order0)
                raise NumericalError(
                    f"objective decreased during sweep {sweep}: {prev:.10f} -> {current:.10f}; "
                    f"first offending block: {block}")
            rel = abs(current - prev) / max(abs(prev), 1e-12)
            hits = hits + 1 if rel < rel_tol else 0
        prev = current
        if hits >= streak:
            converged = True
            break
    return state, ElboTrace(values=values, converged=converged, sweeps=len(values))


def prioritized_schedule(data: list, config: ModelConfig, seed: int = 0,
                         cold_start_sweeps: int = DEFAULT_COLD_START_SWEEPS) -> UpdateSchedule:
    """Covariate ordering from 2P short cold starts: run p places covariate
    p first, run P+p places it last (others ascending).  Importance per
    (group, edge, covariate) is the mean inclusion probability across runs;
    the final per-edge order sorts by descending importance with ties broken
    by ascending covariate index."""
    P = 0 if config.intercept_only else config.P
    if P == 0:
        return default_schedule(config)
    ws = _Workspace(data, config)
    J = config.n_coefficients
    importance = np.zeros((config.G, J, P))
    runs = []
    for p in range(P):
        rest = [q for q in range(P) if q != p]
        runs.append([p] + rest)
    for p in range(P):
        rest = [q for q in range(P) if q != p]
        runs.append(rest + [p])
    for perm in runs:
        order0 = np.tile(np.array(perm, dtype=int), (config.G, J, 1))
        state = _init_state(config, ws)
        for sweep in range(cold_start_sweeps):
            _sweep(state, ws, order0)
        for g in range(config.G):
            importance[g] += state.groups[g].w_prob
    importance /= len(runs)
    # stable argsort of negated importance keeps ties in ascending index order
    order = np.argsort(-importance, axis=-1, kind="stable") + 1
    return UpdateSchedule(covariate_order=order, n_cold_starts=len(runs),
                          cold_start_sweeps=cold_start_sweeps)
