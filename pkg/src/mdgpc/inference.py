"""Non-conjugate variational inference by mirror descent in conjugate form.

The variational posterior factorizes over classes, q(f) = prod_c N(m^c, Sigma^c),
with the GP prior N(0, K^c) per class. Writing the ELBO as a function of the
mean parameters mu and taking a mirror step with the negative-entropy mirror
map is equivalent to natural-gradient ascent on natural parameters (the
Bregman divergence of H is the KL within the family). Because the prior is
conjugate in natural form, the step reduces to an update of per-point
diagonal Gaussian sites:

    theta~_t = (1 - rho) theta~_{t-1} + rho * grad_mu E_q[log p(y | f)],
    theta_{t+1} = theta~_t + eta_prior,        theta~_0 = 0,

where the site naturals are alpha (linear) and beta (quadratic, beta <= 0).
The posterior for each class is recovered from the sites with one SPD solve:

    Sigma^c = (K^{c-1} - 2 diag(beta^c))^{-1},     m^c = Sigma^c alpha^c,

implemented in the Woodbury form Sigma = K - K W B^{-1} W K with
W = sqrt(-2 beta) and B = I + W K W, which never inverts K and yields the
prior exactly at zero sites.

A plain gradient-ascent baseline on (m, L) with Sigma = L L' (log-diagonal
storage for L) optimizes the same ELBO for the convergence comparisons, and
`ngd_verify` checks the mirror-descent direction against a finite-difference
natural gradient built from the Fisher matrix of the exponential family.
"""

import math
from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg

from . import expfam, likelihood
from .errors import (
    DegenerateInput,
    DimensionMismatch,
    IllConditionedFisher,
    NotOneHot,
    NotPositiveDefinite,
)
from .expfam import GaussianMoments, chol_solve, spd_cholesky
from .likelihood import McConfig, SoftmaxLikelihood
from .seeding import derive_seed

__all__ = [
    "SiteParams",
    "VariationalState",
    "GdState",
    "InnerConfig",
    "TraceRecord",
    "md_init",
    "md_step",
    "gd_init",
    "gd_step",
    "elbo",
    "run_inner",
    "ngd_verify",
    "k_eff",
    "site_factor",
    "posterior_from_sites",
    "marginal_mats",
]


@dataclass(frozen=True)
class SiteParams:
    """Per-class, per-point diagonal site naturals; rows are classes."""

    alpha: np.ndarray  # (C, N)
    beta: np.ndarray  # (C, N), <= 0

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=float)
        beta = np.asarray(self.beta, dtype=float)
        if alpha.shape != beta.shape or alpha.ndim != 2:
            raise DimensionMismatch(
                f"alpha shape {alpha.shape}, beta shape {beta.shape}"
            )
        if np.any(beta > 0.0):
            raise DegenerateInput("site beta must be <= 0")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)


@dataclass
class VariationalState:
    """Mirror-descent state: sites plus cached per-class moments."""

    sites: SiteParams
    moments: list  # list[GaussianMoments], one per class
    prior: list  # list[GramResult], one per class

    @property
    def n_classes(self) -> int:
        return len(self.prior)

    @property
    def n_points(self) -> int:
        return self.sites.alpha.shape[1]


@dataclass
class GdState:
    """Gradient-ascent state: per-class mean and Cholesky factor of Sigma."""

    m_list: list  # list of (N,) arrays
    chol_list: list  # list of (N, N) lower-triangular factors
    prior: list

    @property
    def moments(self) -> list:
        return [
            GaussianMoments(m, L @ L.T) for m, L in zip(self.m_list, self.chol_list)
        ]


@dataclass(frozen=True)
class InnerConfig:
    """Inner-loop settings; rho is the mirror rate or the GD step size."""

    rho: float = 1.0
    steps: int = 3
    mc: McConfig = McConfig()

    def __post_init__(self):
        if not (0.0 < self.rho <= 1.0):
            raise DegenerateInput(f"rho must be in (0, 1], got {self.rho}")
        if self.steps < 0:
            raise DegenerateInput(f"steps must be >= 0, got {self.steps}")


@dataclass(frozen=True)
class TraceRecord:
    method: str
    step: int
    elbo: float


def _validate_labels(Y: np.ndarray, n_points: int, n_classes: int) -> np.ndarray:
    Y = np.asarray(Y, dtype=float)
    if Y.shape != (n_points, n_classes):
        raise DimensionMismatch(
            f"labels shape {Y.shape}, expected {(n_points, n_classes)}"
        )
    if not np.all((Y == 0.0) | (Y == 1.0)) or not np.all(Y.sum(axis=1) == 1.0):
        raise NotOneHot("label rows must be one-hot")
    return Y


def k_eff(gram_res) -> np.ndarray:
    """Prior covariance actually used: K plus the jitter that made it SPD."""
    K = gram_res.K
    if gram_res.jitter_used:
        K = K + gram_res.jitter_used * np.eye(K.shape[0])
    return K


def site_factor(gram_res, beta_c: np.ndarray):
    """W = sqrt(-2 beta) and the Cholesky factor of B = I + W K W."""
    K = k_eff(gram_res)
    W = np.sqrt(-2.0 * np.minimum(beta_c, 0.0))
    B = np.eye(K.shape[0]) + (W[:, None] * K) * W[None, :]
    LB, _ = spd_cholesky(B)
    return W, LB, K


def posterior_from_sites(gram_res, alpha_c: np.ndarray, beta_c: np.ndarray):
    """(m, Sigma) = ((K^{-1} - 2 diag(beta))^{-1} alpha, same inverse).

    Woodbury form; exact prior at zero sites and SPD by construction.
    """
    W, LB, K = site_factor(gram_res, beta_c)
    KW = K * W[None, :]
    Sigma = K - KW @ expfam.chol_solve(LB, KW.T)
    Sigma = 0.5 * (Sigma + Sigma.T)
    m = Sigma @ alpha_c
    return GaussianMoments(m=m, Sigma=Sigma)


def marginal_mats(moments: list):
    """Per-point marginal means and variances stacked as (N, C) arrays."""
    m_mat = np.stack([mom.m for mom in moments], axis=1)
    v_mat = np.stack([np.diag(mom.Sigma) for mom in moments], axis=1)
    if np.any(v_mat <= 0.0):
        raise DegenerateInput("non-positive marginal variance in state")
    return m_mat, v_mat


def md_init(prior_grams: list) -> VariationalState:
    """Zero sites; the posterior starts at the prior."""
    if not prior_grams:
        raise DegenerateInput("need at least one class")
    n = prior_grams[0].K.shape[0]
    c = len(prior_grams)
    sites = SiteParams(alpha=np.zeros((c, n)), beta=np.zeros((c, n)))
    moments = [GaussianMoments(np.zeros(n), k_eff(g)) for g in prior_grams]
    return VariationalState(sites=sites, moments=moments, prior=list(prior_grams))


def _default_lik(state_n, state_c, mc: McConfig, step_index: int) -> SoftmaxLikelihood:
    step_mc = McConfig(samples=mc.samples, seed=derive_seed(mc.seed, step_index))
    return SoftmaxLikelihood.from_seed(step_mc, state_n, state_c)


def md_step(
    state: VariationalState, Y: np.ndarray, cfg: InnerConfig, lik=None, step_index: int = 0
) -> VariationalState:
    """One mirror-descent step in conjugate (site) form."""
    n, c = state.n_points, state.n_classes
    Y = _validate_labels(Y, n, c)
    if lik is None:
        lik = _default_lik(n, c, cfg.mc, step_index)
    m_mat, v_mat = marginal_mats(state.moments)
    g_m, g_v = lik.grads_mv(m_mat, v_mat, Y)
    d1 = (g_m - 2.0 * g_v * m_mat).T  # (C, N) mean-parameter gradients
    d2 = g_v.T
    rho = cfg.rho
    alpha = (1.0 - rho) * state.sites.alpha + rho * d1
    beta = np.minimum((1.0 - rho) * state.sites.beta + rho * d2, 0.0)
    sites = SiteParams(alpha=alpha, beta=beta)
    moments = [
        posterior_from_sites(g, alpha[i], beta[i]) for i, g in enumerate(state.prior)
    ]
    return VariationalState(sites=sites, moments=moments, prior=state.prior)


def refresh_moments(state: VariationalState) -> VariationalState:
    """Recompute cached moments from the naturals by direct dense solves.

    Independent algebra from the Woodbury path in md_step; used to check
    that the iterate sequence does not depend on the cache.
    """
    moments = []
    for i, g in enumerate(state.prior):
        K = k_eff(g)
        prec = chol_solve(spd_cholesky(K)[0], np.eye(K.shape[0]))
        prec = prec - 2.0 * np.diag(state.sites.beta[i])
        Lp, _ = spd_cholesky(0.5 * (prec + prec.T))
        Sigma = chol_solve(Lp, np.eye(K.shape[0]))
        moments.append(
            GaussianMoments(chol_solve(Lp, state.sites.alpha[i]), 0.5 * (Sigma + Sigma.T))
        )
    return VariationalState(sites=state.sites, moments=moments, prior=state.prior)


def gd_init(prior_grams: list) -> GdState:
    """Start at the prior: m = 0, L = chol(K)."""
    m_list, chol_list = [], []
    for g in prior_grams:
        L, _ = spd_cholesky(k_eff(g))
        m_list.append(np.zeros(L.shape[0]))
        chol_list.append(L)
    return GdState(m_list=m_list, chol_list=chol_list, prior=list(prior_grams))


def gd_step(
    state: GdState, Y: np.ndarray, cfg: InnerConfig, lik=None, step_index: int = 0
) -> GdState:
    """One gradient-ascent step on the ELBO in (m, L) with Sigma = L L'.

    Off-diagonal entries of L are stored directly, diagonal entries as logs,
    so the ascent update is taken in those coordinates:

        dELBO/dm = g_m - K^{-1} m
        dELBO/dSigma = diag(g_v) - 1/2 (K^{-1} - Sigma^{-1})
        dELBO/dL = 2 sym(dELBO/dSigma) L  (lower triangle)
    """
    n, c = state.m_list[0].shape[0], len(state.prior)
    Y = _validate_labels(Y, n, c)
    if lik is None:
        lik = _default_lik(n, c, cfg.mc, step_index)
    moments = state.moments
    m_mat, v_mat = marginal_mats(moments)
    g_m, g_v = lik.grads_mv(m_mat, v_mat, Y)
    lr = cfg.rho
    eye = np.eye(n)
    new_m, new_chol = [], []
    for i, g in enumerate(state.prior):
        Kchol, _ = spd_cholesky(k_eff(g))
        m, L = state.m_list[i], state.chol_list[i]
        grad_m = g_m[:, i] - chol_solve(Kchol, m)
        Kinv = chol_solve(Kchol, eye)
        Sinv = scipy.linalg.cho_solve((L, True), eye)
        GSig = np.diag(g_v[:, i]) - 0.5 * (Kinv - Sinv)
        GSig = 0.5 * (GSig + GSig.T)
        GL = np.tril(2.0 * GSig @ L)
        # ascent in (off-diagonal L, log-diagonal L, m)
        diag = np.diag(L) * np.exp(lr * np.diag(GL) * np.diag(L))
        Lnew = L + lr * np.tril(GL, -1)
        np.fill_diagonal(Lnew, diag)
        new_m.append(m + lr * grad_m)
        new_chol.append(Lnew)
    return GdState(m_list=new_m, chol_list=new_chol, prior=state.prior)


def elbo(state, Y: np.ndarray, mc: McConfig, lik=None) -> float:
    """ELBO estimate: sum_n E_q[log p(y_n | f_n)] - sum_c KL(q^c || prior^c)."""
    moments = state.moments
    n, c = moments[0].dim, len(moments)
    Y = _validate_labels(Y, n, c)
    if lik is None:
        lik = SoftmaxLikelihood.from_seed(mc, n, c)
    m_mat, v_mat = marginal_mats(moments)
    total = lik.expected_loglik(m_mat, v_mat, Y)
    for mom, g in zip(moments, state.prior):
        total -= expfam.gaussian_kl(mom, GaussianMoments(np.zeros(n), k_eff(g)))
    return float(total)


def run_inner(method: str, prior_grams: list, Y: np.ndarray, cfg: InnerConfig):
    """Run `steps` inner updates, recording the ELBO after each.

    The trace is evaluated with one fixed draw set (seed cfg.mc.seed) so
    successive records are comparable; gradient draws are fresh per step.
    Returns (final_state, [TraceRecord]) with steps + 1 records.
    """
    method = method.upper()
    if method not in ("MD", "GD"):
        raise DegenerateInput(f"unknown inner method {method!r}")
    state = md_init(prior_grams) if method == "MD" else gd_init(prior_grams)
    n, c = prior_grams[0].K.shape[0], len(prior_grams)
    eval_lik = SoftmaxLikelihood.from_seed(cfg.mc, n, c)
    trace = [TraceRecord(method, 0, elbo(state, Y, cfg.mc, lik=eval_lik))]
    step_fn = md_step if method == "MD" else gd_step
    for t in range(1, cfg.steps + 1):
        state = step_fn(state, Y, cfg, step_index=t)
        trace.append(TraceRecord(method, t, elbo(state, Y, cfg.mc, lik=eval_lik)))
    return state, trace


# ---------------------------------------------------------------------------
# mirror-descent / natural-gradient equivalence check
# ---------------------------------------------------------------------------


def _state_coords(state: VariationalState) -> np.ndarray:
    """Natural coordinates of the full per-class posterior, concatenated."""
    parts = []
    for i, g in enumerate(state.prior):
        K = k_eff(g)
        Kinv = chol_solve(spd_cholesky(K)[0], np.eye(K.shape[0]))
        Kinv = 0.5 * (Kinv + Kinv.T)
        nat = expfam.GaussianNatural(
            theta1=state.sites.alpha[i],
            Theta2=-0.5 * Kinv + np.diag(state.sites.beta[i]),
        )
        parts.append(expfam.natural_to_coords(nat))
    return np.concatenate(parts)


def _md_direction(state, Y, cfg, lik, rho: float) -> np.ndarray:
    stepped = md_step(state, Y, replace(cfg, rho=rho), lik=lik)
    return (_state_coords(stepped) - _state_coords(state)) / rho


def _objective_at(coords, state, Y, lik, n, c):
    moments = []
    for i in range(c):
        p = expfam.sym_coord_count(n)
        nat = expfam.coords_to_natural(coords[i * p : (i + 1) * p], n)
        moments.append(expfam.natural_to_moments(nat))
    m_mat, v_mat = marginal_mats(moments)
    total = lik.expected_loglik(m_mat, v_mat, Y)
    for mom, g in zip(moments, state.prior):
        total -= expfam.gaussian_kl(mom, GaussianMoments(np.zeros(n), k_eff(g)))
    return float(total)


def ngd_verify(
    prior_grams: list,
    Y: np.ndarray,
    cfg: InnerConfig,
    lik=None,
    warmup_steps: int = 2,
    fd_step: float = 1e-4,
    gh_nodes: int = 40,
) -> dict:
    """Check that the mirror step equals the natural-gradient step.

    Computes (a) the mirror-descent direction (theta_{t+1} - theta_t) / rho
    in minimal natural coordinates and (b) [grad^2 A]^{-1} grad_theta ELBO
    with the gradient by central finite differences of the ELBO and the
    Fisher by central finite differences of the map theta -> mu, then
    reports the maximum componentwise deviation relative to the direction
    scale. Both sides evaluate the same expected-log-likelihood functional
    on a common deterministic node set (Gauss-Hermite; binary case), so the
    deviation reflects finite-difference error only.

    Intended for tiny instances (N <= 3 per class, C = 2).
    """
    n, c = prior_grams[0].K.shape[0], len(prior_grams)
    Y = _validate_labels(Y, n, c)
    if lik is None:
        if c != 2:
            raise DegenerateInput("default node set covers the binary case only")
        eps, w = likelihood.gauss_hermite_draws(gh_nodes, c)
        lik = SoftmaxLikelihood(eps, w)

    state = md_init(prior_grams)
    for t in range(warmup_steps):
        state = md_step(state, Y, replace(cfg, rho=0.5), lik=lik)

    md_dir = _md_direction(state, Y, cfg, lik, rho=1.0)
    md_dir_small = _md_direction(state, Y, cfg, lik, rho=0.1)
    scale = max(np.max(np.abs(md_dir)), 1e-12)
    rho_deviation = float(np.max(np.abs(md_dir - md_dir_small)) / scale)

    coords0 = _state_coords(state)
    p = expfam.sym_coord_count(n)

    def fd_grad(fun, x0, dim):
        g = np.zeros(dim)
        for k in range(dim):
            h = fd_step * max(1.0, abs(x0[k]))
            xp, xm = x0.copy(), x0.copy()
            xp[k] += h
            xm[k] -= h
            g[k] = (fun(xp) - fun(xm)) / (2.0 * h)
        return g

    grad_theta = fd_grad(
        lambda x: _objective_at(x, state, Y, lik, n, c), coords0, c * p
    )

    ngd_dir = np.zeros_like(grad_theta)
    for i in range(c):
        block = slice(i * p, (i + 1) * p)
        t0 = coords0[block]

        def dual_of(t):
            mom = expfam.natural_to_moments(expfam.coords_to_natural(t, n))
            return expfam.mean_to_dual_coords(expfam.moments_to_mean(mom))

        fisher = np.zeros((p, p))
        for k in range(p):
            h = fd_step * max(1.0, abs(t0[k]))
            tp, tm = t0.copy(), t0.copy()
            tp[k] += h
            tm[k] -= h
            fisher[:, k] = (dual_of(tp) - dual_of(tm)) / (2.0 * h)
        fisher = 0.5 * (fisher + fisher.T)
        try:
            Lf, _ = spd_cholesky(fisher)
        except NotPositiveDefinite as exc:
            raise IllConditionedFisher(
                f"finite-difference Fisher for class {i} not factorizable"
            ) from exc
        cond = (np.max(np.diag(Lf)) / max(np.min(np.diag(Lf)), 1e-300)) ** 2
        if not math.isfinite(cond) or cond > 1e14:
            raise IllConditionedFisher(
                f"finite-difference Fisher for class {i} too ill-conditioned"
            )
        ngd_dir[block] = chol_solve(Lf, grad_theta[block])

    denom = max(np.max(np.abs(md_dir)), np.max(np.abs(ngd_dir)), 1e-12)
    deviation = float(np.max(np.abs(md_dir - ngd_dir)) / denom)
    return {
        "deviation": deviation,
        "rho_deviation": rho_deviation,
        "md_direction": md_dir,
        "ngd_direction": ngd_dir,
        "n_coords": int(c * p),
        "state": state,
    }
