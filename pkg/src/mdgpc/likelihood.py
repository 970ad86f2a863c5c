"""Softmax likelihood expectations under factorized Gaussian marginals.

For a point with per-class marginals f_c ~ N(m_c, v_c) (independent across
classes) and one-hot label y, the expected log-likelihood

    E_q[ log p(y | f) ] = E_q[ y . f - logsumexp(f) ]

has no closed form; it is estimated by Monte Carlo with the
reparameterization f^(s) = m + sqrt(v) * eps^(s). The gradients with respect
to the marginal mean and variance use the Gaussian expectation identities

    g_m = E[ y - softmax(f) ],
    g_v = 1/2 E[ softmax(f)^2 - softmax(f) ]   (elementwise),

i.e. first and (diagonal) second derivatives of the integrand, so
g_m in [-1, 1] and g_v in [-1/8, 0] always. The chain rule to per-point
mean parameters (mu1, mu2) = (m, v + m^2) gives

    d_mu1 = g_m - 2 g_v * m,      d_mu2 = g_v.

Estimators accept explicit draws ``eps`` and optional ``weights`` so tests
and the equivalence verifier can substitute deterministic weighted node
sets (Gauss-Hermite, binary case) for seeded Monte Carlo draws; both then
evaluate the same functional on common numbers.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInput, DimensionMismatch, NotOneHot

__all__ = [
    "McConfig",
    "log_softmax_lik",
    "mc_expected_loglik",
    "grad_mv",
    "grad_mean_params",
    "batch_expected_loglik",
    "batch_grads_mv",
    "normal_draws",
    "gauss_hermite_draws",
    "SoftmaxLikelihood",
    "GaussianSiteLikelihood",
    "check_one_hot",
]


@dataclass(frozen=True)
class McConfig:
    """Monte Carlo settings: S draws from a seeded generator."""

    samples: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.samples < 1:
            raise DegenerateInput(f"samples must be >= 1, got {self.samples}")


def check_one_hot(y: np.ndarray) -> np.ndarray:
    """Validate a one-hot label vector (entries in {0,1}, exactly one 1)."""
    y = np.asarray(y, dtype=float)
    if y.ndim != 1:
        raise NotOneHot(f"label must be a vector, got shape {y.shape}")
    if not np.all((y == 0.0) | (y == 1.0)) or int(np.sum(y)) != 1:
        raise NotOneHot(f"not a one-hot vector: {y!r}")
    return y


def _log_softmax(f: np.ndarray) -> np.ndarray:
    fmax = np.max(f, axis=-1, keepdims=True)
    stable = f - fmax
    return stable - np.log(np.sum(np.exp(stable), axis=-1, keepdims=True))


def log_softmax_lik(y: np.ndarray, f: np.ndarray) -> float:
    """log p(y | f) = y . f - logsumexp(f) for a one-hot y."""
    y = check_one_hot(y)
    f = np.asarray(f, dtype=float)
    if f.shape != y.shape:
        raise DimensionMismatch(f"f shape {f.shape} != y shape {y.shape}")
    return float(np.sum(y * _log_softmax(f)))


def normal_draws(seed: int, shape: tuple) -> np.ndarray:
    """Standard normal draws from a fresh seeded generator."""
    return np.random.default_rng(seed).standard_normal(shape)


def gauss_hermite_draws(n_nodes: int, n_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Tensor-product Gauss-Hermite node set for E[g(eps)], eps ~ N(0, I_C).

    Returns (eps, weights) with eps of shape (n_nodes**C, C) and weights
    summing to 1. Intended as the deterministic common-draws oracle for the
    binary case; the node count grows as n_nodes**C.
    """
    x, w = np.polynomial.hermite_e.hermegauss(n_nodes)
    w = w / np.sqrt(2.0 * np.pi)
    grids = np.meshgrid(*([x] * n_classes), indexing="ij")
    eps = np.stack([g.reshape(-1) for g in grids], axis=-1)
    wgrids = np.meshgrid(*([w] * n_classes), indexing="ij")
    weights = np.ones(eps.shape[0])
    for g in wgrids:
        weights = weights * g.reshape(-1)
    return eps, weights


def _prepare_batch(m, v, eps):
    m = np.asarray(m, dtype=float)
    v = np.asarray(v, dtype=float)
    if m.shape != v.shape or m.ndim != 2:
        raise DimensionMismatch(
            f"marginals must be (N, C) arrays, got {m.shape} and {v.shape}"
        )
    if np.any(v < 0.0):
        raise DegenerateInput("negative marginal variance")
    eps = np.asarray(eps, dtype=float)
    if eps.ndim == 2:  # shared node set (S, C) broadcast over points
        eps = eps[:, None, :]
    if eps.ndim != 3 or eps.shape[2] != m.shape[1]:
        raise DimensionMismatch(f"draws shape {eps.shape} incompatible with {m.shape}")
    return m, v, eps


def batch_expected_loglik(m, v, Y, eps, weights=None) -> float:
    """Sum over points of the estimated E[log p(y_n | f_n)].

    m, v, Y: (N, C); eps: (S, N, C) or (S, C); weights: (S,) or None
    (uniform). With weights, the estimate is sum_s w_s log p(y | f^(s)).
    """
    m, v, eps = _prepare_batch(m, v, eps)
    f = m[None, :, :] + np.sqrt(v)[None, :, :] * eps
    ll = np.sum(np.asarray(Y, dtype=float)[None, :, :] * _log_softmax(f), axis=2)
    if weights is None:
        return float(np.sum(np.mean(ll, axis=0)))
    return float(np.sum(np.asarray(weights, dtype=float) @ ll))


def batch_grads_mv(m, v, Y, eps, weights=None):
    """Estimated (g_m, g_v) for every point at once; each of shape (N, C)."""
    m, v, eps = _prepare_batch(m, v, eps)
    f = m[None, :, :] + np.sqrt(v)[None, :, :] * eps
    p = np.exp(_log_softmax(f))
    Y = np.asarray(Y, dtype=float)
    if weights is None:
        g_m = Y - np.mean(p, axis=0)
        g_v = 0.5 * np.mean(p * p - p, axis=0)
    else:
        w = np.asarray(weights, dtype=float)
        g_m = Y - np.einsum("s,snc->nc", w, p)
        g_v = 0.5 * np.einsum("s,snc->nc", w, p * p - p)
    return g_m, g_v


def _point_eps(pm_mean, mc: McConfig, eps):
    if eps is None:
        eps = normal_draws(mc.seed, (mc.samples, pm_mean.shape[0]))
    return eps


def mc_expected_loglik(pm, y: np.ndarray, mc: McConfig, eps=None, weights=None) -> float:
    """Estimated E[log p(y | f)] for a single point marginal.

    pm carries per-class mean and variance vectors (see
    :class:`~mdgpc.expfam.PointMeanParams`); draws come from mc.seed unless
    an explicit (S, C) node set eps (with optional weights) is given.
    """
    y = check_one_hot(y)
    eps = _point_eps(pm.mean, mc, eps)
    return batch_expected_loglik(
        pm.mean[None, :], pm.variance[None, :], y[None, :], eps[:, None, :], weights
    )


def grad_mv(pm, y: np.ndarray, mc: McConfig, eps=None, weights=None):
    """Estimated (g_m, g_v) for a single point, common draws with
    :func:`mc_expected_loglik` when given the same eps or mc."""
    y = check_one_hot(y)
    eps = _point_eps(pm.mean, mc, eps)
    g_m, g_v = batch_grads_mv(
        pm.mean[None, :], pm.variance[None, :], y[None, :], eps[:, None, :], weights
    )
    return g_m[0], g_v[0]


def grad_mean_params(pm, y: np.ndarray, mc: McConfig, eps=None, weights=None):
    """Gradients w.r.t. per-point mean parameters (mu1, mu2).

    d_mu1 = g_m - 2 g_v * m and d_mu2 = g_v; the inverse chain rule of
    (m, v) -> (mu1, mu2) = (m, v + m^2).
    """
    g_m, g_v = grad_mv(pm, y, mc, eps=eps, weights=weights)
    return g_m - 2.0 * g_v * pm.mean, g_v


class SoftmaxLikelihood:
    """Softmax expected log-likelihood bound to a fixed draw set.

    Bundling the draws makes the object a deterministic functional of the
    marginals, which is what both the inner-loop steps and the
    finite-difference checks evaluate.
    """

    def __init__(self, eps: np.ndarray, weights=None):
        self.eps = np.asarray(eps, dtype=float)
        self.weights = None if weights is None else np.asarray(weights, dtype=float)

    @classmethod
    def from_seed(cls, mc: McConfig, n_points: int, n_classes: int):
        return cls(normal_draws(mc.seed, (mc.samples, n_points, n_classes)))

    def expected_loglik(self, m, v, Y) -> float:
        return batch_expected_loglik(m, v, Y, self.eps, self.weights)

    def grads_mv(self, m, v, Y):
        return batch_grads_mv(m, v, Y, self.eps, self.weights)


class GaussianSiteLikelihood:
    """Synthetic log-likelihood sum_n (a_n . f_n + b_n . f_n^2), b <= 0.

    Its mean-parameter gradients are the constants (a, b), so a single
    mirror step with rho = 1 must land exactly on the conjugate posterior
    with site naturals (a, b). Used by the verification suite.
    """

    def __init__(self, a: np.ndarray, b: np.ndarray):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        if a.shape != b.shape or a.ndim != 2:
            raise DimensionMismatch("a, b must both be (N, C)")
        if np.any(b > 0.0):
            raise DegenerateInput("quadratic site coefficients must be <= 0")
        self.a = a
        self.b = b

    def expected_loglik(self, m, v, Y) -> float:
        # E[a f + b f^2] = a mu1 + b mu2 with mu2 = v + m^2
        return float(np.sum(self.a * m + self.b * (v + m * m)))

    def grads_mv(self, m, v, Y):
        return self.a + 2.0 * self.b * m, np.broadcast_to(self.b, np.shape(m)).copy()
