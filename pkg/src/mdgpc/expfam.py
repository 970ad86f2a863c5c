"""Gaussian exponential-family parameterizations and Bregman geometry.

A multivariate Gaussian over f in R^N is written in exponential form

    q(f) = exp( theta1 . f + f' Theta2 f - A(theta) ),

with natural parameters

    theta1 = Sigma^{-1} m,        Theta2 = -1/2 Sigma^{-1},

mean parameters

    mu1 = E[f] = m,               Mu2 = E[f f'] = Sigma + m m',

log-partition function

    A(theta) = 1/2 m' Sigma^{-1} m + 1/2 log|Sigma| + N/2 log(2 pi),

and negative entropy (the convex conjugate of A up to the pairing)

    H(mu) = -N/2 log(2 pi e) - 1/2 log|Sigma|.

The constant in H is kept so the Fenchel identity A(theta) + H(mu) =
<theta, mu> holds exactly, with the pairing

    <theta, mu> = theta1 . mu1 + tr(Theta2 Mu2).

The Bregman divergence of H equals the Kullback-Leibler divergence between
the corresponding members of the family,

    B_H(mu, mu') = H(mu) - H(mu') - <grad H(mu'), mu - mu'> = KL(q_mu || q_mu'),

which is the identity that lets mirror descent on mean parameters act as
natural-gradient descent on natural parameters.

All SPD factorizations in the package go through :func:`spd_cholesky`, which
escalates a diagonal jitter from 1e-8 by doubling up to 1e-2 before raising
:class:`~mdgpc.errors.NotPositiveDefinite`.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DimensionMismatch, NotPositiveDefinite

JITTER_INITIAL = 1e-8
JITTER_MAX = 1e-2

_SYMMETRY_TOL = 1e-10


def spd_cholesky(a: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of an SPD matrix with a jitter ladder.

    Tries ``a`` as given first (jitter 0), then adds ``eps * I`` with eps
    doubling from 1e-8 to 1e-2. Returns ``(L, jitter_used)`` where
    ``L @ L.T = a + jitter_used * I``.

    Raises
    ------
    NotPositiveDefinite
        If no jitter in the ladder yields a successful factorization.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"expected square matrix, got shape {a.shape}")
    jitter = 0.0
    while True:
        try:
            target = a if jitter == 0.0 else a + jitter * np.eye(a.shape[0])
            return scipy.linalg.cholesky(target, lower=True), jitter
        except scipy.linalg.LinAlgError:
            jitter = JITTER_INITIAL if jitter == 0.0 else 2.0 * jitter
            if jitter > JITTER_MAX:
                raise NotPositiveDefinite(
                    f"matrix of shape {a.shape} not positive definite "
                    f"(jitter ladder exhausted at {JITTER_MAX:g})",
                    jitter_tried=JITTER_MAX,
                ) from None


def chol_logdet(chol_lower: np.ndarray) -> float:
    """log-determinant of A from its lower Cholesky factor."""
    return float(2.0 * np.sum(np.log(np.diag(chol_lower))))


def chol_solve(chol_lower: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve A x = b given the lower Cholesky factor of A."""
    return scipy.linalg.cho_solve((chol_lower, True), b)


def _check_symmetric(a: np.ndarray, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"{name} must be square, got shape {a.shape}")
    dev = float(np.max(np.abs(a - a.T))) if a.size else 0.0
    if dev > _SYMMETRY_TOL * max(1.0, float(np.max(np.abs(a))) if a.size else 1.0):
        raise DimensionMismatch(f"{name} not symmetric (max asymmetry {dev:.3e})")
    return 0.5 * (a + a.T)


@dataclass(frozen=True)
class GaussianMoments:
    """Moment parameterization (m, Sigma) of a Gaussian over R^N."""

    m: np.ndarray
    Sigma: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=float).reshape(-1)
        Sigma = _check_symmetric(self.Sigma, "Sigma")
        if Sigma.shape[0] != m.shape[0]:
            raise DimensionMismatch(
                f"m has length {m.shape[0]} but Sigma is {Sigma.shape}"
            )
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "Sigma", Sigma)

    @property
    def dim(self) -> int:
        return self.m.shape[0]


@dataclass(frozen=True)
class GaussianNatural:
    """Natural parameterization (theta1, Theta2), Theta2 = -1/2 Sigma^{-1}."""

    theta1: np.ndarray
    Theta2: np.ndarray

    def __post_init__(self):
        theta1 = np.asarray(self.theta1, dtype=float).reshape(-1)
        Theta2 = _check_symmetric(self.Theta2, "Theta2")
        if Theta2.shape[0] != theta1.shape[0]:
            raise DimensionMismatch(
                f"theta1 has length {theta1.shape[0]} but Theta2 is {Theta2.shape}"
            )
        object.__setattr__(self, "theta1", theta1)
        object.__setattr__(self, "Theta2", Theta2)

    @property
    def dim(self) -> int:
        return self.theta1.shape[0]


@dataclass(frozen=True)
class FullMeanParams:
    """Mean parameterization (mu1, Mu2) with Mu2 = Sigma + m m'."""

    mu1: np.ndarray
    Mu2: np.ndarray

    def __post_init__(self):
        mu1 = np.asarray(self.mu1, dtype=float).reshape(-1)
        Mu2 = _check_symmetric(self.Mu2, "Mu2")
        if Mu2.shape[0] != mu1.shape[0]:
            raise DimensionMismatch(
                f"mu1 has length {mu1.shape[0]} but Mu2 is {Mu2.shape}"
            )
        object.__setattr__(self, "mu1", mu1)
        object.__setattr__(self, "Mu2", Mu2)

    @property
    def dim(self) -> int:
        return self.mu1.shape[0]


@dataclass(frozen=True)
class PointMeanParams:
    """Per-point diagonal mean parameters mu1 = m_n, mu2 = v_n + m_n^2.

    Holds elementwise arrays; entries are independent scalar-Gaussian
    mean parameters, one per (point, class) pair.
    """

    mu1: np.ndarray
    mu2: np.ndarray

    def __post_init__(self):
        mu1 = np.asarray(self.mu1, dtype=float)
        mu2 = np.asarray(self.mu2, dtype=float)
        if mu1.shape != mu2.shape:
            raise DimensionMismatch(
                f"mu1 shape {mu1.shape} != mu2 shape {mu2.shape}"
            )
        object.__setattr__(self, "mu1", mu1)
        object.__setattr__(self, "mu2", mu2)

    @property
    def mean(self) -> np.ndarray:
        return self.mu1

    @property
    def variance(self) -> np.ndarray:
        return self.mu2 - self.mu1**2


def moments_to_natural(mom: GaussianMoments) -> GaussianNatural:
    """(m, Sigma) -> (Sigma^{-1} m, -1/2 Sigma^{-1})."""
    L, _ = spd_cholesky(mom.Sigma)
    prec = chol_solve(L, np.eye(mom.dim))
    prec = 0.5 * (prec + prec.T)
    return GaussianNatural(theta1=prec @ mom.m, Theta2=-0.5 * prec)


def natural_to_moments(nat: GaussianNatural) -> GaussianMoments:
    """(theta1, Theta2) -> (m, Sigma) with Sigma = (-2 Theta2)^{-1}."""
    prec = -2.0 * nat.Theta2
    L, _ = spd_cholesky(prec)
    Sigma = chol_solve(L, np.eye(nat.dim))
    Sigma = 0.5 * (Sigma + Sigma.T)
    m = chol_solve(L, nat.theta1)
    return GaussianMoments(m=m, Sigma=Sigma)


def moments_to_mean(mom: GaussianMoments) -> FullMeanParams:
    """(m, Sigma) -> (m, Sigma + m m')."""
    return FullMeanParams(mu1=mom.m, Mu2=mom.Sigma + np.outer(mom.m, mom.m))


def mean_to_moments(mu: FullMeanParams) -> GaussianMoments:
    """(mu1, Mu2) -> (mu1, Mu2 - mu1 mu1')."""
    return GaussianMoments(m=mu.mu1, Sigma=mu.Mu2 - np.outer(mu.mu1, mu.mu1))


def log_partition(nat: GaussianNatural) -> float:
    """A(theta) = 1/2 m' Sigma^{-1} m + 1/2 log|Sigma| + N/2 log(2 pi)."""
    prec = -2.0 * nat.Theta2
    L, _ = spd_cholesky(prec)
    # m' Sigma^{-1} m = theta1' Sigma theta1, with Sigma = prec^{-1}
    half_quad = 0.5 * float(nat.theta1 @ chol_solve(L, nat.theta1))
    # log|Sigma| = -log|prec|
    return half_quad - 0.5 * chol_logdet(L) + 0.5 * nat.dim * np.log(2.0 * np.pi)


def neg_entropy(mu: FullMeanParams) -> float:
    """H(mu) = -N/2 log(2 pi e) - 1/2 log|Sigma| at Sigma = Mu2 - mu1 mu1'."""
    Sigma = mu.Mu2 - np.outer(mu.mu1, mu.mu1)
    L, _ = spd_cholesky(Sigma)
    n = mu.dim
    return -0.5 * n * np.log(2.0 * np.pi * np.e) - 0.5 * chol_logdet(L)


def pairing(nat: GaussianNatural, mu: FullMeanParams) -> float:
    """<theta, mu> = theta1 . mu1 + tr(Theta2 Mu2)."""
    return float(nat.theta1 @ mu.mu1 + np.sum(nat.Theta2 * mu.Mu2))


def bregman_h(mu: FullMeanParams, mu_prime: FullMeanParams) -> float:
    """Bregman divergence of H: B_H(mu, mu') = KL(q_mu || q_mu').

    Computed from the defining expansion H(mu) - H(mu') - <theta', mu - mu'>,
    using grad H(mu') = theta'.
    """
    nat_prime = moments_to_natural(mean_to_moments(mu_prime))
    return (
        neg_entropy(mu)
        - neg_entropy(mu_prime)
        - pairing(nat_prime, FullMeanParams(mu.mu1 - mu_prime.mu1, mu.Mu2 - mu_prime.Mu2))
    )


def gaussian_kl(q: GaussianMoments, p: GaussianMoments) -> float:
    """KL( N(m_q, S_q) || N(m_p, S_p) ) via Cholesky factors of S_p, S_q."""
    if q.dim != p.dim:
        raise DimensionMismatch(f"dimension mismatch {q.dim} vs {p.dim}")
    n = q.dim
    Lp, _ = spd_cholesky(p.Sigma)
    Lq, _ = spd_cholesky(q.Sigma)
    diff = q.m - p.m
    sol = scipy.linalg.solve_triangular(Lp, diff, lower=True)
    # tr(S_p^{-1} S_q) = || L_p^{-1} L_q ||_F^2
    w = scipy.linalg.solve_triangular(Lp, Lq, lower=True)
    trace_term = float(np.sum(w * w))
    return 0.5 * (
        trace_term + float(sol @ sol) - n + chol_logdet(Lp) - chol_logdet(Lq)
    )


# ---------------------------------------------------------------------------
# Minimal coordinates on the symmetric family.
#
# Theta2 is symmetric, so a minimal coordinate system uses the basis
# {e_i e_i'} for the diagonal and {e_i e_j' + e_j e_i', i < j} for the
# off-diagonal. Natural coordinates t are the matrix entries on and above
# the diagonal; the dual mean coordinates s satisfy <theta, mu> = t . s,
# which doubles off-diagonal entries of Mu2. These coordinates are what the
# finite-difference Fisher in the NGD equivalence check is built on.
# ---------------------------------------------------------------------------


def sym_coord_count(n: int) -> int:
    """Number of minimal coordinates for dimension n: n + n(n+1)/2."""
    return n + (n * (n + 1)) // 2


def _triu_indices(n: int):
    return np.triu_indices(n)


def natural_to_coords(nat: GaussianNatural) -> np.ndarray:
    """Stack (theta1, upper-triangle of Theta2) into a coordinate vector."""
    iu = _triu_indices(nat.dim)
    return np.concatenate([nat.theta1, nat.Theta2[iu]])


def coords_to_natural(t: np.ndarray, n: int) -> GaussianNatural:
    """Inverse of :func:`natural_to_coords` for dimension n."""
    t = np.asarray(t, dtype=float)
    if t.shape[0] != sym_coord_count(n):
        raise DimensionMismatch(
            f"expected {sym_coord_count(n)} coordinates for n={n}, got {t.shape[0]}"
        )
    theta1 = t[:n]
    Theta2 = np.zeros((n, n))
    iu = _triu_indices(n)
    Theta2[iu] = t[n:]
    Theta2 = Theta2 + np.triu(Theta2, 1).T
    return GaussianNatural(theta1=theta1, Theta2=Theta2)


def mean_to_dual_coords(mu: FullMeanParams) -> np.ndarray:
    """Dual coordinates s with <theta, mu> = t . s (off-diagonals doubled)."""
    n = mu.dim
    scaled = 2.0 * mu.Mu2 - np.diag(np.diag(mu.Mu2))
    iu = _triu_indices(n)
    return np.concatenate([mu.mu1, scaled[iu]])
