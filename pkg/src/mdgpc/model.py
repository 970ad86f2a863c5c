"""Episode-level model: fit the variational posterior, predict query labels.

Fitting runs the inner loop on the support set of an episode with per-class
Gram matrices from the deep kernel. Prediction uses the standard sparse-site
form of the GP posterior at a query point x*:

    mu*^c   = k*' K^{-1} m^c
    sig*^2c = k** - k*' K^{-1} k* + k*' K^{-1} Sigma^c K^{-1} k*
            = k** - (W k*)' B^{-1} (W k*)

with W = sqrt(-2 beta), B = I + W K W, so zero sites give back the prior
predictive exactly. Class label probabilities are Monte Carlo averages of
the softmax over independent per-class predictive normals.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import inference, kernels
from .errors import DimensionMismatch
from .inference import GdState, InnerConfig, VariationalState
from .likelihood import McConfig, normal_draws

__all__ = ["FittedEpisode", "PredictiveDist", "fit_episode", "predict_latent", "predict_labels"]


@dataclass
class FittedEpisode:
    """Result of inner-loop fitting on one episode's support set."""

    kernel: kernels.DeepKernel
    state: object  # VariationalState or GdState
    grams: list  # per-class GramResult on support features
    features: np.ndarray  # support features Z
    cache: kernels.ForwardCache
    support_y: np.ndarray
    trace: list


@dataclass(frozen=True)
class PredictiveDist:
    """Per-query latent means/variances and softmax class probabilities."""

    mu: np.ndarray  # (M, C)
    var: np.ndarray  # (M, C)
    probs: np.ndarray  # (M, C), rows sum to 1

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.probs, axis=1)  # ties resolve to lowest index


def fit_episode(
    kernel: kernels.DeepKernel,
    support_x: np.ndarray,
    support_y: np.ndarray,
    cfg: InnerConfig,
    method: str = "MD",
    record_trace: bool = True,
) -> FittedEpisode:
    """Extract features, build per-class Grams, run the inner loop."""
    support_y = np.asarray(support_y, dtype=float)
    if support_y.ndim != 2 or support_y.shape[1] != kernel.n_classes:
        raise DimensionMismatch(
            f"support labels shape {support_y.shape} does not match "
            f"{kernel.n_classes} kernel classes"
        )
    Z, cache = kernels.extract(kernel.extractor, support_x)
    grams = [kernels.gram(base, Z) for base in kernel.base]
    if record_trace:
        state, trace = inference.run_inner(method, grams, support_y, cfg)
    else:
        trace = []
        if method.upper() == "MD":
            state = inference.md_init(grams)
            for t in range(1, cfg.steps + 1):
                state = inference.md_step(state, support_y, cfg, step_index=t)
        else:
            state = inference.gd_init(grams)
            for t in range(1, cfg.steps + 1):
                state = inference.gd_step(state, support_y, cfg, step_index=t)
    return FittedEpisode(
        kernel=kernel,
        state=state,
        grams=grams,
        features=Z,
        cache=cache,
        support_y=support_y,
        trace=trace,
    )


def predict_latent(fit: FittedEpisode, query_x: np.ndarray):
    """Latent predictive (mu*, var*) per query row and class, both (M, C)."""
    Zq, _ = kernels.extract(fit.kernel.extractor, query_x)
    n_classes = fit.kernel.n_classes
    mu = np.empty((Zq.shape[0], n_classes))
    var = np.empty((Zq.shape[0], n_classes))
    for c in range(n_classes):
        base, g = fit.kernel.base[c], fit.grams[c]
        kx = kernels.cross_gram(base, Zq, fit.features, center=g.center)
        kdiag = kernels.gram_diag(base, Zq, center=g.center)
        if isinstance(fit.state, VariationalState):
            alpha = fit.state.sites.alpha[c]
            beta = fit.state.sites.beta[c]
            W, LB, K = inference.site_factor(g, beta)
            # u = K^{-1} m = alpha - W B^{-1} W (K alpha)
            u = alpha - W * scipy.linalg.cho_solve((LB, True), W * (K @ alpha))
            mu[:, c] = kx @ u
            R = kx * W[None, :]
            S = scipy.linalg.cho_solve((LB, True), R.T)
            var[:, c] = kdiag - np.sum(R.T * S, axis=0)
        else:
            mom = fit.state.moments[c]
            Kchol = g.chol
            A = scipy.linalg.cho_solve((Kchol, True), kx.T)  # K^{-1} k*
            mu[:, c] = kx @ scipy.linalg.cho_solve((Kchol, True), mom.m)
            var[:, c] = (
                kdiag - np.sum(kx.T * A, axis=0) + np.sum(A * (mom.Sigma @ A), axis=0)
            )
    return mu, var


def predict_labels(fit: FittedEpisode, query_x: np.ndarray, mc: McConfig) -> PredictiveDist:
    """Monte Carlo softmax probabilities from the latent predictive."""
    mu, var = predict_latent(fit, query_x)
    eps = normal_draws(mc.seed, (mc.samples, mu.shape[0], mu.shape[1]))
    f = mu[None] + np.sqrt(np.maximum(var, 0.0))[None] * eps
    fmax = f.max(axis=2, keepdims=True)
    e = np.exp(f - fmax)
    probs = np.mean(e / e.sum(axis=2, keepdims=True), axis=0)
    return PredictiveDist(mu=mu, var=var, probs=probs)
