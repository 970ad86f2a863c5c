"""Softmax expected log-likelihood estimators and their gradients."""

import numpy as np
import pytest

from mdgpc import likelihood
from mdgpc.errors import DegenerateInput, DimensionMismatch, NotOneHot
from mdgpc.expfam import PointMeanParams
from mdgpc.likelihood import (
    GaussianSiteLikelihood,
    McConfig,
    SoftmaxLikelihood,
    batch_expected_loglik,
    batch_grads_mv,
    check_one_hot,
    gauss_hermite_draws,
    grad_mean_params,
    grad_mv,
    log_softmax_lik,
    mc_expected_loglik,
    normal_draws,
)

LOGLIK_10_0_0 = -9.079573746717529e-05  # log softmax at f = (10, 0, 0), class 0


def one_hot(idx: int, c: int) -> np.ndarray:
    y = np.zeros(c)
    y[idx] = 1.0
    return y


class TestPointEvaluations:
    def test_log_softmax_frozen(self):
        f = np.array([10.0, 0.0, 0.0])
        assert log_softmax_lik(one_hot(0, 3), f) == pytest.approx(
            LOGLIK_10_0_0, rel=1e-12
        )

    def test_log_softmax_shift_invariance(self):
        f = np.array([2.0, -1.0, 0.5])
        a = log_softmax_lik(one_hot(1, 3), f)
        b = log_softmax_lik(one_hot(1, 3), f + 123.0)
        assert a == pytest.approx(b, abs=1e-10)

    def test_log_softmax_extreme_no_overflow(self):
        f = np.array([1000.0, 0.0])
        assert np.isfinite(log_softmax_lik(one_hot(1, 2), f))

    def test_check_one_hot_rejects(self):
        with pytest.raises(NotOneHot):
            check_one_hot(np.array([0.5, 0.5]))
        with pytest.raises(NotOneHot):
            check_one_hot(np.array([0.0, 0.0]))
        with pytest.raises(NotOneHot):
            check_one_hot(np.array([2.0, 0.0]))


class TestDraws:
    def test_normal_draws_deterministic(self):
        a = normal_draws(7, (4, 3))
        b = normal_draws(7, (4, 3))
        np.testing.assert_array_equal(a, b)
        assert a.shape == (4, 3)

    def test_gauss_hermite_moments(self):
        eps, w = gauss_hermite_draws(16, 2)
        assert eps.shape == (256, 2)
        # quadrature integrates low moments of the standard normal exactly
        assert np.sum(w) == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(w @ eps, [0.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(w @ (eps**2), [1.0, 1.0], atol=1e-10)
        np.testing.assert_allclose(w @ (eps**4), [3.0, 3.0], atol=1e-8)


class TestEstimator:
    def test_mc_close_to_quadrature(self):
        # the MC average over draws must agree with the dense quadrature
        # value within a few standard errors
        rng = np.random.default_rng(0)
        c = 2
        m = rng.standard_normal(c)
        v = 0.5 + rng.random(c)
        pm = PointMeanParams(mu1=m, mu2=v + m * m)
        y = one_hot(0, c)
        eps_q, w_q = gauss_hermite_draws(60, c)
        exact = mc_expected_loglik(pm, y, McConfig(1, 0), eps=eps_q, weights=w_q)
        s = 200_000
        est = mc_expected_loglik(pm, y, McConfig(samples=s, seed=3))
        draws = normal_draws(3, (s, c))
        f = m + np.sqrt(v) * draws
        per = f[:, 0] - np.log(np.sum(np.exp(f - f.max(axis=1, keepdims=True)), axis=1)) - f.max(axis=1)
        stderr = float(np.std(per, ddof=1) / np.sqrt(s))
        assert abs(est - exact) < 4 * stderr + 1e-12

    def test_batch_matches_per_point_sum(self):
        rng = np.random.default_rng(1)
        n, c = 4, 3
        m = rng.standard_normal((n, c))
        v = 0.5 + rng.random((n, c))
        Y = np.eye(c)[rng.integers(0, c, size=n)]
        eps = normal_draws(9, (64, n, c))
        total = batch_expected_loglik(m, v, Y, eps)
        parts = sum(
            batch_expected_loglik(
                m[i : i + 1], v[i : i + 1], Y[i : i + 1], eps[:, i : i + 1, :]
            )
            for i in range(n)
        )
        assert total == pytest.approx(parts, rel=1e-12)


class TestGradients:
    def test_bounds_hold_on_random_inputs(self):
        # 1e5 evaluations: g_m rows lie in [-1, 1], g_v in [-1/8, 0]
        rng = np.random.default_rng(2)
        n, c = 100_000, 5
        m = 3.0 * rng.standard_normal((n, c))
        v = 0.01 + 3.0 * rng.random((n, c))
        Y = np.eye(c)[rng.integers(0, c, size=n)]
        eps = normal_draws(11, (8, n, c))
        g_m, g_v = batch_grads_mv(m, v, Y, eps)
        assert g_m.shape == (n, c) and g_v.shape == (n, c)
        assert np.all(g_m >= -1.0 - 1e-12) and np.all(g_m <= 1.0 + 1e-12)
        assert np.all(g_v >= -0.125 - 1e-12) and np.all(g_v <= 0.0 + 1e-12)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_grad_mv_fd_common_draws(self, seed):
        # finite differences with the same fixed quadrature node set
        rng = np.random.default_rng(seed)
        c = 3
        m = rng.standard_normal(c)
        v = 0.5 + rng.random(c)
        y = one_hot(int(rng.integers(0, c)), c)
        eps, w = gauss_hermite_draws(16, c)
        mc = McConfig(samples=eps.shape[0], seed=0)
        pm = PointMeanParams(mu1=m, mu2=v + m * m)
        g_m, g_v = grad_mv(pm, y, mc, eps=eps, weights=w)
        h = 1e-4
        for j in range(c):
            for which in ("m", "v"):
                vals = []
                for sgn in (1.0, -1.0):
                    mm, vv = m.copy(), v.copy()
                    if which == "m":
                        mm[j] += sgn * h
                    else:
                        vv[j] += sgn * h
                    pm_s = PointMeanParams(mu1=mm, mu2=vv + mm * mm)
                    vals.append(
                        mc_expected_loglik(pm_s, y, mc, eps=eps, weights=w)
                    )
                fd = (vals[0] - vals[1]) / (2 * h)
                exact = g_m[j] if which == "m" else g_v[j]
                assert abs(fd - exact) <= 1e-4 * max(1.0, abs(exact))

    def test_grad_mean_params_chain(self):
        rng = np.random.default_rng(5)
        c = 4
        m = rng.standard_normal(c)
        v = 0.5 + rng.random(c)
        pm = PointMeanParams(mu1=m, mu2=v + m * m)
        y = one_hot(2, c)
        eps, w = gauss_hermite_draws(10, c)
        mc = McConfig(samples=eps.shape[0], seed=0)
        g_m, g_v = grad_mv(pm, y, mc, eps=eps, weights=w)
        d1, d2 = grad_mean_params(pm, y, mc, eps=eps, weights=w)
        np.testing.assert_allclose(d1, g_m - 2.0 * g_v * m, atol=1e-12)
        np.testing.assert_allclose(d2, g_v, atol=0)

    def test_grad_mean_params_fd_common_draws(self):
        # direct finite differences in (mu1, mu2) coordinates
        rng = np.random.default_rng(6)
        c = 3
        m = rng.standard_normal(c)
        v = 0.5 + rng.random(c)
        mu1, mu2 = m, v + m * m
        y = one_hot(0, c)
        eps, w = gauss_hermite_draws(16, c)
        mc = McConfig(samples=eps.shape[0], seed=0)
        d1, d2 = grad_mean_params(PointMeanParams(mu1, mu2), y, mc, eps=eps, weights=w)
        h = 1e-5
        for j in range(c):
            for which, exact in (("mu1", d1[j]), ("mu2", d2[j])):
                vals = []
                for sgn in (1.0, -1.0):
                    a, b = mu1.copy(), mu2.copy()
                    if which == "mu1":
                        a[j] += sgn * h
                    else:
                        b[j] += sgn * h
                    vals.append(
                        mc_expected_loglik(
                            PointMeanParams(a, b), y, mc, eps=eps, weights=w
                        )
                    )
                fd = (vals[0] - vals[1]) / (2 * h)
                assert abs(fd - exact) <= 1e-4 * max(1.0, abs(exact))


class TestLikelihoodObjects:
    def test_softmax_likelihood_deterministic(self):
        rng = np.random.default_rng(7)
        n, c = 5, 3
        m = rng.standard_normal((n, c))
        v = 0.5 + rng.random((n, c))
        Y = np.eye(c)[rng.integers(0, c, size=n)]
        lik1 = SoftmaxLikelihood.from_seed(McConfig(32, 13), n, c)
        lik2 = SoftmaxLikelihood.from_seed(McConfig(32, 13), n, c)
        assert lik1.expected_loglik(m, v, Y) == lik2.expected_loglik(m, v, Y)

    def test_gaussian_site_likelihood(self):
        rng = np.random.default_rng(8)
        n, c = 4, 2
        a = rng.standard_normal((n, c))
        b = -rng.random((n, c))
        m = rng.standard_normal((n, c))
        v = 0.5 + rng.random((n, c))
        lik = GaussianSiteLikelihood(a, b)
        manual = float(np.sum(a * m + b * (v + m * m)))
        assert lik.expected_loglik(m, v, None) == pytest.approx(manual, rel=1e-12)
        g_m, g_v = lik.grads_mv(m, v, None)
        np.testing.assert_allclose(g_m, a + 2 * b * m, atol=0)
        np.testing.assert_allclose(g_v, np.broadcast_to(b, m.shape), atol=0)

    def test_gaussian_site_rejects_positive_quadratic(self):
        with pytest.raises(DegenerateInput):
            GaussianSiteLikelihood(np.zeros((2, 2)), np.full((2, 2), 0.1))

    def test_gaussian_site_shape_mismatch(self):
        with pytest.raises(DimensionMismatch):
            GaussianSiteLikelihood(np.zeros((2, 2)), np.zeros((3, 2)))
