"""Bernstein flow head: constraints, forward map, inversion and fitting."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from scipy import integrate
from scipy.special import ndtr, ndtri

from dgbm.errors import InvalidInputError, OutOfSupportError
from dgbm.heads import BernsteinFlowHead, GaussianHead
from dgbm.heads import flow
from oracles import bernstein_brute, fd_derivative, fd_grad_hess, rel_err

C = np.log(np.e - 1.0)  # softplus(C) == 1
IDENTITY_M1 = np.array([C, 0.0, 0.0, C, C, 0.0])


def random_configs(rng, n, order):
    """Raw parameters plus responses whose sigmoid argument stays in [-6, 6]."""
    raw = rng.normal(0.0, 1.0, size=(n, order + 5))
    u = rng.uniform(-6.0, 6.0, n)
    a1 = np.logaddexp(0.0, raw[:, 0])
    y = (u + raw[:, 1]) / a1
    return raw, y


class TestConstrain:
    def test_softplus_zero(self):
        p = flow.constrain(np.zeros(6))
        assert p.a1 == pytest.approx(np.log(2.0), abs=1e-12)

    def test_cumulative_softplus(self):
        p = flow.constrain(np.array([0.0, 0.0, 0.0, 0.0, 0.0, 0.0]))
        np.testing.assert_allclose(p.theta, [0.0, np.log(2.0)], atol=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(hnp.arrays(np.float64, st.integers(6, 14), elements=st.floats(-20, 20)))
    def test_theta_strictly_increasing(self, raw):
        p = flow.constrain(raw)
        assert np.all(np.diff(p.theta) > 0)
        assert np.min(np.diff(p.theta)) == pytest.approx(np.min(p.gaps), rel=1e-9)
        assert p.a1 > 0 and p.a2 > 0


class TestBernstein:
    def test_linear_order_one(self):
        t = np.linspace(0, 1, 11)
        v, d = flow.bernstein_eval(t, np.array([0.0, 1.0]))
        np.testing.assert_allclose(v, t, atol=1e-15)
        np.testing.assert_allclose(d, 1.0)

    def test_collinear_coefficients(self):
        t = np.linspace(0, 1, 11)
        v, d = flow.bernstein_eval(t, np.array([0.0, 1.0, 2.0]))
        np.testing.assert_allclose(v, 2 * t, atol=1e-14)
        np.testing.assert_allclose(d, 2.0, atol=1e-14)

    def test_endpoints_and_brute_force(self, rng):
        for order in range(1, 9):
            theta = np.sort(rng.normal(size=order + 1))
            v, d = flow.bernstein_eval(np.array([0.0, 1.0]), theta)
            np.testing.assert_allclose(v, [theta[0], theta[-1]], atol=1e-13)
            t = rng.uniform(0.01, 0.99, 25)
            v, d = flow.bernstein_eval(t, theta)
            np.testing.assert_allclose(v, bernstein_brute(t, theta), atol=1e-12)
            fd = fd_derivative(lambda s: bernstein_brute(s, theta), t, 1e-4)
            np.testing.assert_allclose(d, fd, rtol=1e-7, atol=1e-9)

    def test_outside_unit_interval_rejected(self):
        with pytest.raises(InvalidInputError):
            flow.bernstein_eval(np.array([1.2]), np.array([0.0, 1.0]))


class TestForward:
    def test_identity_example(self):
        z, log_det = flow.forward(0.0, IDENTITY_M1)
        assert z == pytest.approx(0.5, abs=1e-12)
        assert log_det == pytest.approx(np.log(0.25), abs=1e-12)
        assert flow.nll(0.0, IDENTITY_M1) == pytest.approx(2.43023, abs=1e-5)

    def test_bounded_image(self):
        ys = np.array([0.0, 5.0, 20.0, 50.0, 1e3])
        z, _ = flow.forward(ys, np.broadcast_to(IDENTITY_M1, (5, 6)))
        assert np.all(np.diff(z) >= 0)
        # saturated rows are clamped, so the bound is approached but never reached
        assert z[-1] < 1.0 and z[-1] == pytest.approx(1.0, abs=1e-11)

    def test_scaling_theta_shifts_log_det(self):
        raw = np.array([0.3, -0.2, 0.1, 0.4, -0.5, 0.2, 0.7, 0.0])
        scaled = raw.copy()
        # multiplying every theta' by s: theta_0 scales directly; softplus(theta_m) * s
        s = 2.5
        p = flow.constrain(raw)
        scaled[2] = p.theta[0] * s
        scaled[3:6] = np.log(np.expm1(p.gaps * s))
        _, ld0 = flow.forward(0.4, raw)
        _, ld1 = flow.forward(0.4, scaled)
        assert ld1 - ld0 == pytest.approx(np.log(s), abs=1e-10)

    def test_jacobian_matches_finite_differences(self, rng):
        for order in (1, 3, 6, 10):
            raw, y = random_configs(rng, 250, order)
            _, log_det = flow.forward(y, raw)
            step = 1e-4 / np.logaddexp(0.0, raw[:, 0])
            fd = fd_derivative(lambda v: flow.forward(v, raw)[0], y, step)
            assert np.max(rel_err(np.exp(log_det), fd)) < 1e-5

    @settings(max_examples=60, deadline=None)
    @given(
        hnp.arrays(np.float64, 9, elements=st.floats(-4, 4)),
        hnp.arrays(np.float64, 30, elements=st.floats(-30, 30), unique=True),
    )
    def test_monotone_in_y(self, raw, ys):
        ys = np.sort(ys)
        z, _ = flow.forward(ys, np.broadcast_to(raw, (ys.size, raw.size)))
        # inputs one ulp apart may swap by a few ulps of rounding in the basis sum
        assert np.all(np.diff(z) >= -8 * np.finfo(float).eps * np.maximum(1.0, np.abs(z[1:])))

    def test_saturation_is_flagged(self):
        head = BernsteinFlowHead(order=1)
        d = head.diagnostics(np.array([0.0, 1e6]), np.vstack([IDENTITY_M1, IDENTITY_M1]))
        assert d["saturated_fraction"] == pytest.approx(0.5)
        assert np.isfinite(flow.nll(1e6, IDENTITY_M1))


class TestGradHess:
    def test_matches_finite_differences(self, rng):
        for order in (1, 4, 8):
            raw, y = random_configs(rng, 200, order)
            g, h = flow.grad_hess(y, raw)
            fg, fh = fd_grad_hess(lambda r: flow.nll(y, r), raw, step=1e-3)
            assert np.max(rel_err(g, fg, atol=1e-6)) < 1e-4
            assert np.max(rel_err(h, fh, atol=1e-6)) < 1e-3

    def test_symmetric_flow_centre(self):
        # theta' = (-2, -0.5, 0.5, 2) is odd about t = 0.5; b1 = b2 = 0
        gaps = np.array([1.5, 1.0, 1.5])
        raw = np.concatenate([[0.2, 0.0, -2.0], np.log(np.expm1(gaps)), [0.1, 0.0]])
        g, _ = flow.grad_hess(0.0, raw[None, :])
        assert g[0, 1] == pytest.approx(0.0, abs=1e-12)

    def test_head_shape(self, rng):
        head = BernsteinFlowHead(order=4)
        raw, y = random_configs(rng, 7, 4)
        g, h = head.grad_hess(y, raw)
        assert g.shape == h.shape == (7, 9)


class TestInvert:
    def test_identity_example(self):
        assert flow.invert(0.5, IDENTITY_M1) == pytest.approx(0.0, abs=1e-12)

    def test_round_trip(self, rng):
        for order in (1, 3, 6, 10):
            raw, y = random_configs(rng, 250, order)
            z, _ = flow.forward(y, raw)
            back = flow.invert(z, raw)
            scale = 1.0 / np.logaddexp(0.0, raw[:, 0])
            assert np.max(np.abs(back - y) / np.maximum(1.0, scale)) < 1e-8

    def test_out_of_support(self):
        p = flow.constrain(IDENTITY_M1)
        upper = float(p.a2 * p.theta[-1] - p.b2)
        with pytest.raises(OutOfSupportError) as exc:
            flow.invert(upper + 0.1, IDENTITY_M1)
        assert exc.value.upper == pytest.approx(upper)
        assert exc.value.lower == pytest.approx(0.0)


class TestDistribution:
    def test_quantiles_non_crossing_and_cdf_identity(self, rng):
        head = BernsteinFlowHead(order=6)
        raw = rng.normal(size=(30, 11))
        lo, hi = head.attainable_cdf(raw)
        levels = np.linspace(0.01, 0.99, 99)
        q = head.quantile(levels, raw, strict=False)
        for i in range(raw.shape[0]):
            ok = (levels > lo[i]) & (levels < hi[i])
            qi = q[i, ok]
            assert np.all(np.diff(qi) > 0)
            np.testing.assert_allclose(head.cdf(qi, np.broadcast_to(raw[i], (qi.size, 11))), levels[ok], atol=1e-8)
            assert np.all(np.isnan(q[i, ~ok]))

    def test_strict_quantile_raises_with_bounds(self):
        head = BernsteinFlowHead(order=1)
        with pytest.raises(OutOfSupportError) as exc:
            head.quantile(0.99, IDENTITY_M1)
        assert exc.value.lower == pytest.approx(0.5)
        assert exc.value.upper == pytest.approx(ndtr(1.0))

    def test_density_integrates_to_attainable_mass(self, rng):
        head = BernsteinFlowHead(order=5)
        for _ in range(3):
            raw = rng.normal(size=10)
            p = flow.constrain(raw)
            zlo, zhi = (float(v) for v in p.z_bounds())
            eps = 1e-6
            ylo, yhi = (float(v) for v in flow.invert(np.array([zlo + eps, zhi - eps]), np.vstack([raw, raw])))
            val, _ = integrate.quad(lambda v: head.pdf(v, raw)[0], ylo, yhi, limit=500, epsabs=1e-10)
            assert val == pytest.approx(ndtr(zhi) - ndtr(zlo), abs=1e-4)

    def test_cdf_nondecreasing_on_grid(self, rng):
        head = BernsteinFlowHead(order=4)
        raw = rng.normal(size=9)
        ys = np.linspace(-50, 50, 2001)
        assert np.all(np.diff(head.cdf(ys, raw)) >= 0)

    def test_samples_inside_support_and_reproducible(self, rng):
        head = BernsteinFlowHead(order=1)
        s, clamped = head.sample(np.vstack([IDENTITY_M1] * 3), 500, seed=5, return_clamped=True)
        assert s.shape == (3, 500) and np.all(np.isfinite(s))
        # z ~ N(0,1) falls outside (0, 1) about 66% of the time here
        assert 0.5 * s.size < clamped < 0.8 * s.size
        np.testing.assert_array_equal(s, head.sample(np.vstack([IDENTITY_M1] * 3), 500, seed=5))


class TestUnconditionalFit:
    def test_shape_and_start_improvement(self, rng):
        y = rng.normal(size=300)
        for order in (2, 5):
            raw = flow.fit_unconditional(y, order, seed=4)
            assert raw.shape == (order + 5,) and np.all(np.isfinite(raw))
            x0 = np.random.default_rng(4).standard_normal(order + 5)
            assert np.mean(flow.nll(y, raw)) <= np.mean(flow.nll(y, np.broadcast_to(x0, (300, order + 5))))

    def test_standard_normal_matches_gaussian_nll(self, rng):
        y = rng.standard_normal(5000)
        raw = flow.fit_unconditional(y, 6)
        exact = 0.5 * np.log(2 * np.pi) + 0.5 * np.mean(y**2)
        assert abs(np.mean(flow.nll(y, raw)) - exact) < 0.05
        gauss = GaussianHead()
        g_nll = np.mean(gauss.nll(y, gauss.unconditional_fit(y)))
        assert abs(np.mean(flow.nll(y, raw)) - g_nll) < 0.05

    def test_too_few_observations(self):
        with pytest.raises(InvalidInputError):
            flow.fit_unconditional(np.zeros(5), 3)

    def test_singleton_grid(self, rng):
        best, scores = flow.select_order(rng.normal(size=100), [3])
        assert best == 3 and set(scores) == {3}

    def test_bimodal_selects_flexible_order(self, rng):
        comp = rng.uniform(size=2000) < 0.5
        y = np.where(comp, rng.normal(-2, 0.5, 2000), rng.normal(2, 0.5, 2000))
        best, scores = flow.select_order(y, [3, 4, 6, 8])
        assert best >= 4
        assert scores[best] == min(scores.values())
