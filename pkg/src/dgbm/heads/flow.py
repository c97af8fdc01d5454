"""Bernstein-polynomial normalizing-flow head.

The flow maps a response ``y`` to a standard-normal variable ``z`` through
three monotone stages::

    y_t = sigmoid(a1' * y - b1)        # squash onto [0, 1]
    z_t = sum_m theta'_m * B_{m,M}(y_t)  # Bernstein polynomial of order M
    z   = a2' * z_t - b2                 # affine map onto the normal scale

with ``B_{m,M}(t) = C(M, m) t^m (1 - t)^(M - m)``. Unconstrained raw
parameters are made admissible by softplus: ``a' = softplus(a)``,
``theta'_0 = theta_0`` and ``theta'_m = theta'_{m-1} + softplus(theta_m)``.

Raw parameter layout (``K = M + 5`` columns)::

    [a1, b1, theta_0, ..., theta_M, a2, b2]
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import comb, ndtr, ndtri

from dgbm.errors import InvalidInputError, InvalidParameterError, NumericalError, OutOfSupportError
from dgbm.heads import _jet
from dgbm.heads._jet import Jet
from dgbm.heads.base import DistributionHead, align_rows, broadcast_rows, check_alpha

logger = logging.getLogger(__name__)

HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)
SATURATION_EPS = 1e-12
SAMPLE_MARGIN = 1e-9
INVERT_TOL = 1e-10
_CHUNK = 1 << 17


def n_raw_params(order: int) -> int:
    return order + 5


@dataclass(frozen=True)
class FlowConstrainedParams:
    """Admissible flow parameters; leading axes index rows.

    Attributes:
        a1, b1: Pre-sigmoid scale (> 0) and shift.
        theta: Increasing Bernstein coefficients, shape ``(..., M + 1)``.
        gaps: ``softplus`` increments ``theta[..., 1:] - theta[..., :-1]``,
            kept separately so the derivative never loses precision.
        a2, b2: Post-Bernstein scale (> 0) and shift.
    """

    a1: np.ndarray
    b1: np.ndarray
    theta: np.ndarray
    gaps: np.ndarray
    a2: np.ndarray
    b2: np.ndarray

    @property
    def order(self) -> int:
        return self.theta.shape[-1] - 1

    def z_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Open interval of attainable ``z`` values."""
        return self.a2 * self.theta[..., 0] - self.b2, self.a2 * self.theta[..., -1] - self.b2


def _order_from_k(k: int) -> int:
    if k < 6:
        raise InvalidInputError(f"a Bernstein flow needs at least 6 raw parameters, got {k}")
    return k - 5


def constrain(raw) -> FlowConstrainedParams:
    """Apply the softplus constraints to raw parameters of shape ``(..., M + 5)``."""
    raw = np.asarray(raw, dtype=np.float64)
    order = _order_from_k(raw.shape[-1])
    gaps = _jet.softplus(raw[..., 3 : order + 3])
    theta = np.concatenate(
        [raw[..., 2:3], raw[..., 2:3] + np.cumsum(gaps, axis=-1)], axis=-1
    )
    return FlowConstrainedParams(
        a1=_jet.softplus(raw[..., 0]),
        b1=raw[..., 1],
        theta=theta,
        gaps=gaps,
        a2=_jet.softplus(raw[..., order + 3]),
        b2=raw[..., order + 4],
    )


def _basis(t, order: int) -> np.ndarray:
    """Bernstein basis of ``order`` at ``t``, shape ``t.shape + (order + 1,)``."""
    t = np.asarray(t, dtype=np.float64)[..., None]
    m = np.arange(order + 1)
    return comb(order, m) * t**m * (1.0 - t) ** (order - m)


def _bernstein(t, theta, gaps):
    order = theta.shape[-1] - 1
    value = np.sum(theta * _basis(t, order), axis=-1)
    deriv = order * np.sum(gaps * _basis(t, order - 1), axis=-1)
    return value, deriv


def bernstein_eval(t, theta):
    """Bernstein polynomial with coefficients ``theta`` and its derivative at ``t``.

    Args:
        t: Points in ``[0, 1]``.
        theta: Coefficients ``theta_0..theta_M`` (last axis), broadcastable
            against ``t``.

    Returns:
        ``(value, derivative)`` arrays shaped like ``t``.
    """
    t = np.asarray(t, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if np.any(~np.isfinite(t)) or np.any((t < 0) | (t > 1)):
        raise InvalidInputError("Bernstein polynomials are evaluated on [0, 1] only")
    if theta.shape[-1] < 2:
        raise InvalidInputError("need at least two Bernstein coefficients (order >= 1)")
    return _bernstein(t, theta, np.diff(theta, axis=-1))


# -- forward pass, generic over arrays and jets ---------------------------


def _chain(y, cols, order: int):
    """Run the flow on columns of raw parameters (arrays or jets).

    Returns ``(z, log_det, saturated)``; ``saturated`` flags rows whose
    sigmoid output had to be clamped.
    """
    a1 = _jet.softplus(cols[0])
    b1 = cols[1]
    theta = [cols[2]]
    gaps = []
    for m in range(1, order + 1):
        gaps.append(_jet.softplus(cols[2 + m]))
        theta.append(theta[-1] + gaps[-1])
    a2 = _jet.softplus(cols[order + 3])
    b2 = cols[order + 4]

    u = a1 * y - b1
    t = _jet.sigmoid(u)
    tv = _jet.value(t)
    saturated = (tv < SATURATION_EPS) | (tv > 1.0 - SATURATION_EPS)
    if np.any(saturated):
        frozen = np.clip(tv, SATURATION_EPS, 1.0 - SATURATION_EPS)
        t = t.where(saturated, frozen) if isinstance(t, Jet) else frozen

    one_minus = 1.0 - t
    pw = [1.0, t]
    qw = [1.0, one_minus]
    for _ in range(2, order + 1):
        pw.append(pw[-1] * t)
        qw.append(qw[-1] * one_minus)

    h = 0.0
    for m in range(order + 1):
        h = h + (theta[m] * float(comb(order, m))) * (pw[m] * qw[order - m])
    dh = 0.0
    for m in range(order):
        dh = dh + (gaps[m] * float(order * comb(order - 1, m))) * (pw[m] * qw[order - 1 - m])

    z = a2 * h - b2
    # log sigmoid'(u) in closed form: exact for any u, no log(0)
    log_dsig = -(_jet.softplus(u) + _jet.softplus(-u))
    log_det = _jet.log(a2) + _jet.log(dh) + log_dsig + _jet.log(a1)
    return z, log_det, saturated


def _columns(raw):
    raw = np.asarray(raw, dtype=np.float64)
    return [raw[..., k] for k in range(raw.shape[-1])]


def forward(y, raw):
    """Push ``y`` through the flow.

    Args:
        y: Responses, broadcastable against the leading axes of ``raw``.
        raw: Raw parameters, shape ``(..., M + 5)``.

    Returns:
        ``(z, log_det)`` where ``log_det = log dz/dy``.
    """
    raw = np.asarray(raw, dtype=np.float64)
    order = _order_from_k(raw.shape[-1])
    z, log_det, _ = _chain(np.asarray(y, dtype=np.float64), _columns(raw), order)
    return z, log_det


def nll(y, raw):
    """Negative log-likelihood under a standard-normal base distribution."""
    z, log_det = forward(y, raw)
    return HALF_LOG_2PI + 0.5 * z * z - log_det


def _nll_jet(y, raw, order_of_derivs: int):
    raw = np.asarray(raw, dtype=np.float64)
    order = _order_from_k(raw.shape[-1])
    cols = Jet.seed(_columns(raw), order=order_of_derivs)
    z, log_det, saturated = _chain(y, cols, order)
    out = HALF_LOG_2PI + 0.5 * z.square() - log_det
    return out, saturated


def grad_hess(y, raw):
    """Per-row gradients and diagonal hessians of :func:`nll`.

    Derivatives come from one forward pass with second-order jets seeded
    along every raw parameter.

    Returns:
        ``(grad, hess)``, each of shape ``raw.shape``.
    """
    raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
    y = broadcast_rows(y, raw.shape[0])
    out, _ = _nll_jet(y, raw, 2)
    grad = np.moveaxis(out.d1, 0, -1)
    hess = np.moveaxis(out.d2, 0, -1)
    for name, arr in (("gradient", grad), ("hessian", hess)):
        bad = ~np.isfinite(arr)
        if np.any(bad):
            k = int(np.argwhere(bad)[0][-1])
            raise NumericalError(f"non-finite {name} for flow parameter index {k}")
    return grad, hess


# -- inversion -------------------------------------------------------------


def _solve_bernstein(target, theta, gaps):
    """Find ``t`` in [0, 1] with ``h(t) = target`` (vectorised).

    Newton steps safeguarded by a bisection bracket: every iterate stays in
    the bracket, so convergence is guaranteed like plain bisection.
    """
    lo = np.zeros_like(target)
    hi = np.ones_like(target)
    x = np.clip((target - theta[:, 0]) / (theta[:, -1] - theta[:, 0]), 0.0, 1.0)
    active = np.arange(target.shape[0])
    for _ in range(200):
        if active.size == 0:
            break
        xa = x[active]
        h, dh = _bernstein(xa, theta[active], gaps[active])
        f = h - target[active]
        lo[active] = np.where(f < 0, xa, lo[active])
        hi[active] = np.where(f > 0, xa, hi[active])
        with np.errstate(divide="ignore", invalid="ignore"):
            xn = xa - f / dh
        la, ha = lo[active], hi[active]
        bad = ~np.isfinite(xn) | (xn <= la) | (xn >= ha)
        xn = np.where(bad, 0.5 * (la + ha), xn)
        done = (f == 0) | (np.abs(xn - xa) <= 1e-17) | (ha - la <= 1e-16)
        x[active] = np.where(f == 0, xa, xn)
        active = active[~done]
    h, _ = _bernstein(x, theta, gaps)
    worst = np.max(np.abs(h - target)) if target.size else 0.0
    if worst > INVERT_TOL:
        raise NumericalError(f"Bernstein inversion did not converge (residual {worst:.3g})")
    return x


def _invert_flat(z, p: FlowConstrainedParams):
    lower, upper = p.z_bounds()
    outside = ~((z > lower) & (z < upper))
    if np.any(outside):
        i = int(np.flatnonzero(outside)[0])
        raise OutOfSupportError(
            f"z={z[i]:.6g} outside attainable interval ({lower[i]:.6g}, {upper[i]:.6g})",
            lower=lower[i],
            upper=upper[i],
        )
    target = (z + p.b2) / p.a2
    t = _solve_bernstein(target, p.theta, p.gaps)
    logit = np.log(t) - np.log1p(-t)
    return (logit + p.b1) / p.a1


def _take(p: FlowConstrainedParams, idx) -> FlowConstrainedParams:
    return FlowConstrainedParams(
        a1=p.a1[idx], b1=p.b1[idx], theta=p.theta[idx], gaps=p.gaps[idx], a2=p.a2[idx], b2=p.b2[idx]
    )


def invert(z, raw):
    """Map ``z`` back to ``y``; shapes broadcast like :func:`forward`.

    Raises:
        OutOfSupportError: if some ``z`` is outside ``(a2' theta'_0 - b2,
            a2' theta'_M - b2)``.
    """
    raw = np.asarray(raw, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    shape = np.broadcast_shapes(z.shape, raw.shape[:-1])
    zf = np.broadcast_to(z, shape).ravel()
    rows = np.broadcast_to(
        np.arange(int(np.prod(raw.shape[:-1]))).reshape(raw.shape[:-1]), shape
    ).ravel()
    p = constrain(raw.reshape(-1, raw.shape[-1]))
    out = np.empty(zf.shape[0])
    for start in range(0, zf.shape[0], _CHUNK):
        sl = slice(start, start + _CHUNK)
        out[sl] = _invert_flat(zf[sl], _take(p, rows[sl]))
    return out.reshape(shape)


# -- unconditional fit -----------------------------------------------------


def _mean_nll_and_grad(params, y):
    raw = np.broadcast_to(params, (y.shape[0], params.shape[0]))
    out, _ = _nll_jet(y, raw, 1)
    value = float(np.mean(out.val))
    grad = np.mean(out.d1, axis=1)
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        return np.inf, np.zeros_like(params)
    return value, grad


def _inv_softplus(v):
    return v + np.log(-np.expm1(-v))


def initial_params(y, order: int, spread: float = 3.0) -> np.ndarray:
    """Starting point that standardizes ``y`` before the sigmoid.

    ``a1 = 1/sd`` and ``b1 = mean/sd`` centre the data on t = 0.5, equally
    spaced coefficients on ``[-spread, spread]`` make the Bernstein stage
    linear, and the output affine map is the identity. Random starts tend to
    land on a sigmoid that is nearly flat over the data, where the flow can
    only represent a Gaussian shape.
    """
    y = np.asarray(y, dtype=np.float64)
    sd = max(float(np.std(y)), 1e-6)
    x = np.empty(n_raw_params(order))
    x[0] = _inv_softplus(1.0 / sd)
    x[1] = float(np.mean(y)) / sd
    x[2] = -spread
    x[3 : order + 3] = _inv_softplus(2.0 * spread / order)
    x[order + 3] = _inv_softplus(1.0)
    x[order + 4] = 0.0
    return x


def fit_unconditional(y, order: int, max_iters: int = 500, seed=0, n_starts: int = 1):
    """Maximum-likelihood flow parameters for ``y`` ignoring covariates.

    The first start is data-driven (see :func:`initial_params`); further
    starts add seeded N(0, 0.5^2) noise to it. Each start is refined by
    L-BFGS-B and the best one wins.

    Returns:
        Raw parameter vector of length ``order + 5``.
    """
    y = np.asarray(y, dtype=np.float64)
    if order < 1:
        raise InvalidParameterError(f"Bernstein order must be >= 1, got {order}")
    k = n_raw_params(order)
    if y.shape[0] < k:
        raise InvalidInputError(f"need at least {k} observations to fit order {order}")
    rng = np.random.default_rng(seed)
    base = initial_params(y, order)
    best, best_val = None, np.inf
    for start in range(max(1, int(n_starts))):
        x0 = base if start == 0 else base + rng.normal(0.0, 0.5, k)
        f0, _ = _mean_nll_and_grad(x0, y)
        if not np.isfinite(f0):
            continue
        res = minimize(
            _mean_nll_and_grad,
            x0,
            args=(y,),
            jac=True,
            method="L-BFGS-B",
            options={"maxiter": int(max_iters), "maxfun": 4 * int(max_iters)},
        )
        x, fx = (res.x, float(res.fun)) if np.isfinite(res.fun) and res.fun <= f0 else (x0, f0)
        if fx < best_val:
            best, best_val = x, fx
    if best is None:
        raise NumericalError(
            f"flow likelihood is non-finite at every starting point; try a smaller order than {order}"
        )
    logger.debug("unconditional flow fit (order %d): mean NLL %.6f", order, best_val)
    return np.asarray(best, dtype=np.float64)


def select_order(y, grid, max_iters: int = 500, seed=0, n_starts: int = 1):
    """Bernstein order with the lowest unconditional mean NLL (smallest on ties).

    Returns:
        ``(order, scores)`` with ``scores`` mapping each successfully fitted
        order to its mean NLL.
    """
    grid = [int(m) for m in grid]
    if not grid:
        raise InvalidParameterError("order grid is empty")
    y = np.asarray(y, dtype=np.float64)
    scores = {}
    for m in sorted(set(grid)):
        try:
            raw = fit_unconditional(y, m, max_iters=max_iters, seed=seed, n_starts=n_starts)
        except (NumericalError, InvalidInputError, InvalidParameterError) as exc:
            logger.warning("order %d skipped: %s", m, exc)
            continue
        scores[m] = float(np.mean(nll(y, raw)))
    if not scores:
        raise NumericalError(f"unconditional fit failed for every order in {grid}")
    best = min(scores, key=lambda m: (scores[m], m))
    return best, scores


class BernsteinFlowHead(DistributionHead):
    """Conditional Bernstein flow with ``order + 5`` raw parameters per row."""

    name = "bernstein_flow"

    def __init__(self, order: int = 6, fit_seed: int = 0, fit_max_iters: int = 500, fit_starts: int = 1):
        if int(order) != order or order < 1:
            raise InvalidParameterError(f"Bernstein order must be an integer >= 1, got {order!r}")
        self.order = int(order)
        self.fit_seed = fit_seed
        self.fit_max_iters = fit_max_iters
        self.fit_starts = fit_starts
        self.param_names = (
            ("a1", "b1") + tuple(f"theta{m}" for m in range(self.order + 1)) + ("a2", "b2")
        )

    def descriptor(self):
        return {"name": self.name, "order": self.order}

    def nll(self, y, eta):
        y, eta = align_rows(y, self.check_eta(eta))
        return nll(y, eta)

    def grad_hess(self, y, eta):
        y, eta = align_rows(y, self.check_eta(eta))
        return grad_hess(y, eta)

    def forward(self, y, eta):
        y, eta = align_rows(y, self.check_eta(eta))
        return forward(y, eta)

    def cdf(self, y, eta):
        z, _ = self.forward(y, eta)
        return ndtr(z)

    def pdf(self, y, eta):
        return np.exp(-self.nll(y, eta))

    def attainable_cdf(self, eta):
        """Per-row ``(lower, upper)`` CDF levels the bounded flow can reach."""
        lo, hi = constrain(self.check_eta(eta)).z_bounds()
        return ndtr(lo), ndtr(hi)

    def quantile(self, alpha, eta, strict=True):
        """Quantiles by inversion; unattainable levels raise or give NaN."""
        levels, scalar = check_alpha(alpha)
        eta = self.check_eta(eta)
        z = np.broadcast_to(ndtri(levels)[None, :], (eta.shape[0], levels.size))
        lo, hi = constrain(eta).z_bounds()
        ok = (z > lo[:, None]) & (z < hi[:, None])
        if strict and not np.all(ok):
            r, c = np.argwhere(~ok)[0]
            raise OutOfSupportError(
                f"level {levels[c]:g} unattainable for row {r}: fitted CDF spans "
                f"({ndtr(lo[r]):.6g}, {ndtr(hi[r]):.6g})",
                lower=float(ndtr(lo[r])),
                upper=float(ndtr(hi[r])),
            )
        q = np.full(z.shape, np.nan)
        rows, cols = np.nonzero(ok)
        if rows.size:
            q[rows, cols] = invert(z[rows, cols], eta[rows])
        return q[:, 0] if scalar else q

    def sample(self, eta, n, seed=None, return_clamped=False):
        """Draw ``z ~ N(0, 1)`` and invert; out-of-range draws are clamped.

        With ``return_clamped`` the number of clamped draws is returned too.
        """
        eta = self.check_eta(eta)
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((eta.shape[0], int(n)))
        lo, hi = constrain(eta).z_bounds()
        lo_c = (lo + SAMPLE_MARGIN)[:, None]
        hi_c = (hi - SAMPLE_MARGIN)[:, None]
        clamped = int(np.sum((z < lo_c) | (z > hi_c)))
        z = np.clip(z, lo_c, hi_c)
        out = invert(z, eta[:, None, :])
        if clamped:
            logger.debug("clamped %d of %d flow samples to the attainable range", clamped, z.size)
        return (out, clamped) if return_clamped else out

    def unconditional_fit(self, y):
        return fit_unconditional(
            y, self.order, max_iters=self.fit_max_iters, seed=self.fit_seed, n_starts=self.fit_starts
        )

    def diagnostics(self, y, eta):
        y, eta = align_rows(y, self.check_eta(eta))
        order = self.order
        _, _, saturated = _chain(y, _columns(eta), order)
        lo, hi = self.attainable_cdf(eta)
        return {
            "saturated_fraction": float(np.mean(saturated)),
            "min_cdf_coverage": float(np.min(hi - lo)),
        }
