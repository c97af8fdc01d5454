"""Second-order forward-mode dual numbers over numpy arrays.

A :class:`Jet` carries a primal value together with first and second
directional derivatives along ``K`` seed directions at once. Only the pure
second derivative along each direction is tracked, which is exactly what a
diagonal Hessian needs:

    d1[k] = d f / d x_k,    d2[k] = d^2 f / d x_k^2

The helper functions (:func:`exp`, :func:`log`, :func:`softplus`,
:func:`sigmoid`) accept either jets or plain arrays so one code path can
serve both evaluation and differentiation.
"""

from __future__ import annotations

import numpy as np


class Jet:
    __slots__ = ("val", "d1", "d2")
    __array_priority__ = 1000  # make ndarray * Jet defer to Jet.__rmul__

    def __init__(self, val, d1, d2=None):
        self.val = val
        self.d1 = d1
        self.d2 = d2

    @classmethod
    def seed(cls, columns, order: int = 2) -> list["Jet"]:
        """Independent variables, one seed direction per column.

        Args:
            columns: Sequence of ``K`` arrays sharing a shape ``S``.
            order: 1 for gradients only, 2 to also carry pure second
                derivatives.

        Returns:
            ``K`` jets whose derivative arrays have shape ``(K, *S)``.
        """
        k = len(columns)
        out = []
        for i, col in enumerate(columns):
            col = np.asarray(col, dtype=np.float64)
            d1 = np.zeros((k,) + col.shape)
            d1[i] = 1.0
            d2 = np.zeros((k,) + col.shape) if order >= 2 else None
            out.append(cls(col, d1, d2))
        return out

    # -- arithmetic -----------------------------------------------------

    def __neg__(self):
        return Jet(-self.val, -self.d1, None if self.d2 is None else -self.d2)

    def __add__(self, other):
        if isinstance(other, Jet):
            d2 = None if self.d2 is None else self.d2 + other.d2
            return Jet(self.val + other.val, self.d1 + other.d1, d2)
        return Jet(self.val + other, self.d1, self.d2)

    __radd__ = __add__

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Jet):
            a, b = self, other
            d1 = a.d1 * b.val + a.val * b.d1
            d2 = None
            if a.d2 is not None:
                d2 = a.d2 * b.val + 2.0 * a.d1 * b.d1 + a.val * b.d2
            return Jet(a.val * b.val, d1, d2)
        other = np.asarray(other, dtype=np.float64)
        return Jet(self.val * other, self.d1 * other, None if self.d2 is None else self.d2 * other)

    __rmul__ = __mul__

    def square(self):
        return self * self

    def where(self, mask, frozen):
        """Replace entries under ``mask`` by the constant ``frozen``."""
        val = np.where(mask, frozen, self.val)
        d1 = np.where(mask, 0.0, self.d1)
        d2 = None if self.d2 is None else np.where(mask, 0.0, self.d2)
        return Jet(val, d1, d2)


def _unary(x: Jet, f, f1, f2):
    d1 = f1 * x.d1
    d2 = None if x.d2 is None else f2 * x.d1 * x.d1 + f1 * x.d2
    return Jet(f, d1, d2)


def _softplus_arr(x):
    return np.logaddexp(0.0, x)


def _sigmoid_arr(x):
    return np.exp(-np.logaddexp(0.0, -x))


def softplus(x):
    """``log(1 + exp(x))`` without overflow."""
    if isinstance(x, Jet):
        s = _sigmoid_arr(x.val)
        return _unary(x, _softplus_arr(x.val), s, s * (1.0 - s))
    return _softplus_arr(np.asarray(x, dtype=np.float64))


def sigmoid(x):
    if isinstance(x, Jet):
        s = _sigmoid_arr(x.val)
        ds = s * (1.0 - s)
        return _unary(x, s, ds, ds * (1.0 - 2.0 * s))
    return _sigmoid_arr(np.asarray(x, dtype=np.float64))


def log(x):
    if isinstance(x, Jet):
        inv = 1.0 / x.val
        return _unary(x, np.log(x.val), inv, -inv * inv)
    return np.log(x)


def exp(x):
    if isinstance(x, Jet):
        e = np.exp(x.val)
        return _unary(x, e, e, e)
    return np.exp(x)


def value(x):
    return x.val if isinstance(x, Jet) else x
