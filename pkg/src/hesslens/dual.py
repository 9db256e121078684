"""Forward-mode dual arrays.

A :class:`Dual` carries a value array and a tangent array of the same
shape. Running any computation built from the primitives below on Duals
propagates exact directional derivatives. The curvature module exploits
this: evaluating the (hand-written) gradient computation on Duals whose
tangents are seeded with a direction ``v`` yields the exact
Hessian-vector product as the tangent of the gradient.

Every primitive accepts plain ndarrays too, so the same model code serves
both the fast value-only path and the dual path.
"""

from __future__ import annotations

import numpy as np

__all__ = ["Dual", "val", "tan"]


def _align(t: np.ndarray, v: np.ndarray) -> np.ndarray:
    return t if t.shape == v.shape else np.broadcast_to(t, v.shape)


class Dual:
    __slots__ = ("v", "t")
    # make ndarray <op> Dual defer to the reflected methods below
    __array_ufunc__ = None
    __array_priority__ = 1000

    def __init__(self, value, tangent):
        v = np.asarray(value, dtype=np.float64)
        t = np.asarray(tangent, dtype=np.float64)
        self.v = v
        self.t = _align(t, v)

    def __repr__(self):
        return f"Dual(shape={self.v.shape})"

    @property
    def shape(self):
        return self.v.shape

    @property
    def T(self):
        return Dual(self.v.T, self.t.T)

    # -- arithmetic -------------------------------------------------------

    def __neg__(self):
        return Dual(-self.v, -self.t)

    def __add__(self, o):
        if isinstance(o, Dual):
            return Dual(self.v + o.v, self.t + o.t)
        return Dual(self.v + o, self.t)

    __radd__ = __add__

    def __sub__(self, o):
        if isinstance(o, Dual):
            return Dual(self.v - o.v, self.t - o.t)
        return Dual(self.v - o, self.t)

    def __rsub__(self, o):
        return Dual(o - self.v, -self.t)

    def __mul__(self, o):
        if isinstance(o, Dual):
            return Dual(self.v * o.v, self.t * o.v + self.v * o.t)
        return Dual(self.v * o, self.t * o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        if isinstance(o, Dual):
            q = self.v / o.v
            return Dual(q, (self.t - q * o.t) / o.v)
        return Dual(self.v / o, self.t / o)

    def __rtruediv__(self, o):
        q = o / self.v
        return Dual(q, -q * self.t / self.v)

    def __matmul__(self, o):
        if isinstance(o, Dual):
            return Dual(self.v @ o.v, self.t @ o.v + self.v @ o.t)
        return Dual(self.v @ o, self.t @ o)

    def __rmatmul__(self, o):
        return Dual(o @ self.v, o @ self.t)


def val(x) -> np.ndarray:
    """Value part of a Dual, or the array itself."""
    return x.v if isinstance(x, Dual) else np.asarray(x, dtype=np.float64)


def tan(x) -> np.ndarray:
    """Tangent part of a Dual; zeros for a plain array."""
    if isinstance(x, Dual):
        return x.t
    return np.zeros_like(np.asarray(x, dtype=np.float64))


# -- elementwise functions --------------------------------------------------


def exp(x):
    if isinstance(x, Dual):
        e = np.exp(x.v)
        return Dual(e, e * x.t)
    return np.exp(x)


def log(x):
    if isinstance(x, Dual):
        return Dual(np.log(x.v), x.t / x.v)
    return np.log(x)


def sqrt(x):
    if isinstance(x, Dual):
        s = np.sqrt(x.v)
        return Dual(s, 0.5 * x.t / s)
    return np.sqrt(x)


def tanh(x):
    if isinstance(x, Dual):
        h = np.tanh(x.v)
        return Dual(h, (1.0 - h * h) * x.t)
    return np.tanh(x)


def relu(x):
    mask = val(x) > 0.0
    if isinstance(x, Dual):
        return Dual(np.where(mask, x.v, 0.0), np.where(mask, x.t, 0.0))
    return np.where(mask, x, 0.0)


def where_mask(mask, x):
    """x gated by a boolean mask (zero elsewhere); mask is a constant."""
    if isinstance(x, Dual):
        return Dual(np.where(mask, x.v, 0.0), np.where(mask, x.t, 0.0))
    return np.where(mask, x, 0.0)


# -- reductions / shaping ----------------------------------------------------


def asum(x, axis=None, keepdims=False):
    if isinstance(x, Dual):
        return Dual(
            np.sum(x.v, axis=axis, keepdims=keepdims),
            np.sum(x.t, axis=axis, keepdims=keepdims),
        )
    return np.sum(x, axis=axis, keepdims=keepdims)


def amean(x, axis=None, keepdims=False):
    if isinstance(x, Dual):
        return Dual(
            np.mean(x.v, axis=axis, keepdims=keepdims),
            np.mean(x.t, axis=axis, keepdims=keepdims),
        )
    return np.mean(x, axis=axis, keepdims=keepdims)


def reshape(x, shape):
    if isinstance(x, Dual):
        return Dual(x.v.reshape(shape), np.ascontiguousarray(x.t).reshape(shape))
    return np.reshape(x, shape)


def take_per_row(x, idx):
    """x[i, idx[i]] for each row i."""
    rows = np.arange(val(x).shape[0])
    if isinstance(x, Dual):
        return Dual(x.v[rows, idx], x.t[rows, idx])
    return x[rows, idx]


def rowmax_const(x) -> np.ndarray:
    """Per-row max of the value, detached (constant, zero tangent).

    Subtracting it from softmax inputs is analytically a no-op, so
    treating it as a constant keeps all derivatives exact.
    """
    return np.max(val(x), axis=1, keepdims=True)
