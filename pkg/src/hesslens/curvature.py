"""Gradients and matrix-free curvature products.

Hessian-vector products are exact: the hand-written gradient computation
in :mod:`hesslens.models` is evaluated on forward-mode duals seeded with
the direction, so the tangent of the gradient is H v (directional
derivative of the gradient, never finite differences). Finite differences
appear only as test oracles.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dual as D
from .models import (
    BatchNormState,
    Dataset,
    DeepLinearModel,
    ModelSpec,
    ParamVector,
    blocks_from_flat,
    ce_pieces,
    deep_linear_hessian,
    flat_from_blocks,
    net_backward,
    net_forward,
    param_count,
)

__all__ = [
    "CurvatureContext",
    "GGNOperator",
    "HessianOperator",
    "LinearOperator",
    "MatrixOperator",
    "NonFiniteError",
    "exact_hessian",
    "fd_gradient",
    "fd_hvp",
    "ggn_vp",
    "gradient",
    "hvp",
    "loss_value",
]

EXACT_HESSIAN_CAP = 2000


class NonFiniteError(FloatingPointError):
    """A loss or curvature evaluation produced a non-finite value."""


@dataclass
class CurvatureContext:
    """Everything a curvature evaluation depends on, frozen up front.

    The dataset is traversed in a fixed contiguous batch order and
    accumulated sequentially, so repeated evaluations are bit-identical.
    ``mu`` is the L2 coefficient entering both the gradient and (as a
    ``mu * I`` shift) the Hessian product; build a context with ``mu=0``
    to measure the data term alone.
    """

    spec: ModelSpec
    params: ParamVector
    bn_state: BatchNormState
    dataset: Dataset
    mode: str = "train"
    mu: float = 0.0
    batch_size: int | None = None

    def __post_init__(self):
        if self.mu < 0:
            raise ValueError("mu must be nonnegative")
        if self.mode not in ("train", "eval"):
            raise ValueError(f"bad mode {self.mode!r}")

    @property
    def dim(self) -> int:
        return self.params.size

    def batches(self):
        n = self.dataset.n
        step = n if self.batch_size is None else int(self.batch_size)
        for start in range(0, n, step):
            yield start // step, slice(start, min(start + step, n))


def _check_finite(arr, what: str, batch_index: int):
    if not np.all(np.isfinite(D.val(arr))):
        raise NonFiniteError(f"non-finite {what} in batch {batch_index}")
    if isinstance(arr, D.Dual) and not np.all(np.isfinite(arr.t)):
        raise NonFiniteError(f"non-finite {what} tangent in batch {batch_index}")


def _accumulate(ctx: CurvatureContext, flat_params, want_tangent: bool):
    """Weighted sum of per-batch mean-loss gradients (value and tangent)."""
    n_total = ctx.dataset.n
    total_val = np.zeros(ctx.dim)
    total_tan = np.zeros(ctx.dim)
    total_loss = 0.0
    blocks = blocks_from_flat(ctx.spec, flat_params)
    for k, sl in ctx.batches():
        x = ctx.dataset.inputs[sl]
        y = ctx.dataset.labels[sl]
        logits, caches = net_forward(ctx.spec, blocks, ctx.bn_state, x, ctx.mode)
        _check_finite(logits, "logits", k)
        loss, _, dlogits = ce_pieces(logits, y)
        _check_finite(loss, "loss", k)
        grads = net_backward(ctx.spec, blocks, caches, dlogits, ctx.mode)
        gval, gtan = flat_from_blocks(ctx.spec, grads)
        weight = x.shape[0] / n_total
        total_val += weight * gval
        if want_tangent:
            total_tan += weight * gtan
        total_loss += weight * float(D.val(loss))
    return total_loss, total_val, total_tan


def loss_value(ctx: CurvatureContext, flat=None) -> float:
    """Mean loss over the configured dataset plus mu/2 ||w||^2."""
    w = ctx.params.flat if flat is None else np.asarray(flat, dtype=np.float64)
    n_total = ctx.dataset.n
    blocks = blocks_from_flat(ctx.spec, w)
    total = 0.0
    for k, sl in ctx.batches():
        logits, _ = net_forward(
            ctx.spec, blocks, ctx.bn_state, ctx.dataset.inputs[sl], ctx.mode
        )
        _check_finite(logits, "logits", k)
        loss, _, _ = ce_pieces(logits, ctx.dataset.labels[sl])
        total += (ctx.dataset.inputs[sl].shape[0] / n_total) * float(D.val(loss))
    return total + 0.5 * ctx.mu * float(np.dot(w, w))


def gradient(ctx: CurvatureContext) -> np.ndarray:
    """Gradient of [mean loss + mu/2 ||w||^2] at ctx.params."""
    loss, gval, _ = _accumulate(ctx, ctx.params.flat, want_tangent=False)
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite total loss")
    return gval + ctx.mu * ctx.params.flat


def hvp(ctx: CurvatureContext, v) -> np.ndarray:
    """Exact (H + mu I) v with H the Hessian of the mean loss."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (ctx.dim,):
        raise ValueError(f"direction must have shape ({ctx.dim},)")
    dual_w = D.Dual(ctx.params.flat, v)
    _, _, gtan = _accumulate(ctx, dual_w, want_tangent=True)
    return gtan + ctx.mu * v


def ggn_vp(ctx: CurvatureContext, v) -> np.ndarray:
    """Generalized Gauss-Newton product J^T (diag(p) - p p^T) J v, averaged
    over samples. Positive semi-definite for cross-entropy."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (ctx.dim,):
        raise ValueError(f"direction must have shape ({ctx.dim},)")
    n_total = ctx.dataset.n
    dual_blocks = blocks_from_flat(ctx.spec, D.Dual(ctx.params.flat, v))
    plain_blocks = blocks_from_flat(ctx.spec, ctx.params.flat)
    total = np.zeros(ctx.dim)
    for k, sl in ctx.batches():
        x = ctx.dataset.inputs[sl]
        y = ctx.dataset.labels[sl]
        logits, _ = net_forward(ctx.spec, dual_blocks, ctx.bn_state, x, ctx.mode)
        _check_finite(logits, "logits", k)
        _, probs, _ = ce_pieces(logits, y)
        p = D.val(probs)
        jv = logits.t
        hz_jv = p * jv - p * np.sum(p * jv, axis=1, keepdims=True)
        # plain backward pass with the curvature-weighted cotangent
        _, caches = net_forward(ctx.spec, plain_blocks, ctx.bn_state, x, ctx.mode)
        grads = net_backward(
            ctx.spec, plain_blocks, caches, hz_jv / x.shape[0], ctx.mode
        )
        gval, _ = flat_from_blocks(ctx.spec, grads)
        total += (x.shape[0] / n_total) * gval
    return total


def softmax_hessian(p: np.ndarray) -> np.ndarray:
    """Loss Hessian in logit space for one sample: diag(p) - p p^T."""
    return np.diag(p) - np.outer(p, p)


def exact_hessian(ctx: CurvatureContext, cap: int = EXACT_HESSIAN_CAP) -> np.ndarray:
    """Dense Hessian assembled column-wise from hvp(e_j).

    Only for small models: the quadratic cost is the reason the rest of
    the package is matrix-free. Refuses above ``cap`` parameters.
    """
    p = ctx.dim
    if p > cap:
        raise ValueError(f"exact Hessian refused: {p} parameters exceeds cap {cap}")
    h = np.zeros((p, p))
    e = np.zeros(p)
    for j in range(p):
        e[j] = 1.0
        h[:, j] = hvp(ctx, e)
        e[j] = 0.0
    return h


# ---------------------------------------------------------------------------
# Symmetric linear operators
# ---------------------------------------------------------------------------


class LinearOperator:
    """Symmetric operator defined by its dimension and apply(v)."""

    def __init__(self, dim: int):
        self.dim = int(dim)

    def apply(self, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, v: np.ndarray) -> np.ndarray:
        return self.apply(v)


class MatrixOperator(LinearOperator):
    def __init__(self, matrix: np.ndarray):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ValueError("need a square matrix")
        super().__init__(matrix.shape[0])
        self.matrix = matrix

    def apply(self, v):
        return self.matrix @ v


class DiagonalOperator(LinearOperator):
    def __init__(self, diag: np.ndarray):
        diag = np.asarray(diag, dtype=np.float64)
        super().__init__(diag.size)
        self.diag = diag

    def apply(self, v):
        return self.diag * v


class HessianOperator(LinearOperator):
    def __init__(self, ctx: CurvatureContext):
        super().__init__(ctx.dim)
        self.ctx = ctx

    def apply(self, v):
        return hvp(self.ctx, v)


class GGNOperator(LinearOperator):
    def __init__(self, ctx: CurvatureContext):
        super().__init__(ctx.dim)
        self.ctx = ctx

    def apply(self, v):
        return ggn_vp(self.ctx, v)


# ---------------------------------------------------------------------------
# Chain-model adapters
# ---------------------------------------------------------------------------


def deep_linear_gradient_ad(model: DeepLinearModel) -> np.ndarray:
    """Gradient of the chain loss by forward-mode differentiation.

    Independent route for cross-checking the closed-form gradient.
    """
    d = model.depth
    g = np.zeros(d)
    for i in range(d):
        prod = D.Dual(np.float64(1.0), np.float64(0.0))
        for k in range(d):
            prod = prod * D.Dual(model.weights[k], 1.0 if k == i else 0.0)
        loss = D.exp(prod * model.x)
        g[i] = float(loss.t)
    return g


def deep_linear_operator(model: DeepLinearModel) -> "MatrixOperator":
    """The chain model's rank-one curvature form as a symmetric operator."""
    h, _, _ = deep_linear_hessian(model)
    return MatrixOperator(h)


# ---------------------------------------------------------------------------
# Finite-difference oracles (test-only reference paths)
# ---------------------------------------------------------------------------


def fd_gradient(ctx: CurvatureContext, step: float | None = None) -> np.ndarray:
    """Central-difference gradient of loss_value; O(P) loss evaluations."""
    w = ctx.params.flat
    h = step if step is not None else 1e-4 * (1.0 + float(np.linalg.norm(w)))
    g = np.zeros(w.size)
    for j in range(w.size):
        wp = w.copy()
        wm = w.copy()
        wp[j] += h
        wm[j] -= h
        g[j] = (loss_value(ctx, wp) - loss_value(ctx, wm)) / (2.0 * h)
    return g


def fd_hvp(ctx: CurvatureContext, v, step: float | None = None) -> np.ndarray:
    """Central difference of the gradient along v (oracle for hvp)."""
    v = np.asarray(v, dtype=np.float64)
    w = ctx.params.flat
    h = step if step is not None else 1e-4 * (1.0 + float(np.linalg.norm(w)))

    def grad_at(flat):
        shifted = CurvatureContext(
            ctx.spec,
            ParamVector(flat, ctx.params.layout),
            ctx.bn_state,
            ctx.dataset,
            ctx.mode,
            ctx.mu,
            ctx.batch_size,
        )
        return gradient(shifted)

    return (grad_at(w + h * v) - grad_at(w - h * v)) / (2.0 * h)
