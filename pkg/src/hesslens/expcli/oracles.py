"""Reference-path checks runnable from the CLI.

Each oracle compares a package computation against an independent route:
dense eigendecomposition, central finite differences, or closed forms.
Returns machine-readable pass/fail entries with the measured error.
"""

from __future__ import annotations

import numpy as np

from ..curvature import (
    CurvatureContext,
    MatrixOperator,
    exact_hessian,
    fd_gradient,
    gradient,
    hvp,
)
from ..linalg import Rng, SymTridiag, gaussian, sym_tridiag_eigen
from ..models import (
    DeepLinearModel,
    Dataset,
    ModelSpec,
    deep_linear_hessian,
    deep_linear_loss,
    init_bn_state,
    init_params,
    rescale_pair,
)
from ..slq import lanczos

__all__ = ["oracle_suite"]


def _entry(name, error, tol):
    return {
        "name": name,
        "max_error": float(error),
        "tolerance": float(tol),
        "passed": bool(error <= tol),
    }


def _tridiag_oracle(rng: Rng):
    m = 80
    diag = gaussian(rng, m)
    off = np.abs(gaussian(rng, m - 1))
    tri = SymTridiag(diag, off)
    nodes, firsts = sym_tridiag_eigen(tri)
    dense = np.linalg.eigvalsh(tri.to_dense())
    err = float(np.max(np.abs(nodes - dense)))
    err = max(err, abs(float(np.sum(firsts**2)) - 1.0))
    return _entry("tridiag_eigen_vs_dense", err, 1e-10)


def _small_mlp_ctx(seed: int):
    spec = ModelSpec(input_dim=6, hidden_widths=(8,), output_dim=3)
    rng = Rng(seed)
    x = gaussian(rng.child(1), 24 * 6).reshape(24, 6)
    y = rng.child(2).integers(24, 3)
    ds = Dataset(x, y, num_classes=3)
    params = init_params(spec, rng.child(3))
    return CurvatureContext(spec, params, init_bn_state(spec), ds, mu=1e-3)


def _fd_gradient_oracle():
    ctx = _small_mlp_ctx(5)
    g = gradient(ctx)
    g_fd = fd_gradient(ctx)
    scale = max(float(np.linalg.norm(g)), 1e-12)
    return _entry("gradient_vs_finite_differences", np.linalg.norm(g - g_fd) / scale, 1e-6)


def _hvp_oracle():
    ctx = _small_mlp_ctx(9)
    h = exact_hessian(ctx)
    sym_err = float(np.max(np.abs(h - h.T)))
    v = gaussian(Rng(31), ctx.dim)
    err = float(np.max(np.abs(h @ v - hvp(ctx, v))))
    scale = max(float(np.max(np.abs(h))), 1e-12)
    return _entry("hvp_vs_assembled_hessian", max(err / scale, sym_err / scale), 1e-9)


def _deep_linear_oracle(rng: Rng):
    worst = 0.0
    for k in range(20):
        w = gaussian(rng, 4) * 0.8
        x = float(gaussian(rng, 1)[0])
        model = DeepLinearModel(w, x)
        h, tr, lam = deep_linear_hessian(model)
        evals = np.linalg.eigvalsh(h)
        scale = max(abs(lam), 1e-12)
        worst = max(worst, abs(evals[-1] - lam) / scale, abs(np.sum(evals) - tr) / scale)
        loss, _ = deep_linear_loss(model)
        loss2, _ = deep_linear_loss(rescale_pair(model, 0, 1, 3.0))
        worst = max(worst, abs(loss - loss2) / max(abs(loss), 1e-12))
    return _entry("deep_linear_closed_forms", worst, 1e-10)


def _lanczos_oracle(rng: Rng):
    p = 60
    a = gaussian(rng, p * p).reshape(p, p)
    a = 0.5 * (a + a.T)
    op = MatrixOperator(a)
    res = lanczos(op, gaussian(rng, p), p)
    dense = np.linalg.eigvalsh(a)
    err = float(np.max(np.abs(res.ritz_nodes - dense)))
    err = max(err, abs(float(np.sum(res.ritz_weights)) - 1.0))
    return _entry("lanczos_full_m_vs_dense", err, 1e-8)


def _moment_oracle(rng: Rng):
    p = 40
    a = gaussian(rng, p * p).reshape(p, p)
    a = 0.5 * (a + a.T)
    op = MatrixOperator(a)
    v0 = gaussian(rng, p)
    res = lanczos(op, v0, 12)
    vhat = v0 / np.linalg.norm(v0)
    worst = 0.0
    power = vhat.copy()
    for k in range(1, 9):
        power = a @ power
        exact = float(vhat @ power)
        quad = float(np.sum(res.ritz_weights * res.ritz_nodes**k))
        worst = max(worst, abs(quad - exact) / max(abs(exact), 1e-12))
    return _entry("quadrature_moment_matching_k8", worst, 1e-6)


def oracle_suite() -> dict:
    """Run every oracle; returns {'passed': bool, 'checks': [...]}."""
    rng = Rng(2024)
    checks = [
        _tridiag_oracle(rng.child(1)),
        _fd_gradient_oracle(),
        _hvp_oracle(),
        _deep_linear_oracle(rng.child(2)),
        _lanczos_oracle(rng.child(3)),
        _moment_oracle(rng.child(4)),
    ]
    return {"passed": all(c["passed"] for c in checks), "checks": checks}
