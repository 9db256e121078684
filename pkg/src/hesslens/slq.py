"""Stochastic Lanczos quadrature on symmetric linear operators.

``lanczos`` runs the three-term recurrence with full reorthogonalization
(two Gram-Schmidt passes per step) and turns the resulting tridiagonal
matrix into Gauss quadrature nodes (Ritz values) and weights (squared
first eigenvector components). ``spectral_density`` pools several
random-probe runs into a discrete spectral-density estimate, from which
``moment_estimates`` reads off trace, squared Frobenius norm and the
extremal eigenvalues.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .curvature import LinearOperator
from .linalg import Rng, SymTridiag, gaussian, rademacher, sym_tridiag_eigen

__all__ = [
    "LanczosResult",
    "MomentEstimates",
    "OperatorSymmetryError",
    "RitzSpectrum",
    "lanczos",
    "moment_estimates",
    "spectral_density",
    "spectrum_from_json",
    "spectrum_to_json",
]

BREAKDOWN_RTOL = 1e-12
SYMMETRY_RTOL = 1e-8


class OperatorSymmetryError(ValueError):
    """The sampled symmetry check u'Av == v'Au failed."""


@dataclass
class LanczosResult:
    tridiag: SymTridiag
    ritz_nodes: np.ndarray  # ascending
    ritz_weights: np.ndarray  # squared first components, sum to 1
    seed: int | None
    m_effective: int
    ortho_residual: float


@dataclass
class RitzSpectrum:
    """Pooled multi-seed quadrature rule: an atom list approximating the
    operator's spectral density."""

    results: list
    nodes: np.ndarray
    weights: np.ndarray
    dim: int
    m: int
    num_seeds: int
    probe: str
    base_seed: int


def check_operator_symmetry(op: LinearOperator, seed: int = 0, pairs: int = 2):
    rng = Rng(seed).child(0xC0FFEE)
    for _ in range(pairs):
        u = gaussian(rng, op.dim)
        v = gaussian(rng, op.dim)
        au = op.apply(u)
        av = op.apply(v)
        left = float(u @ av)
        right = float(v @ au)
        scale = max(abs(left), abs(right), 1e-300)
        if abs(left - right) > SYMMETRY_RTOL * max(scale, 1.0):
            raise OperatorSymmetryError(
                f"operator not symmetric: u'Av={left!r} vs v'Au={right!r}"
            )


def lanczos(
    op: LinearOperator,
    v0: np.ndarray,
    m: int,
    seed: int | None = None,
    check_symmetry: bool = True,
) -> LanczosResult:
    """m-step Lanczos with full reorthogonalization at every step.

    Early termination when beta underflows relative to the running
    operator-norm estimate counts as finding an exact invariant subspace,
    not a failure; ``m_effective`` records the realized step count.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    v0 = np.asarray(v0, dtype=np.float64)
    nrm = float(np.linalg.norm(v0))
    if nrm == 0.0 or v0.shape != (op.dim,):
        raise ValueError("v0 must be a nonzero vector of the operator dimension")
    if check_symmetry:
        check_operator_symmetry(op, seed=0 if seed is None else seed)

    q = v0 / nrm
    basis = [q]
    alphas: list[float] = []
    betas: list[float] = []
    scale_est = 0.0
    for j in range(m):
        w = op.apply(basis[j])
        if not np.all(np.isfinite(w)):
            raise FloatingPointError(f"operator produced non-finite output at step {j}")
        alpha = float(basis[j] @ w)
        alphas.append(alpha)
        w = w - alpha * basis[j]
        if j > 0:
            w = w - betas[j - 1] * basis[j - 1]
        qmat = np.stack(basis, axis=1)
        for _ in range(2):  # twice-is-enough Gram-Schmidt
            w = w - qmat @ (qmat.T @ w)
        beta = float(np.linalg.norm(w))
        scale_est = max(scale_est, abs(alpha) + beta + (betas[-1] if betas else 0.0))
        if j == m - 1:
            break
        if beta <= BREAKDOWN_RTOL * max(scale_est, 1e-300):
            break
        betas.append(beta)
        basis.append(w / beta)

    m_eff = len(alphas)
    qmat = np.stack(basis, axis=1)
    gram = qmat.T @ qmat
    ortho_residual = float(np.max(np.abs(gram - np.eye(m_eff))))
    tri = SymTridiag(np.array(alphas), np.array(betas[: m_eff - 1]))
    nodes, firsts = sym_tridiag_eigen(tri)
    weights = firsts * firsts
    return LanczosResult(tri, nodes, weights, seed, m_eff, ortho_residual)


def _probe(kind: str, rng: Rng, n: int) -> np.ndarray:
    if kind == "rademacher":
        return rademacher(rng, n)
    if kind == "gaussian":
        return gaussian(rng, n)
    raise ValueError(f"unknown probe kind {kind!r}")


def spectral_density(
    op: LinearOperator,
    m: int,
    num_seeds: int = 1,
    probe: str = "rademacher",
    seed: int = 0,
    check_symmetry: bool = True,
) -> RitzSpectrum:
    """Average the quadrature rules of ``num_seeds`` random probes."""
    if num_seeds < 1:
        raise ValueError("num_seeds must be >= 1")
    base = Rng(seed)
    results = []
    all_nodes = []
    all_weights = []
    for s in range(num_seeds):
        v0 = _probe(probe, base.child(s), op.dim)
        res = lanczos(op, v0, m, seed=s, check_symmetry=check_symmetry and s == 0)
        results.append(res)
        all_nodes.append(res.ritz_nodes)
        all_weights.append(res.ritz_weights / num_seeds)
    nodes = np.concatenate(all_nodes)
    weights = np.concatenate(all_weights)
    order = np.argsort(nodes, kind="stable")
    return RitzSpectrum(
        results=results,
        nodes=nodes[order],
        weights=weights[order],
        dim=op.dim,
        m=m,
        num_seeds=num_seeds,
        probe=probe,
        base_seed=seed,
    )


@dataclass(frozen=True)
class MomentEstimates:
    trace: float
    frob_sq: float  # estimates Tr(H^2) = ||H||_F^2
    lambda_max: float
    lambda_min: float


def moment_estimates(spectrum: RitzSpectrum) -> MomentEstimates:
    """Trace / Frobenius / extremal-eigenvalue estimates from the pooled rule.

    trace = P * sum w_j t_j, frob_sq = P * sum w_j t_j^2; the extremal
    Ritz nodes are inner bounds on the true extremal eigenvalues.
    """
    if spectrum.nodes.size == 0:
        raise ValueError("empty spectrum")
    t, w = spectrum.nodes, spectrum.weights
    p = spectrum.dim
    return MomentEstimates(
        trace=float(p * np.sum(w * t)),
        frob_sq=float(p * np.sum(w * t * t)),
        lambda_max=float(np.max(t)),
        lambda_min=float(np.min(t)),
    )


def spectrum_to_json(spectrum: RitzSpectrum) -> str:
    doc = {
        "P": spectrum.dim,
        "m": spectrum.m,
        "probe": spectrum.probe,
        "base_seed": spectrum.base_seed,
        "seeds": [r.seed for r in spectrum.results],
        "m_effective": [r.m_effective for r in spectrum.results],
        "nodes": [float(x) for x in spectrum.nodes],
        "weights": [float(x) for x in spectrum.weights],
    }
    return json.dumps(doc, sort_keys=True)


def spectrum_from_json(text: str) -> RitzSpectrum:
    """Rehydrate the pooled rule (per-seed tridiagonals are not stored)."""
    doc = json.loads(text)
    return RitzSpectrum(
        results=[],
        nodes=np.asarray(doc["nodes"], dtype=np.float64),
        weights=np.asarray(doc["weights"], dtype=np.float64),
        dim=int(doc["P"]),
        m=int(doc["m"]),
        num_seeds=len(doc["seeds"]),
        probe=doc["probe"],
        base_seed=int(doc["base_seed"]),
    )
