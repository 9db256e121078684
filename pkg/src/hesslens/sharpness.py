"""Sharpness and rank-degeneracy summaries of a Ritz spectrum.

Spectral norm, trace, Frobenius norm and mean eigenvalue come straight
from the pooled quadrature rule. The degeneracy ratio follows the
closest-to-origin Ritz-node rule, optionally merging the two nodes
nearest the origin (mass near zero tends to split between adjacent
nodes for indefinite operators); the analytic rank bound for a
feed-forward classifier is 4 * d_y * (sum of neuron counts + d_x).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .slq import MomentEstimates, RitzSpectrum, moment_estimates

__all__ = [
    "RankBoundInput",
    "SharpnessReport",
    "degeneracy_ratio",
    "rank_bound",
    "report_csv_header",
    "report_csv_row",
    "report_to_json",
    "sharpness_report",
]

# nodes farther from the origin than this fraction of the spectral radius
# are not counted as zero-eigenvalue mass
ORIGIN_REL_TOL = 0.05

TRACE_CAVEAT_RTOL = 1e-6


@dataclass(frozen=True)
class RankBoundInput:
    d_x: int
    d_y: int
    neuron_counts: tuple  # per-layer neuron counts, output layer included
    num_params: int

    def __post_init__(self):
        counts = tuple(int(c) for c in self.neuron_counts)
        object.__setattr__(self, "neuron_counts", counts)
        if self.d_x < 1 or self.d_y < 1 or self.num_params < 1:
            raise ValueError("dimensions must be positive")
        if any(c < 1 for c in counts):
            raise ValueError("neuron counts must be positive")


def rank_bound(inp: RankBoundInput):
    """(bound, degeneracy_floor): bound = 4 d_y (sum N_l + d_x),
    floor = max(0, 1 - bound / P)."""
    bound = 4 * inp.d_y * (sum(inp.neuron_counts) + inp.d_x)
    floor = max(0.0, 1.0 - bound / inp.num_params)
    return bound, floor


def rank_bound_for_spec(spec, num_params: int):
    """Convenience: build the bound input from a ModelSpec."""
    counts = tuple(spec.hidden_widths) + (spec.output_dim,)
    return RankBoundInput(spec.input_dim, spec.output_dim, counts, num_params)


def _nearest_origin_rule(nodes: np.ndarray, weights: np.ndarray, merge: bool):
    order = sorted(range(nodes.size), key=lambda i: (abs(nodes[i]), nodes[i]))
    take = order[:2] if merge and nodes.size >= 2 else order[:1]
    mass = float(np.sum(weights[take]))
    if mass <= 0.0:
        return 0.0, float(nodes[take[0]])
    node = float(np.sum(weights[take] * nodes[take]) / mass)
    return mass, node


def degeneracy_ratio(spectrum: RitzSpectrum, merge: bool = True):
    """Mass assigned to the zero eigenvalue.

    merge=False: weight of the single node of smallest magnitude.
    merge=True: combined weight of the two smallest-magnitude nodes,
    reported at their weight-averaged position. Ties in magnitude break
    toward the more negative node.

    The rule applies to one quadrature rule at a time: for a multi-seed
    spectrum the per-seed ratios are averaged (pooling first would see
    one near-zero atom per seed and undercount). Spectra rehydrated
    without per-seed results fall back to the pooled atoms.
    """
    if spectrum.nodes.size == 0:
        raise ValueError("empty spectrum")
    if not spectrum.results:
        return _nearest_origin_rule(spectrum.nodes, spectrum.weights, merge)
    masses, nodes = [], []
    for res in spectrum.results:
        mass, node = _nearest_origin_rule(res.ritz_nodes, res.ritz_weights, merge)
        masses.append(mass)
        nodes.append(node)
    total = float(np.sum(masses))
    ratio = total / len(masses)
    if total <= 0.0:
        return 0.0, float(nodes[0])
    node = float(np.sum(np.asarray(nodes) * np.asarray(masses)) / total)
    return ratio, node


@dataclass
class SharpnessReport:
    lambda_max: float
    lambda_min: float
    trace: float
    frobenius: float
    mean_eigenvalue: float
    degeneracy_ratio: float
    degeneracy_node_value: float
    merged: bool
    rank_bound: int
    degeneracy_floor: float
    dim: int
    trace_caveat: bool
    context: dict = field(default_factory=dict)


def sharpness_report(
    spectrum: RitzSpectrum,
    bound_inp: RankBoundInput | None = None,
    context: dict | None = None,
    merge: bool | None = None,
    origin_rel_tol: float = ORIGIN_REL_TOL,
) -> SharpnessReport:
    """Assemble the full sharpness summary for one spectrum.

    ``merge`` defaults by operator kind recorded in the context: on for
    Hessians, off for the (positive semi-definite) Gauss-Newton, whose
    origin mass does not split. The trace carries a caveat flag when the
    spectrum has non-negligible negative mass.
    """
    context = dict(context or {})
    if merge is None:
        merge = context.get("operator", "hessian") != "ggn"
    est: MomentEstimates = moment_estimates(spectrum)
    radius = max(abs(est.lambda_max), abs(est.lambda_min))
    ratio, node = degeneracy_ratio(spectrum, merge=merge)
    if merge and radius > 0.0 and abs(node) > origin_rel_tol * radius:
        # merging grabbed a genuinely nonzero node; fall back to the
        # single nearest-origin node
        merge = False
        ratio, node = degeneracy_ratio(spectrum, merge=False)
    if radius > 0.0 and abs(node) > origin_rel_tol * radius:
        # nearest node is nowhere near the origin: no zero-eigenvalue mass
        ratio = 0.0
    if bound_inp is not None:
        bound, floor = rank_bound(bound_inp)
    else:
        bound, floor = 0, 0.0
    trace_caveat = est.lambda_min < -TRACE_CAVEAT_RTOL * max(est.lambda_max, 0.0)
    return SharpnessReport(
        lambda_max=est.lambda_max,
        lambda_min=est.lambda_min,
        trace=est.trace,
        frobenius=float(np.sqrt(max(est.frob_sq, 0.0))),
        mean_eigenvalue=est.trace / spectrum.dim,
        degeneracy_ratio=ratio,
        degeneracy_node_value=node,
        merged=merge,
        rank_bound=bound,
        degeneracy_floor=floor,
        dim=spectrum.dim,
        trace_caveat=trace_caveat,
        context=context,
    )


def report_to_json(report: SharpnessReport) -> str:
    doc = {
        "lambda_max": report.lambda_max,
        "lambda_min": report.lambda_min,
        "trace": report.trace,
        "frobenius": report.frobenius,
        "mean_eigenvalue": report.mean_eigenvalue,
        "degeneracy_ratio": report.degeneracy_ratio,
        "degeneracy_node_value": report.degeneracy_node_value,
        "merged": report.merged,
        "rank_bound": report.rank_bound,
        "degeneracy_floor": report.degeneracy_floor,
        "P": report.dim,
        "trace_caveat": report.trace_caveat,
        "context": report.context,
    }
    return json.dumps(doc, sort_keys=True)


_CSV_FIELDS = (
    "epoch",
    "lambda_max",
    "lambda_min",
    "trace",
    "frobenius",
    "mean_eigenvalue",
    "degeneracy_ratio",
    "degeneracy_node_value",
)


def report_csv_header() -> str:
    return ",".join(_CSV_FIELDS)


def report_csv_row(report: SharpnessReport, epoch: int | str = "") -> str:
    vals = [
        str(epoch),
        repr(report.lambda_max),
        repr(report.lambda_min),
        repr(report.trace),
        repr(report.frobenius),
        repr(report.mean_eigenvalue),
        repr(report.degeneracy_ratio),
        repr(report.degeneracy_node_value),
    ]
    return ",".join(vals)
