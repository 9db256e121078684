"""Plot-data emission: CSV series and a minimal SVG stem plot.

The SVG output is intentionally bare (fixed-size stem plot, log-scaled
weight axis) and generated by string templating so it stays
byte-deterministic.
"""

from __future__ import annotations

import math

from ..sharpness import SharpnessReport
from ..slq import RitzSpectrum

__all__ = [
    "degeneracy_series_csv",
    "history_series_csv",
    "spectrum_stem_csv",
    "spectrum_stem_svg",
]


def spectrum_stem_csv(spectrum: RitzSpectrum) -> str:
    lines = ["node,weight"]
    for node, weight in zip(spectrum.nodes, spectrum.weights):
        lines.append(f"{node!r},{weight!r}")
    return "\n".join(lines) + "\n"


def history_series_csv(history: list) -> str:
    """Two-series plot data: test error and weight norm per epoch."""
    lines = ["epoch,test_error,weight_norm"]
    for row in history:
        acc = row["test_acc"]
        err = 1.0 - acc if not math.isnan(acc) else math.nan
        lines.append(f"{row['epoch']},{err!r},{row['weight_norm']!r}")
    return "\n".join(lines) + "\n"


def degeneracy_series_csv(rows: list) -> str:
    """rows: (epoch, SharpnessReport) pairs for per-epoch tracking."""
    lines = ["epoch,degeneracy_ratio,degeneracy_node_value"]
    for epoch, report in rows:
        lines.append(
            f"{epoch},{report.degeneracy_ratio!r},{report.degeneracy_node_value!r}"
        )
    return "\n".join(lines) + "\n"


_SVG_W, _SVG_H, _PAD = 640, 360, 45
_WEIGHT_FLOOR = 1e-12


def spectrum_stem_svg(spectrum: RitzSpectrum, title: str = "spectral density") -> str:
    """Stem plot of (node, weight) atoms; weight axis is log10."""
    nodes = [float(x) for x in spectrum.nodes]
    weights = [max(float(w), 0.0) for w in spectrum.weights]
    lo, hi = min(nodes), max(nodes)
    if hi == lo:
        lo, hi = lo - 1.0, hi + 1.0
    span = hi - lo
    lo -= 0.05 * span
    hi += 0.05 * span

    def sx(x):
        return _PAD + (x - lo) / (hi - lo) * (_SVG_W - 2 * _PAD)

    ymin_exp = math.floor(math.log10(_WEIGHT_FLOOR))
    ymax_exp = 0.0

    def sy(w):
        e = math.log10(max(w, _WEIGHT_FLOOR))
        frac = (e - ymin_exp) / (ymax_exp - ymin_exp)
        return _SVG_H - _PAD - frac * (_SVG_H - 2 * _PAD)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_W}" height="{_SVG_H}">',
        f'<rect width="{_SVG_W}" height="{_SVG_H}" fill="white"/>',
        f'<text x="{_SVG_W // 2}" y="20" text-anchor="middle" '
        f'font-family="monospace" font-size="13">{title}</text>',
        f'<line x1="{_PAD}" y1="{_SVG_H - _PAD}" x2="{_SVG_W - _PAD}" '
        f'y2="{_SVG_H - _PAD}" stroke="black"/>',
        f'<line x1="{_PAD}" y1="{_PAD}" x2="{_PAD}" y2="{_SVG_H - _PAD}" '
        f'stroke="black"/>',
    ]
    base = _SVG_H - _PAD
    for x, w in zip(nodes, weights):
        if w <= 0.0:
            continue
        px, py = sx(x), sy(w)
        parts.append(
            f'<line x1="{px:.2f}" y1="{base}" x2="{px:.2f}" y2="{py:.2f}" '
            f'stroke="steelblue" stroke-width="1.5"/>'
        )
        parts.append(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="2.5" fill="steelblue"/>')
    parts.append(
        f'<text x="{_SVG_W - _PAD}" y="{_SVG_H - _PAD + 18}" text-anchor="end" '
        f'font-family="monospace" font-size="11">node value</text>'
    )
    parts.append(
        f'<text x="{_PAD - 30}" y="{_PAD - 8}" font-family="monospace" '
        f'font-size="11">log10 w</text>'
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
