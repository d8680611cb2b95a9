"""Minimal SVG line plots of score traces (no plotting library needed)."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

import numpy as np

from .detector import ScoreTrace


def trace_svg(
    trace: ScoreTrace,
    threshold: float | None = None,
    onset_sample: int | None = None,
    title: str = "",
    width: int = 720,
    height: int = 240,
) -> str:
    pad = 36
    x = trace.samples.astype(float)
    ys = [trace.raw, trace.smoothed]
    finite = np.concatenate([y[np.isfinite(y)] for y in ys])
    lo, hi = float(finite.min()), float(finite.max())
    if threshold is not None and math.isfinite(threshold):
        lo, hi = min(lo, threshold), max(hi, threshold)
    if hi == lo:
        hi = lo + 1.0
    x0, x1 = float(x[0]), float(x[-1]) if len(x) > 1 else float(x[0]) + 1.0

    def px(v):
        return pad + (v - x0) / (x1 - x0) * (width - 2 * pad)

    def py(v):
        return height - pad - (v - lo) / (hi - lo) * (height - 2 * pad)

    def polyline(y, colour, w):
        pts = " ".join(f"{px(a):.1f},{py(b):.1f}" for a, b in zip(x, y))
        return f'<polyline fill="none" stroke="{colour}" stroke-width="{w}" points="{pts}"/>'

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{pad}" y="20" font-size="12">{escape(title)}</text>',
        polyline(trace.raw, "#bbbbbb", 1),
        polyline(trace.smoothed, "#1f77b4", 1.5),
    ]
    if threshold is not None and math.isfinite(threshold):
        parts.append(f'<line x1="{pad}" x2="{width - pad}" y1="{py(threshold):.1f}" '
                     f'y2="{py(threshold):.1f}" stroke="#d62728" stroke-dasharray="4 3"/>')
    if onset_sample is not None and x0 <= onset_sample <= x1:
        parts.append(f'<line x1="{px(onset_sample):.1f}" x2="{px(onset_sample):.1f}" y1="{pad}" '
                     f'y2="{height - pad}" stroke="#2ca02c"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
