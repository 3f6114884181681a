"""Minimal SVG line plots: axes, tick labels, legend and optional log scales."""
from __future__ import annotations

import math
from html import escape
from typing import Dict, List, Sequence, Tuple

_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"]


def _ticks(lo: float, hi: float, log: bool) -> List[float]:
    if log:
        a, b = math.floor(lo), math.ceil(hi)
        return [float(k) for k in range(a, b + 1)]
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / 5.0
    mag = 10.0 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = math.ceil(lo / step) * step
    out = []
    v = start
    while v <= hi + 1e-12 * step:
        out.append(v)
        v += step
    return out


def line_plot(
    curves: Dict[str, Sequence[Tuple[float, float]]],
    title: str = "",
    xlabel: str = "x",
    ylabel: str = "y",
    logx: bool = False,
    logy: bool = False,
    width: int = 640,
    height: int = 420,
) -> str:
    """Render ``{label: [(x, y), ...]}`` as an SVG document string.

    Points with non-positive coordinates on a log axis are dropped.
    """
    left, right, top, bottom = 70, 160, 40, 50
    pw, ph = width - left - right, height - top - bottom

    def tx(v):
        return math.log10(v) if logx else v

    def ty(v):
        return math.log10(v) if logy else v

    clean = {}
    for name, pts in curves.items():
        keep = [(tx(x), ty(y)) for x, y in pts if (not logx or x > 0) and (not logy or y > 0)]
        if keep:
            clean[name] = keep
    xs = [p[0] for pts in clean.values() for p in pts] or [0.0, 1.0]
    ys = [p[1] for pts in clean.values() for p in pts] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def sx(v):
        return left + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return top + ph - (v - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{left + pw / 2:.1f}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for v in _ticks(x0, x1, logx):
        if x0 <= v <= x1:
            label = f"1e{int(v)}" if logx else f"{v:.3g}"
            out.append(f'<line x1="{sx(v):.1f}" y1="{top + ph}" x2="{sx(v):.1f}" y2="{top + ph + 4}" stroke="black"/>')
            out.append(f'<text x="{sx(v):.1f}" y="{top + ph + 16}" text-anchor="middle">{label}</text>')
    for v in _ticks(y0, y1, logy):
        if y0 <= v <= y1:
            label = f"1e{int(v)}" if logy else f"{v:.3g}"
            out.append(f'<line x1="{left - 4}" y1="{sy(v):.1f}" x2="{left}" y2="{sy(v):.1f}" stroke="black"/>')
            out.append(f'<text x="{left - 6}" y="{sy(v) + 4:.1f}" text-anchor="end">{label}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(
        f'<text x="15" y="{top + ph / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 15 {top + ph / 2:.1f})">{escape(ylabel)}</text>'
    )
    for k, (name, pts) in enumerate(clean.items()):
        color = _COLORS[k % len(_COLORS)]
        path = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{path}"/>')
        ly = top + 12 + 16 * k
        out.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 30}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 35}" y="{ly + 4}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
