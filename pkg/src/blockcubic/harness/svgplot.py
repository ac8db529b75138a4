"""Minimal static SVG line plots with an optional log-scaled y axis."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

__all__ = ["Series", "line_plot"]

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")
WIDTH, HEIGHT = 640, 420
LEFT, RIGHT, TOP, BOTTOM = 70, 170, 40, 50
MAX_POINTS = 2000


@dataclass
class Series:
    label: str
    x: Sequence[float]
    y: Sequence[float]


def _nice_ticks(lo: float, hi: float, count: int = 5) -> list:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / count
    mag = 10.0 ** math.floor(math.log10(raw))
    step = min((s * mag for s in (1, 2, 5, 10) if s * mag >= raw), default=10 * mag)
    start = math.ceil(lo / step) * step
    return [start + i * step for i in range(int((hi - start) / step + 1e-9) + 1)]


def _fmt_tick(v: float) -> str:
    return f"{v:.6g}"


def line_plot(series: Sequence[Series], title: str, xlabel: str, ylabel: str,
              logy: bool = False, markers: bool = False) -> str:
    """Render ``series`` as an SVG document string.

    With ``logy`` nonpositive and nonfinite values are dropped; otherwise only
    nonfinite ones are. Long series are thinned to ``MAX_POINTS`` evenly spaced
    points.
    """
    pts = []
    for s in series:
        x = np.asarray(s.x, dtype=float)
        y = np.asarray(s.y, dtype=float)
        keep = np.isfinite(x) & np.isfinite(y)
        if logy:
            keep &= y > 0
            y = np.where(keep, np.log10(np.where(keep, y, 1.0)), np.nan)
        x, y = x[keep], y[keep]
        if x.size > MAX_POINTS:
            pick = np.unique(np.linspace(0, x.size - 1, MAX_POINTS).astype(int))
            x, y = x[pick], y[pick]
        pts.append((x, y))
    xs = np.concatenate([p[0] for p in pts]) if pts else np.array([])
    ys = np.concatenate([p[1] for p in pts]) if pts else np.array([])
    if xs.size == 0:
        xs, ys = np.array([0.0, 1.0]), np.array([0.0, 1.0])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if logy:
        y0, y1 = math.floor(y0), math.ceil(y1)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def px(v):
        return LEFT + (v - x0) / (x1 - x0) * pw

    def py(v):
        return TOP + ph - (v - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{LEFT + pw / 2}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for t in _nice_ticks(x0, x1):
        X = px(t)
        out.append(f'<line x1="{X:.2f}" y1="{TOP + ph}" x2="{X:.2f}" y2="{TOP + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{X:.2f}" y="{TOP + ph + 18}" text-anchor="middle">{_fmt_tick(t)}</text>')
    if logy:
        # whole decades, at most about eight labels
        yt = list(range(int(y0), int(y1) + 1, max(1, math.ceil((y1 - y0) / 8))))
    else:
        yt = _nice_ticks(y0, y1)
    for t in yt:
        Y = py(t)
        label = f"1e{int(t)}" if logy else _fmt_tick(t)
        out.append(f'<line x1="{LEFT - 5}" y1="{Y:.2f}" x2="{LEFT + pw}" y2="{Y:.2f}" stroke="#ddd"/>')
        out.append(f'<text x="{LEFT - 8}" y="{Y + 4:.2f}" text-anchor="end">{label}</text>')
    out.append(f'<text x="{LEFT + pw / 2}" y="{HEIGHT - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text transform="translate(16 {TOP + ph / 2}) rotate(-90)" text-anchor="middle">'
               f'{escape(ylabel)}</text>')
    for i, (s, (x, y)) in enumerate(zip(series, pts)):
        color = PALETTE[i % len(PALETTE)]
        if x.size:
            coords = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, y))
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
            if markers:
                out.extend(f'<circle cx="{px(a):.2f}" cy="{py(b):.2f}" r="3" fill="{color}"/>'
                           for a, b in zip(x, y))
        ly = TOP + 14 + 18 * i
        out.append(f'<line x1="{LEFT + pw + 12}" y1="{ly}" x2="{LEFT + pw + 32}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{LEFT + pw + 38}" y="{ly + 4}">{escape(s.label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
