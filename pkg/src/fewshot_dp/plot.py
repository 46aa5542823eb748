"""Dependency-free SVG line charts with linear or log-log axes.

Output is a pure function of the input: coordinates are printed with fixed
precision and series colors come from a fixed palette in series order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
           "#bcbd22", "#17becf")
LOG_FLOOR = 1e-5
WIDTH, HEIGHT = 640, 440
MARGIN = {"left": 70, "right": 170, "top": 40, "bottom": 55}


@dataclass(frozen=True)
class Series:
    name: str
    x: Sequence[float]
    y: Sequence[float]


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.ceil(lo / step - 1e-9) * step
    ticks = []
    t = start
    while t <= hi + 1e-9 * step:
        ticks.append(round(t, 12))
        t += step
    return ticks


def _tick_label(v: float, log: bool) -> str:
    if log:
        return f"1e{int(round(math.log10(v)))}"
    return f"{v:g}"


def render_svg(
    series: Sequence[Series],
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
    loglog: bool = False,
    floor: float = LOG_FLOOR,
    diagonal: bool = False,
) -> str:
    """SVG document for ``series``; in log-log mode values below ``floor`` are raised to it."""
    if not series:
        raise ValueError("no series to plot")
    for s in series:
        if len(s.x) != len(s.y):
            raise ValueError(f"series {s.name!r}: x and y lengths differ")
        if len(s.x) < 2:
            raise ValueError(f"series {s.name!r} needs at least two points")

    def tx(v):
        return math.log10(max(float(v), floor)) if loglog else float(v)

    xs = [tx(v) for s in series for v in s.x]
    ys = [tx(v) for s in series for v in s.y]
    if loglog:
        x_lo, x_hi = math.log10(floor), max(0.0, max(xs))
        y_lo, y_hi = math.log10(floor), max(0.0, max(ys))
        xticks = [float(k) for k in range(int(math.floor(x_lo)), int(math.ceil(x_hi)) + 1)]
        yticks = [float(k) for k in range(int(math.floor(y_lo)), int(math.ceil(y_hi)) + 1)]
    else:
        x_lo, x_hi = min(xs), max(xs)
        y_lo, y_hi = min(ys), max(ys)
        if x_hi == x_lo:
            x_hi = x_lo + 1.0
        if y_hi == y_lo:
            y_hi = y_lo + 1.0
        xticks, yticks = _nice_ticks(x_lo, x_hi), _nice_ticks(y_lo, y_hi)
        x_lo, x_hi = min(x_lo, xticks[0]), max(x_hi, xticks[-1])
        y_lo, y_hi = min(y_lo, yticks[0]), max(y_hi, yticks[-1])

    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]
    px = lambda v: MARGIN["left"] + (v - x_lo) / (x_hi - x_lo) * pw
    py = lambda v: MARGIN["top"] + ph - (v - y_lo) / (y_hi - y_lo) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.2f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
    ]
    x0, y0 = MARGIN["left"], MARGIN["top"] + ph
    for t in xticks:
        X = px(t)
        out.append(f'<line x1="{_fmt(X)}" y1="{MARGIN["top"]}" x2="{_fmt(X)}" y2="{y0}" stroke="#e5e5e5"/>')
        label = _tick_label(10**t if loglog else t, loglog)
        out.append(f'<text x="{_fmt(X)}" y="{y0 + 18}" text-anchor="middle">{label}</text>')
    for t in yticks:
        Y = py(t)
        out.append(f'<line x1="{x0}" y1="{_fmt(Y)}" x2="{x0 + pw}" y2="{_fmt(Y)}" stroke="#e5e5e5"/>')
        label = _tick_label(10**t if loglog else t, loglog)
        out.append(f'<text x="{x0 - 8}" y="{_fmt(Y + 4)}" text-anchor="end">{label}</text>')
    out.append(f'<rect x="{x0}" y="{MARGIN["top"]}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    out.append(f'<text x="{x0 + pw / 2:.2f}" y="{HEIGHT - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(
        f'<text x="16" y="{MARGIN["top"] + ph / 2:.2f}" text-anchor="middle" '
        f'transform="rotate(-90 16 {MARGIN["top"] + ph / 2:.2f})">{escape(ylabel)}</text>'
    )
    if diagonal:
        lo, hi = max(x_lo, y_lo), min(x_hi, y_hi)
        out.append(
            f'<line x1="{_fmt(px(lo))}" y1="{_fmt(py(lo))}" x2="{_fmt(px(hi))}" y2="{_fmt(py(hi))}" '
            'stroke="#999999" stroke-dasharray="4 4"/>'
        )
    for i, s in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{_fmt(px(tx(a)))},{_fmt(py(tx(b)))}" for a, b in zip(s.x, s.y))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        ly = MARGIN["top"] + 14 + 18 * i
        lx = x0 + pw + 12
        out.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 20}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 26}" y="{ly}">{escape(s.name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_plot(series: Sequence[Series], path: str | Path, **kwargs) -> Path:
    """Render ``series`` (see ``render_svg``) and write the SVG to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(render_svg(series, **kwargs))
    return path
