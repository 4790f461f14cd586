"""Static SVG charts written as plain markup.

Output is a pure function of the inputs: numbers are formatted with fixed
precision so identical data gives identical bytes.
"""
from __future__ import annotations

import math
from typing import Sequence
from xml.sax.saxutils import escape

WIDTH = 640
HEIGHT = 400
MARGIN = (40, 30, 60, 70)  # top, right, bottom, left
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _f(v: float) -> str:
    return f"{v:.2f}"


def _nice_max(v: float) -> float:
    """Smallest 1, 2, 2.5, 5 or 10 times a power of ten that is >= v."""
    if v <= 0:
        return 1.0
    mag = 10.0 ** math.floor(math.log10(v))
    for step in (1, 2, 2.5, 5, 10):
        if step * mag >= v:
            return step * mag
    return 10 * mag


class _Canvas:
    def __init__(self, title: str, provenance: dict | None):
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">'
        ]
        if provenance:
            meta = " ".join(f"{k}={provenance[k]}" for k in sorted(provenance))
            self.parts.append(f"<metadata>{escape(meta)}</metadata>")
        self.parts.append(f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>')
        self.parts.append(f'<text x="{WIDTH / 2:.0f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>')
        top, right, bottom, left = MARGIN
        self.x0, self.x1 = left, WIDTH - right
        self.y0, self.y1 = HEIGHT - bottom, top

    def add(self, s: str) -> None:
        self.parts.append(s)

    def axes(self, xlabel: str, ylabel: str, ymin: float, ymax: float, ticks: int = 5) -> None:
        self.ymin, self.ymax = ymin, ymax
        self.add(f'<line x1="{self.x0}" y1="{self.y0}" x2="{self.x1}" y2="{self.y0}" stroke="black"/>')
        self.add(f'<line x1="{self.x0}" y1="{self.y0}" x2="{self.x0}" y2="{self.y1}" stroke="black"/>')
        for k in range(ticks + 1):
            v = ymin + (ymax - ymin) * k / ticks
            y = self.sy(v)
            self.add(f'<line x1="{self.x0 - 4}" y1="{_f(y)}" x2="{self.x0}" y2="{_f(y)}" stroke="black"/>')
            self.add(f'<text x="{self.x0 - 6}" y="{_f(y + 4)}" text-anchor="end">{v:.3g}</text>')
        self.add(f'<text x="{(self.x0 + self.x1) / 2:.0f}" y="{HEIGHT - 15}" text-anchor="middle">{escape(xlabel)}</text>')
        self.add(f'<text x="15" y="{(self.y0 + self.y1) / 2:.0f}" text-anchor="middle" '
                 f'transform="rotate(-90 15 {(self.y0 + self.y1) / 2:.0f})">{escape(ylabel)}</text>')

    def sy(self, v: float) -> float:
        span = (self.ymax - self.ymin) or 1.0
        return self.y0 - (v - self.ymin) / span * (self.y0 - self.y1)

    def svg(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def bar_chart(labels: Sequence[str], values: Sequence[float], title: str, xlabel: str = "", ylabel: str = "",
              provenance: dict | None = None, rotate: bool = False) -> str:
    c = _Canvas(title, provenance)
    top = _nice_max(max(values, default=0.0))
    c.axes(xlabel, ylabel, 0.0, top)
    n = max(1, len(values))
    slot = (c.x1 - c.x0) / n
    for i, (lab, v) in enumerate(zip(labels, values)):
        x = c.x0 + i * slot + 0.1 * slot
        y = c.sy(v)
        c.add(f'<rect x="{_f(x)}" y="{_f(y)}" width="{_f(0.8 * slot)}" height="{_f(c.y0 - y)}" fill="{PALETTE[0]}"/>')
        cx = x + 0.4 * slot
        if rotate:
            c.add(f'<text x="{_f(cx)}" y="{c.y0 + 10}" text-anchor="end" font-size="8" '
                  f'transform="rotate(-45 {_f(cx)} {c.y0 + 10})">{escape(lab)}</text>')
        else:
            c.add(f'<text x="{_f(cx)}" y="{c.y0 + 14}" text-anchor="middle">{escape(lab)}</text>')
    return c.svg()


def hbar_chart(labels: Sequence[str], values: Sequence[float], title: str, provenance: dict | None = None) -> str:
    """Horizontal bars, first label on top (importance rankings)."""
    c = _Canvas(title, provenance)
    left = 230
    width = WIDTH - left - 30
    n = max(1, len(values))
    slot = (HEIGHT - 80) / n
    top = max(values, default=0.0) or 1.0
    for i, (lab, v) in enumerate(zip(labels, values)):
        y = 40 + i * slot
        c.add(f'<rect x="{left}" y="{_f(y + 0.1 * slot)}" width="{_f(width * v / top)}" '
              f'height="{_f(0.8 * slot)}" fill="{PALETTE[0]}"/>')
        c.add(f'<text x="{left - 6}" y="{_f(y + 0.65 * slot)}" text-anchor="end" font-size="9">{escape(lab[:40])}</text>')
        c.add(f'<text x="{_f(left + width * v / top + 4)}" y="{_f(y + 0.65 * slot)}" font-size="9">{v:.3f}</text>')
    return c.svg()


def line_chart(series: dict[str, Sequence[float]], title: str, xlabel: str = "", ylabel: str = "",
               provenance: dict | None = None, x_values: Sequence[float] | None = None) -> str:
    """Polylines sharing one x axis (index or ``x_values``); NaNs break nothing, they are skipped."""
    c = _Canvas(title, provenance)
    finite = [v for ys in series.values() for v in ys if v == v]
    lo = min(0.0, min(finite, default=0.0))
    c.axes(xlabel, ylabel, lo, _nice_max(max(finite, default=1.0)))
    n = max((len(ys) for ys in series.values()), default=1)
    xs = list(x_values) if x_values is not None else list(range(1, n + 1))
    xmin, xmax = min(xs, default=0), max(xs, default=1)
    span = (xmax - xmin) or 1

    def sx(v):
        return c.x0 + (v - xmin) / span * (c.x1 - c.x0)

    for k, (name, ys) in enumerate(series.items()):
        pts = " ".join(f"{_f(sx(x))},{_f(c.sy(y))}" for x, y in zip(xs, ys) if y == y)
        color = PALETTE[k % len(PALETTE)]
        c.add(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        c.add(f'<text x="{c.x1 - 120}" y="{50 + 14 * k}" fill="{color}">{escape(name)}</text>')
    for x in xs[:: max(1, len(xs) // 10)]:
        c.add(f'<text x="{_f(sx(x))}" y="{c.y0 + 14}" text-anchor="middle">{x:g}</text>')
    return c.svg()
