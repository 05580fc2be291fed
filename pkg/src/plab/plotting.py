"""Hand-written SVG figures with deterministic bytes.

Coordinates are printed with fixed precision and series are drawn in the
order given, so identical inputs always produce identical files.
"""

from __future__ import annotations

from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 640, 420
MARGIN = dict(left=70, right=20, top=40, bottom=55)
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")


def _f(v: float) -> str:
    return f"{v:.2f}"


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi == lo:
        return [lo]
    return list(np.linspace(lo, hi, n))


def _tick_label(v: float) -> str:
    if v == 0 or 1e-3 <= abs(v) < 1e4:
        return f"{v:.3g}"
    return f"{v:.2e}"


class Axes:
    def __init__(self, xlim, ylim, title: str, xlabel: str, ylabel: str):
        self.x0, self.x1 = self._pad(*xlim)
        self.y0, self.y1 = self._pad(*ylim)
        self.title, self.xlabel, self.ylabel = title, xlabel, ylabel
        self.items: list[str] = []

    @staticmethod
    def _pad(lo, hi):
        lo, hi = float(lo), float(hi)
        if hi <= lo:
            d = abs(lo) * 0.05 or 1.0
            return lo - d, hi + d
        return lo, hi

    def px(self, x) -> float:
        w = WIDTH - MARGIN["left"] - MARGIN["right"]
        return MARGIN["left"] + (float(x) - self.x0) / (self.x1 - self.x0) * w

    def py(self, y) -> float:
        h = HEIGHT - MARGIN["top"] - MARGIN["bottom"]
        return HEIGHT - MARGIN["bottom"] - (float(y) - self.y0) / (self.y1 - self.y0) * h

    def polyline(self, xs, ys, color: str, dash: str | None = None, width: float = 1.5):
        pts = " ".join(f"{_f(self.px(x))},{_f(self.py(y))}" for x, y in zip(xs, ys)
                       if np.isfinite(x) and np.isfinite(y))
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        self.items.append(f'<polyline fill="none" stroke="{color}" stroke-width="{width}"'
                          f'{extra} points="{pts}"/>')

    def points(self, xs, ys, color: str, r: float = 3.0):
        for x, y in zip(xs, ys):
            if np.isfinite(x) and np.isfinite(y):
                self.items.append(f'<circle cx="{_f(self.px(x))}" cy="{_f(self.py(y))}" '
                                  f'r="{r}" fill="{color}" fill-opacity="0.7"/>')

    def rect(self, x0, y0, x1, y1, color: str):
        a, b = self.px(x0), self.px(x1)
        c, d = self.py(y1), self.py(y0)
        self.items.append(f'<rect x="{_f(a)}" y="{_f(c)}" width="{_f(b - a)}" '
                          f'height="{_f(d - c)}" fill="{color}"/>')

    def text(self, x: float, y: float, s: str, size: int = 12, anchor: str = "start"):
        self.items.append(f'<text x="{_f(x)}" y="{_f(y)}" font-size="{size}" '
                          f'text-anchor="{anchor}">{escape(s)}</text>')

    def legend(self, entries: Sequence[tuple[str, str]]):
        for i, (label, color) in enumerate(entries):
            y = MARGIN["top"] + 14 + 16 * i
            x = WIDTH - MARGIN["right"] - 150
            self.items.append(f'<line x1="{x}" y1="{y - 4}" x2="{x + 18}" y2="{y - 4}" '
                              f'stroke="{color}" stroke-width="2"/>')
            self.text(x + 24, y, label, size=11)

    def render(self) -> str:
        l, r = MARGIN["left"], WIDTH - MARGIN["right"]
        t, b = MARGIN["top"], HEIGHT - MARGIN["bottom"]
        out = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif">',
            f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        ]
        out.extend(self.items)
        out.append(f'<rect x="{l}" y="{t}" width="{r - l}" height="{b - t}" fill="none" '
                   f'stroke="black"/>')
        for v in _ticks(self.x0, self.x1):
            x = self.px(v)
            out.append(f'<line x1="{_f(x)}" y1="{b}" x2="{_f(x)}" y2="{b + 5}" stroke="black"/>')
            out.append(f'<text x="{_f(x)}" y="{b + 18}" font-size="11" '
                       f'text-anchor="middle">{_tick_label(v)}</text>')
        for v in _ticks(self.y0, self.y1):
            y = self.py(v)
            out.append(f'<line x1="{l - 5}" y1="{_f(y)}" x2="{l}" y2="{_f(y)}" stroke="black"/>')
            out.append(f'<text x="{l - 8}" y="{_f(y + 4)}" font-size="11" '
                       f'text-anchor="end">{_tick_label(v)}</text>')
        out.append(f'<text x="{WIDTH / 2:.2f}" y="{t - 14}" font-size="14" '
                   f'text-anchor="middle">{escape(self.title)}</text>')
        out.append(f'<text x="{(l + r) / 2:.2f}" y="{HEIGHT - 12}" font-size="12" '
                   f'text-anchor="middle">{escape(self.xlabel)}</text>')
        out.append(f'<text x="16" y="{(t + b) / 2:.2f}" font-size="12" text-anchor="middle" '
                   f'transform="rotate(-90 16 {(t + b) / 2:.2f})">{escape(self.ylabel)}</text>')
        out.append("</svg>\n")
        return "\n".join(out)


def _limits(arrays) -> tuple[float, float]:
    vals = np.concatenate([np.asarray(a, float).ravel() for a in arrays])
    vals = vals[np.isfinite(vals)]
    if vals.size == 0:
        return 0.0, 1.0
    return float(vals.min()), float(vals.max())


def line_chart(series: Sequence[tuple[str, Sequence[float], Sequence[float]]], title: str,
               xlabel: str, ylabel: str) -> str:
    """One polyline per ``(label, xs, ys)``."""
    ax = Axes(_limits([s[1] for s in series]), _limits([s[2] for s in series]),
              title, xlabel, ylabel)
    entries = []
    for i, (label, xs, ys) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        ax.polyline(xs, ys, color)
        entries.append((label, color))
    ax.legend(entries)
    return ax.render()


def least_squares_line(x, y) -> tuple[float, float]:
    """Slope and intercept of the ordinary least-squares fit ``y ~ a x + b``."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    A = np.column_stack([x, np.ones_like(x)])
    (a, b), *_ = np.linalg.lstsq(A, y, rcond=None)
    return float(a), float(b)


def scatter_with_fit(groups: Sequence[tuple[str, Sequence[float], Sequence[float]]], title: str,
                     xlabel: str, ylabel: str) -> str:
    """Scatter of every group plus one dotted least-squares line over the pooled points."""
    xs = [np.asarray(g[1], float) for g in groups]
    ys = [np.asarray(g[2], float) for g in groups]
    ax = Axes(_limits(xs), _limits(ys), title, xlabel, ylabel)
    entries = []
    for i, (label, x, y) in enumerate(zip([g[0] for g in groups], xs, ys)):
        color = PALETTE[i % len(PALETTE)]
        ax.points(x, y, color)
        entries.append((label, color))
    px = np.concatenate(xs)
    py = np.concatenate(ys)
    ok = np.isfinite(px) & np.isfinite(py)
    if ok.sum() >= 2 and np.ptp(px[ok]) > 0:
        a, b = least_squares_line(px[ok], py[ok])
        lo, hi = px[ok].min(), px[ok].max()
        ax.polyline([lo, hi], [a * lo + b, a * hi + b], "black", dash="2,4")
        entries.append((f"fit: y = {a:.3g} x + {b:.3g}", "black"))
    ax.legend(entries)
    return ax.render()


def _level_color(frac: float) -> str:
    # white to dark blue
    c = int(round(255 * (1.0 - frac)))
    g = int(round(255 - 175 * frac))
    return f"#{c:02x}{g:02x}ff"


def raster_levels(Z: np.ndarray, n_levels: int = 12) -> np.ndarray:
    """``n_levels + 1`` evenly spaced level edges from ``min(Z)`` to ``max(Z)``."""
    return np.linspace(float(np.min(Z)), float(np.max(Z)), n_levels + 1)


def raster_chart(xs, ys, Z, title: str, paths=(), n_levels: int = 12) -> str:
    """Filled contour-level raster of ``Z[i, j]`` at ``(xs[j], ys[i])`` plus optional paths.

    ``paths`` is a sequence of ``(label, px, py)`` trajectories drawn on top.
    Level edges span exactly the data minimum to maximum and are listed in the
    figure.
    """
    xs = np.asarray(xs, float)
    ys = np.asarray(ys, float)
    Z = np.asarray(Z, float)
    ax = Axes((xs[0], xs[-1]), (ys[0], ys[-1]), title, "x", "y")
    edges = raster_levels(Z, n_levels)
    idx = np.clip(np.searchsorted(edges, Z, side="right") - 1, 0, n_levels - 1)
    dx = np.diff(xs).mean() / 2 if xs.size > 1 else 0.5
    dy = np.diff(ys).mean() / 2 if ys.size > 1 else 0.5
    for i, y in enumerate(ys):
        for j, x in enumerate(xs):
            ax.rect(x - dx, y - dy, x + dx, y + dy, _level_color(idx[i, j] / max(n_levels - 1, 1)))
    entries = []
    for k, (label, px, py) in enumerate(paths):
        color = PALETTE[(k + 1) % len(PALETTE)]
        ax.polyline(px, py, color, width=2.0)
        entries.append((label, color))
    ax.legend(entries)
    ax.text(MARGIN["left"], HEIGHT - 30, f"levels: {_tick_label(edges[0])} .. "
            f"{_tick_label(edges[-1])} ({n_levels} bands)", size=10)
    return ax.render()
