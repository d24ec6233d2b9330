"""Minimal deterministic SVG renderer for line plots with seed bands.

Byte-for-byte reproducible: fixed palette, fixed float formatting, no
timestamps or generated ids. This keeps plot artifacts inside the
run-output determinism guarantee.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import math

WIDTH, HEIGHT = 720, 440
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 64, 160, 40, 48

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
           "#8c564b", "#e377c2", "#17becf", "#7f7f7f", "#bcbd22"]


@dataclass
class Series:
    label: str
    xs: list[float]
    ys: list[float]
    band_lo: list[float] | None = None
    band_hi: list[float] | None = None


def _fmt(x: float) -> str:
    return f"{x:.3f}"


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10.0 ** math.floor(math.log10(raw))
    for mult in (1.0, 2.0, 2.5, 5.0, 10.0):
        if raw <= mult * mag:
            step = mult * mag
            break
    start = math.ceil(lo / step) * step
    ticks = []
    t = start
    while t <= hi + 1e-9 * step:
        ticks.append(round(t, 10))
        t += step
    return ticks


def render_line_plot(series: list[Series], title: str, xlabel: str, ylabel: str) -> str:
    xs_all = [x for s in series for x in s.xs]
    ys_all = [y for s in series for y in s.ys]
    for s in series:
        if s.band_lo is not None:
            ys_all.extend(s.band_lo)
            ys_all.extend(s.band_hi)
    if not xs_all:
        xs_all, ys_all = [0.0, 1.0], [0.0, 1.0]
    x_lo, x_hi = min(xs_all), max(xs_all)
    y_lo, y_hi = min(ys_all), max(ys_all)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad

    pw = WIDTH - MARGIN_L - MARGIN_R
    ph = HEIGHT - MARGIN_T - MARGIN_B

    def px(x):
        return MARGIN_L + pw * (x - x_lo) / (x_hi - x_lo)

    def py(y):
        return MARGIN_T + ph * (1.0 - (y - y_lo) / (y_hi - y_lo))

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="Helvetica, Arial, sans-serif">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{WIDTH // 2}" y="24" font-size="16" text-anchor="middle">{title}</text>']

    # axes
    out.append(f'<line x1="{MARGIN_L}" y1="{MARGIN_T}" x2="{MARGIN_L}" '
               f'y2="{HEIGHT - MARGIN_B}" stroke="black" stroke-width="1"/>')
    out.append(f'<line x1="{MARGIN_L}" y1="{HEIGHT - MARGIN_B}" x2="{WIDTH - MARGIN_R}" '
               f'y2="{HEIGHT - MARGIN_B}" stroke="black" stroke-width="1"/>')
    for t in _nice_ticks(x_lo, x_hi):
        out.append(f'<line x1="{_fmt(px(t))}" y1="{HEIGHT - MARGIN_B}" x2="{_fmt(px(t))}" '
                   f'y2="{HEIGHT - MARGIN_B + 5}" stroke="black" stroke-width="1"/>')
        out.append(f'<text x="{_fmt(px(t))}" y="{HEIGHT - MARGIN_B + 18}" font-size="11" '
                   f'text-anchor="middle">{t:g}</text>')
    for t in _nice_ticks(y_lo, y_hi):
        out.append(f'<line x1="{MARGIN_L - 5}" y1="{_fmt(py(t))}" x2="{MARGIN_L}" '
                   f'y2="{_fmt(py(t))}" stroke="black" stroke-width="1"/>')
        out.append(f'<text x="{MARGIN_L - 8}" y="{_fmt(py(t) + 4)}" font-size="11" '
                   f'text-anchor="end">{t:g}</text>')
    out.append(f'<text x="{MARGIN_L + pw / 2:.1f}" y="{HEIGHT - 10}" font-size="13" '
               f'text-anchor="middle">{xlabel}</text>')
    out.append(f'<text x="16" y="{MARGIN_T + ph / 2:.1f}" font-size="13" text-anchor="middle" '
               f'transform="rotate(-90 16 {MARGIN_T + ph / 2:.1f})">{ylabel}</text>')

    for i, s in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        if s.band_lo is not None and len(s.xs) > 1:
            pts = [f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in zip(s.xs, s.band_hi)]
            pts += [f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in
                    zip(reversed(s.xs), reversed(s.band_lo))]
            out.append(f'<polygon points="{" ".join(pts)}" fill="{color}" opacity="0.15"/>')
        pts = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in zip(s.xs, s.ys))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.8"/>')
        if len(s.xs) == 1:
            out.append(f'<circle cx="{_fmt(px(s.xs[0]))}" cy="{_fmt(py(s.ys[0]))}" '
                       f'r="3" fill="{color}"/>')
        ly = MARGIN_T + 14 + 18 * i
        lx = WIDTH - MARGIN_R + 12
        out.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 22}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="1.8"/>')
        out.append(f'<text x="{lx + 28}" y="{ly}" font-size="12">{s.label}</text>')

    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_line_plot(path, series: list[Series], title: str, xlabel: str, ylabel: str) -> None:
    with open(path, "w") as fh:
        fh.write(render_line_plot(series, title, xlabel, ylabel))
