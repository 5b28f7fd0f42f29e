"""Accuracy-vs-step SVG line charts with deterministic bytes.

Fixed canvas ``viewBox="0 0 640 400"``; plot area x in [60, 620], y in
[30, 350].  Accuracy maps to y with [0, 1] -> [350, 30]; steps map linearly
from [min step, max step] over all series to [60, 620] (a lone step sits at
the centre, x=340).
"""

import os

from .errors import ContractError
from .metrics import read_csv

WIDTH, HEIGHT = 640, 400
LEFT, RIGHT, TOP, BOTTOM = 60, 620, 30, 350
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def _fmt(v):
    return f"{v:.2f}"


def x_map(step, lo, hi):
    if hi == lo:
        return (LEFT + RIGHT) / 2.0
    return LEFT + (step - lo) / (hi - lo) * (RIGHT - LEFT)


def y_map(acc):
    return BOTTOM - acc * (BOTTOM - TOP)


def _esc(s):
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")


def render_svg(series, xlabel="round / epoch", ylabel="accuracy"):
    """``series``: list of (label, steps, accuracies)."""
    steps = [s for _, xs, _ in series for s in xs]
    lo, hi = (min(steps), max(steps)) if steps else (0, 1)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" width="{WIDTH}" height="{HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<line x1="{LEFT}" y1="{BOTTOM}" x2="{RIGHT}" y2="{BOTTOM}" stroke="black"/>',
        f'<line x1="{LEFT}" y1="{BOTTOM}" x2="{LEFT}" y2="{TOP}" stroke="black"/>',
    ]
    for t in range(6):
        a = t / 5
        y = _fmt(y_map(a))
        out.append(f'<line x1="{LEFT - 4}" y1="{y}" x2="{LEFT}" y2="{y}" stroke="black"/>')
        out.append(f'<text x="{LEFT - 8}" y="{y}" font-size="10" text-anchor="end" dominant-baseline="middle">{a:.1f}</text>')
    if steps:
        for v in sorted({lo, hi}):
            x = _fmt(x_map(v, lo, hi))
            out.append(f'<text x="{x}" y="{BOTTOM + 14}" font-size="10" text-anchor="middle">{v}</text>')
    out.append(f'<text x="{(LEFT + RIGHT) // 2}" y="{HEIGHT - 12}" font-size="12" text-anchor="middle">{_esc(xlabel)}</text>')
    out.append(f'<text x="16" y="{(TOP + BOTTOM) // 2}" font-size="12" text-anchor="middle" '
               f'transform="rotate(-90 16 {(TOP + BOTTOM) // 2})">{_esc(ylabel)}</text>')
    for i, (label, xs, ys) in enumerate(series):
        color = COLORS[i % len(COLORS)]
        pts = [(_fmt(x_map(x, lo, hi)), _fmt(y_map(y))) for x, y in zip(xs, ys)]
        if len(pts) == 1:
            out.append(f'<circle class="series" cx="{pts[0][0]}" cy="{pts[0][1]}" r="3" fill="{color}"/>')
        elif pts:
            d = "M " + " L ".join(f"{x},{y}" for x, y in pts)
            out.append(f'<path class="series" d="{d}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = TOP + 14 * i
        out.append(f'<line x1="{RIGHT - 130}" y1="{ly}" x2="{RIGHT - 115}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{RIGHT - 110}" y="{ly}" font-size="10" dominant-baseline="middle">{_esc(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_plots(csv_paths, output_path, labels=None, split="test"):
    """One line per CSV (records of ``split`` only); returns the SVG text."""
    labels = labels or [os.path.splitext(os.path.basename(p))[0] for p in csv_paths]
    if len(labels) != len(csv_paths):
        raise ContractError(f"{len(labels)} labels for {len(csv_paths)} CSV files")
    series = []
    for path, label in zip(csv_paths, labels):
        recs = [r for r in read_csv(path) if r.split == split]
        series.append((label, [r.step for r in recs], [r.accuracy for r in recs]))
    svg = render_svg(series)
    with open(output_path, "w", newline="") as fh:
        fh.write(svg)
    return svg
