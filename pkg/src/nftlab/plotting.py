"""Static SVG line charts written by hand (no plotting library)."""

from __future__ import annotations

import math
from pathlib import Path
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")


def nice_ticks(lo, hi, n=5):
    """Round tick positions covering [lo, hi]."""
    if not math.isfinite(lo) or not math.isfinite(hi):
        raise ValueError("axis limits must be finite")
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / max(n - 1, 1)
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.floor(lo / step) * step
    ticks = []
    v = start
    while v <= hi + 1e-9 * step:
        ticks.append(round(v, 12))
        v += step
    if ticks[-1] < hi:
        ticks.append(round(v, 12))
    return ticks


def line_chart(series, title="", xlabel="", ylabel="", width=640, height=400):
    """SVG text for ``series``: a mapping label -> (xs, ys).

    Non-finite points are dropped.
    """
    clean = {}
    for label, (xs, ys) in series.items():
        pts = [(float(x), float(y)) for x, y in zip(xs, ys) if math.isfinite(x) and math.isfinite(y)]
        if pts:
            clean[label] = pts
    if not clean:
        raise ValueError("nothing to plot")
    allx = [p[0] for pts in clean.values() for p in pts]
    ally = [p[1] for pts in clean.values() for p in pts]
    xt, yt = nice_ticks(min(allx), max(allx)), nice_ticks(min(ally), max(ally))
    x0, x1, y0, y1 = xt[0], xt[-1], yt[0], yt[-1]
    left, right, top, bottom = 70, 150, 40, 55
    pw, ph = width - left - right, height - top - bottom
    sx = lambda x: left + (x - x0) / (x1 - x0) * pw
    sy = lambda y: top + ph - (y - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{left + pw / 2:.1f}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
    ]
    for v in xt:
        out.append(f'<line x1="{sx(v):.2f}" y1="{top}" x2="{sx(v):.2f}" y2="{top + ph}" stroke="#eee"/>')
        out.append(f'<text x="{sx(v):.2f}" y="{top + ph + 18}" text-anchor="middle">{v:g}</text>')
    for v in yt:
        out.append(f'<line x1="{left}" y1="{sy(v):.2f}" x2="{left + pw}" y2="{sy(v):.2f}" stroke="#eee"/>')
        out.append(f'<text x="{left - 8}" y="{sy(v) + 4:.2f}" text-anchor="end">{v:g}</text>')
    out.append(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(
        f'<text x="18" y="{top + ph / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 18 {top + ph / 2:.1f})">{escape(ylabel)}</text>'
    )
    for k, (label, pts) in enumerate(clean.items()):
        color = PALETTE[k % len(PALETTE)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        ly = top + 14 + 18 * k
        out.append(f'<line x1="{left + pw + 12}" y1="{ly - 4}" x2="{left + pw + 32}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 38}" y="{ly}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def reward_curves(csv_paths, labels=None, phase="eval"):
    """Series of mean raw reward against iteration from metrics CSV files."""
    from .metrics import read_metrics

    labels = labels or [Path(p).parent.name or Path(p).stem for p in csv_paths]
    series = {}
    for label, path in zip(labels, csv_paths):
        rows = [r for r in read_metrics(path) if r["phase"] == phase]
        series[label] = ([r["iteration"] for r in rows], [r["mean_raw_reward"] for r in rows])
    return series


def write_svg(path, svg):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(svg)
    return path
