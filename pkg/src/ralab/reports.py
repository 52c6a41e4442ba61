"""Deterministic CSV reports and self-contained SVG plots.

CSVs use repr() for floats (shortest round-trip form), so identical runs
produce byte-identical files, and SVG files are pure functions of the data
they plot: regenerating from the same CSV yields the same bytes. No
timestamps, no external plotting dependency.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path

from .exceptions import DataError

_PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b")


def format_cell(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, header, rows):
    """Write rows (sequences matching header) with normalized formatting."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([format_cell(v) for v in row])
    path.write_text(buf.getvalue(), encoding="utf-8")


def read_csv(path):
    """Read a report back as (header, list of string rows)."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read CSV {path}: {exc}") from exc
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise DataError(f"CSV {path} is empty")
    return rows[0], rows[1:]


# ---------------------------------------------------------------------------
# SVG
#
# Fixed 640x420 canvas with a 60/20/40/50 margin box. Coordinates are
# formatted to 3 decimals so output bytes are stable.

_W, _H = 640, 420
_ML, _MR, _MT, _MB = 62, 20, 40, 52


def _scale(vals, lo, hi, out_lo, out_hi):
    if hi <= lo:
        hi = lo + 1.0
    return [out_lo + (v - lo) / (hi - lo) * (out_hi - out_lo) for v in vals]


def _fmt(v) -> str:
    return f"{v:.3f}"


def _axis_ticks(lo, hi, n=5):
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def _svg_header(title):
    return [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
            f'viewBox="0 0 {_W} {_H}" font-family="monospace" font-size="12">',
            f'<rect width="{_W}" height="{_H}" fill="white"/>',
            f'<text x="{_W / 2:.1f}" y="22" text-anchor="middle" font-size="14">{title}</text>']


def _axes(x_lo, x_hi, y_lo, y_hi, x_label, y_label):
    parts = [f'<rect x="{_ML}" y="{_MT}" width="{_W - _ML - _MR}" '
             f'height="{_H - _MT - _MB}" fill="none" stroke="#333"/>']
    for t in _axis_ticks(x_lo, x_hi):
        px = _scale([t], x_lo, x_hi, _ML, _W - _MR)[0]
        parts.append(f'<line x1="{_fmt(px)}" y1="{_H - _MB}" x2="{_fmt(px)}" '
                     f'y2="{_H - _MB + 5}" stroke="#333"/>')
        parts.append(f'<text x="{_fmt(px)}" y="{_H - _MB + 18}" text-anchor="middle">{t:.3g}</text>')
    for t in _axis_ticks(y_lo, y_hi):
        py = _scale([t], y_lo, y_hi, _H - _MB, _MT)[0]
        parts.append(f'<line x1="{_ML - 5}" y1="{_fmt(py)}" x2="{_ML}" '
                     f'y2="{_fmt(py)}" stroke="#333"/>')
        parts.append(f'<text x="{_ML - 8}" y="{_fmt(py + 4)}" text-anchor="end">{t:.3g}</text>')
    parts.append(f'<text x="{(_ML + _W - _MR) / 2:.1f}" y="{_H - 12}" '
                 f'text-anchor="middle">{x_label}</text>')
    parts.append(f'<text x="16" y="{(_MT + _H - _MB) / 2:.1f}" text-anchor="middle" '
                 f'transform="rotate(-90 16 {(_MT + _H - _MB) / 2:.1f})">{y_label}</text>')
    return parts


def line_plot(path, title, x_label, y_label, xs, series):
    """Polyline chart; series is an ordered dict name -> list of y values."""
    xs = [float(v) for v in xs]
    all_y = [float(y) for ys in series.values() for y in ys]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(all_y), max(all_y)
    if y_hi <= y_lo:
        y_hi = y_lo + 1.0
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad
    parts = _svg_header(title) + _axes(x_lo, x_hi, y_lo, y_hi, x_label, y_label)
    for si, (name, ys) in enumerate(series.items()):
        color = _PALETTE[si % len(_PALETTE)]
        pxs = _scale(xs, x_lo, x_hi, _ML, _W - _MR)
        pys = _scale([float(y) for y in ys], y_lo, y_hi, _H - _MB, _MT)
        pts = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in zip(pxs, pys))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        for a, b in zip(pxs, pys):
            parts.append(f'<circle cx="{_fmt(a)}" cy="{_fmt(b)}" r="3" fill="{color}"/>')
        parts.append(f'<text x="{_W - _MR - 8}" y="{_MT + 16 + 16 * si}" text-anchor="end" '
                     f'fill="{color}">{name}</text>')
    parts.append("</svg>")
    _write_svg(path, parts)


def histogram_plot(path, title, x_label, series, n_bins=24):
    """Overlaid binned histograms; series is an ordered dict name -> values."""
    all_v = [float(v) for vs in series.values() for v in vs]
    lo, hi = min(all_v), max(all_v)
    if hi <= lo:
        hi = lo + 1.0
    width = (hi - lo) / n_bins
    counts = {}
    top = 1
    for name, vs in series.items():
        c = [0] * n_bins
        for v in vs:
            b = min(int((float(v) - lo) / width), n_bins - 1)
            c[b] += 1
        counts[name] = c
        top = max(top, max(c))
    parts = _svg_header(title) + _axes(lo, hi, 0, top, x_label, "count")
    for si, (name, c) in enumerate(counts.items()):
        color = _PALETTE[si % len(_PALETTE)]
        for b, n in enumerate(c):
            if n == 0:
                continue
            x0 = _scale([lo + b * width], lo, hi, _ML, _W - _MR)[0]
            x1 = _scale([lo + (b + 1) * width], lo, hi, _ML, _W - _MR)[0]
            y = _scale([n], 0, top, _H - _MB, _MT)[0]
            parts.append(f'<rect x="{_fmt(x0)}" y="{_fmt(y)}" width="{_fmt(x1 - x0)}" '
                         f'height="{_fmt(_H - _MB - y)}" fill="{color}" fill-opacity="0.45"/>')
        parts.append(f'<text x="{_W - _MR - 8}" y="{_MT + 16 + 16 * si}" text-anchor="end" '
                     f'fill="{color}">{name}</text>')
    parts.append("</svg>")
    _write_svg(path, parts)


def scatter_plot(path, title, x_label, y_label, groups):
    """Scatter; groups is an ordered dict name -> (xs, ys)."""
    all_x = [float(x) for xs, _ in groups.values() for x in xs]
    all_y = [float(y) for _, ys in groups.values() for y in ys]
    x_lo, x_hi, y_lo, y_hi = min(all_x), max(all_x), min(all_y), max(all_y)
    parts = _svg_header(title) + _axes(x_lo, x_hi, y_lo, y_hi, x_label, y_label)
    markers = ("circle", "rect", "diamond")
    for si, (name, (xs, ys)) in enumerate(groups.items()):
        color = _PALETTE[si % len(_PALETTE)]
        pxs = _scale([float(v) for v in xs], x_lo, x_hi, _ML, _W - _MR)
        pys = _scale([float(v) for v in ys], y_lo, y_hi, _H - _MB, _MT)
        kind = markers[si % len(markers)]
        for a, b in zip(pxs, pys):
            if kind == "circle":
                parts.append(f'<circle cx="{_fmt(a)}" cy="{_fmt(b)}" r="3" fill="{color}" '
                             f'fill-opacity="0.7"/>')
            elif kind == "rect":
                parts.append(f'<rect x="{_fmt(a - 3)}" y="{_fmt(b - 3)}" width="6" height="6" '
                             f'fill="{color}" fill-opacity="0.7"/>')
            else:
                parts.append(f'<path d="M {_fmt(a)} {_fmt(b - 4)} L {_fmt(a + 4)} {_fmt(b)} '
                             f'L {_fmt(a)} {_fmt(b + 4)} L {_fmt(a - 4)} {_fmt(b)} Z" '
                             f'fill="{color}" fill-opacity="0.7"/>')
        parts.append(f'<text x="{_W - _MR - 8}" y="{_MT + 16 + 16 * si}" text-anchor="end" '
                     f'fill="{color}">{name}</text>')
    parts.append("</svg>")
    _write_svg(path, parts)


def _write_svg(path, parts):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(parts) + "\n", encoding="utf-8")
