"""Minimal deterministic SVG charts.

Hand-rolled so that identical inputs produce byte-identical files: no
library metadata, no timestamps, fixed float formatting. Every chart
writer also emits a sibling .tsv with the underlying numbers.
"""

import math

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")

_W, _H = 640, 400
_ML, _MR, _MT, _MB = 60, 20, 30, 45


def _fmt(x):
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "nan"
    return f"{x:.6g}"


def _coord(v):
    return f"{v:.2f}"


def _bounds(values, pad_frac=0.05):
    finite = [v for v in values if v is not None and not math.isnan(v)]
    if not finite:
        return 0.0, 1.0
    lo, hi = min(finite), max(finite)
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    pad = (hi - lo) * pad_frac
    return lo - pad, hi + pad


def _ticks(lo, hi, n=5):
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def _axes(lines, x_lo, x_hi, y_lo, y_hi, title, xlabel, ylabel):
    x0, x1 = _ML, _W - _MR
    y0, y1 = _H - _MB, _MT
    lines.append(f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="#ffffff"/>')
    lines.append(f'<text x="{_W // 2}" y="18" text-anchor="middle" font-size="13">{title}</text>')
    lines.append(f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="#000000"/>')
    lines.append(f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="#000000"/>')
    for t in _ticks(x_lo, x_hi):
        px = x0 + (t - x_lo) / (x_hi - x_lo) * (x1 - x0)
        lines.append(f'<line x1="{_coord(px)}" y1="{y0}" x2="{_coord(px)}" y2="{y0 + 4}" stroke="#000000"/>')
        lines.append(f'<text x="{_coord(px)}" y="{y0 + 16}" text-anchor="middle" font-size="10">{_fmt(t)}</text>')
    for t in _ticks(y_lo, y_hi):
        py = y0 - (t - y_lo) / (y_hi - y_lo) * (y0 - y1)
        lines.append(f'<line x1="{x0 - 4}" y1="{_coord(py)}" x2="{x0}" y2="{_coord(py)}" stroke="#000000"/>')
        lines.append(f'<text x="{x0 - 6}" y="{_coord(py)}" text-anchor="end" font-size="10">{_fmt(t)}</text>')
    lines.append(f'<text x="{(x0 + x1) // 2}" y="{_H - 8}" text-anchor="middle" font-size="11">{xlabel}</text>')
    lines.append(
        f'<text x="14" y="{(y0 + y1) // 2}" text-anchor="middle" font-size="11" '
        f'transform="rotate(-90 14 {(y0 + y1) // 2})">{ylabel}</text>'
    )
    return x0, x1, y0, y1


def line_chart(path, series, title="", xlabel="", ylabel=""):
    """series: list of (name, xs, ys). NaN points break the polyline."""
    all_x = [x for _, xs, _ in series for x in xs]
    all_y = [y for _, _, ys in series for y in ys]
    x_lo, x_hi = _bounds(all_x, 0.0)
    y_lo, y_hi = _bounds(all_y)
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}">']
    x0, x1, y0, y1 = _axes(lines, x_lo, x_hi, y_lo, y_hi, title, xlabel, ylabel)

    def px(x):
        return x0 + (x - x_lo) / (x_hi - x_lo) * (x1 - x0)

    def py(y):
        return y0 - (y - y_lo) / (y_hi - y_lo) * (y0 - y1)

    for idx, (name, xs, ys) in enumerate(series):
        color = _COLORS[idx % len(_COLORS)]
        segments, seg = [], []
        for x, y in zip(xs, ys):
            if y is None or math.isnan(y):
                if seg:
                    segments.append(seg)
                seg = []
            else:
                seg.append(f"{_coord(px(x))},{_coord(py(y))}")
        if seg:
            segments.append(seg)
        for seg in segments:
            lines.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{" ".join(seg)}"/>')
        ly = _MT + 14 + 14 * idx
        lines.append(f'<line x1="{x1 - 130}" y1="{ly - 4}" x2="{x1 - 110}" y2="{ly - 4}" stroke="{color}" stroke-width="1.5"/>')
        lines.append(f'<text x="{x1 - 105}" y="{ly}" font-size="10">{name}</text>')
    lines.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    _write_series_tsv(_sibling(path), series)


def bar_chart(path, edges, counts, title="", xlabel="", ylabel="count"):
    """Histogram bars from np.histogram-style (edges, counts)."""
    x_lo, x_hi = float(edges[0]), float(edges[-1])
    y_lo, y_hi = 0.0, max(1.0, float(max(counts)) * 1.05)
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}">']
    x0, x1, y0, y1 = _axes(lines, x_lo, x_hi, y_lo, y_hi, title, xlabel, ylabel)
    for i, c in enumerate(counts):
        bx0 = x0 + (float(edges[i]) - x_lo) / (x_hi - x_lo) * (x1 - x0)
        bx1 = x0 + (float(edges[i + 1]) - x_lo) / (x_hi - x_lo) * (x1 - x0)
        by = y0 - (float(c) - y_lo) / (y_hi - y_lo) * (y0 - y1)
        lines.append(
            f'<rect x="{_coord(bx0)}" y="{_coord(by)}" width="{_coord(max(bx1 - bx0 - 1, 1))}" '
            f'height="{_coord(y0 - by)}" fill="{_COLORS[0]}"/>'
        )
    lines.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    rows = [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(len(counts))]
    with open(_sibling(path), "w", encoding="utf-8") as fh:
        fh.write("bin_lo\tbin_hi\tcount\n")
        for lo, hi, c in rows:
            fh.write(f"{lo!r}\t{hi!r}\t{c}\n")


def _sibling(path):
    path = str(path)
    return path[: -len(".svg")] + ".tsv" if path.endswith(".svg") else path + ".tsv"


def _write_series_tsv(path, series):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("series\tx\ty\n")
        for name, xs, ys in series:
            for x, y in zip(xs, ys):
                fh.write(f"{name}\t{x!r}\t{_fmt(y) if y is None or (isinstance(y, float) and math.isnan(y)) else repr(float(y))}\n")
