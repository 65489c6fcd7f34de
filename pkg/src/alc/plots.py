"""Tiny dependency-free SVG line charts and heatmaps."""
from __future__ import annotations

import math
from pathlib import Path
from xml.sax.saxutils import escape

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"]
W, H = 640, 400
ML, MR, MT, MB = 70, 150, 40, 50


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def _num(v: float) -> str:
    return f"{v:.4g}"


def line_chart(path: str | Path, series: dict[str, tuple[list[float], list[float]]],
               title: str, xlabel: str, ylabel: str) -> Path:
    pts = [(x, y) for xs, ys in series.values() for x, y in zip(xs, ys) if math.isfinite(y)]
    if not pts:
        pts = [(0.0, 0.0), (1.0, 1.0)]
    x0, x1 = min(p[0] for p in pts), max(p[0] for p in pts)
    y0, y1 = min(p[1] for p in pts), max(p[1] for p in pts)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1
    pw, ph = W - ML - MR, H - MT - MB

    def sx(x):
        return ML + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return MT + ph - (y - y0) / (y1 - y0) * ph

    out = [_header(title)]
    out.append(f'<rect x="{ML}" y="{MT}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>')
    for t in _ticks(x0, x1):
        out.append(f'<text x="{sx(t):.1f}" y="{H - MB + 18}" font-size="11" text-anchor="middle">{_num(t)}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<text x="{ML - 6}" y="{sy(t) + 4:.1f}" font-size="11" text-anchor="end">{_num(t)}</text>')
        out.append(f'<line x1="{ML}" x2="{ML + pw}" y1="{sy(t):.1f}" y2="{sy(t):.1f}" stroke="#ddd"/>')
    out.append(f'<text x="{ML + pw / 2}" y="{H - 10}" font-size="12" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{MT + ph / 2}" font-size="12" text-anchor="middle" '
               f'transform="rotate(-90 16 {MT + ph / 2})">{escape(ylabel)}</text>')
    for i, (name, (xs, ys)) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(xs, ys) if math.isfinite(y))
        if coords:
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        if len(xs) <= 30:
            for x, y in zip(xs, ys):
                if math.isfinite(y):
                    out.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="2.5" fill="{color}"/>')
        ly = MT + 14 + 16 * i
        out.append(f'<line x1="{W - MR + 10}" x2="{W - MR + 28}" y1="{ly - 4}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{W - MR + 32}" y="{ly}" font-size="11">{escape(name)}</text>')
    out.append("</svg>\n")
    return _write(path, out)


def heatmap(path: str | Path, rows: list[float], cols: list[float], values: dict[tuple[float, float], float],
            title: str, row_label: str, col_label: str) -> Path:
    """``values[(row, col)]``; missing cells are drawn grey."""
    finite = [v for v in values.values() if math.isfinite(v)]
    lo, hi = (min(finite), max(finite)) if finite else (0.0, 1.0)
    span = hi - lo or 1.0
    pw, ph = W - ML - MR, H - MT - MB
    cw, ch = pw / max(len(cols), 1), ph / max(len(rows), 1)
    out = [_header(title)]
    for i, r in enumerate(rows):
        for j, c in enumerate(cols):
            v = values.get((r, c), math.nan)
            if math.isfinite(v):
                t = (v - lo) / span
                fill = f"rgb({int(255 * t)},{int(80 + 100 * (1 - abs(2 * t - 1)))},{int(255 * (1 - t))})"
                text = f"{v:.3f}"
            else:
                fill, text = "#bbb", "n/a"
            x, y = ML + j * cw, MT + i * ch
            out.append(f'<rect x="{x:.1f}" y="{y:.1f}" width="{cw:.1f}" height="{ch:.1f}" fill="{fill}" stroke="#fff"/>')
            out.append(f'<text x="{x + cw / 2:.1f}" y="{y + ch / 2 + 4:.1f}" font-size="11" '
                       f'text-anchor="middle">{text}</text>')
        out.append(f'<text x="{ML - 6}" y="{MT + (i + 0.5) * ch + 4:.1f}" font-size="11" '
                   f'text-anchor="end">{_num(r)}</text>')
    for j, c in enumerate(cols):
        out.append(f'<text x="{ML + (j + 0.5) * cw:.1f}" y="{H - MB + 18}" font-size="11" '
                   f'text-anchor="middle">{_num(c)}</text>')
    out.append(f'<text x="{ML + pw / 2}" y="{H - 10}" font-size="12" text-anchor="middle">{escape(col_label)}</text>')
    out.append(f'<text x="16" y="{MT + ph / 2}" font-size="12" text-anchor="middle" '
               f'transform="rotate(-90 16 {MT + ph / 2})">{escape(row_label)}</text>')
    out.append("</svg>\n")
    return _write(path, out)


def _header(title: str) -> str:
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
            f'viewBox="0 0 {W} {H}" font-family="sans-serif">\n'
            f'<rect width="{W}" height="{H}" fill="white"/>\n'
            f'<text x="{W / 2}" y="22" font-size="14" text-anchor="middle">{escape(title)}</text>')


def _write(path: str | Path, parts: list[str]) -> Path:
    path = Path(path)
    path.write_text("\n".join(parts), encoding="utf-8")
    return path


def write_pgm(path: str | Path, grid, lo: float | None = None, hi: float | None = None) -> Path:
    """8-bit binary portable graymap, linearly scaled to [lo, hi]."""
    import numpy as np

    a = np.asarray(grid, dtype=np.float64)
    lo = float(a.min()) if lo is None else lo
    hi = float(a.max()) if hi is None else hi
    scaled = np.zeros_like(a) if hi <= lo else (a - lo) / (hi - lo)
    pix = np.clip(np.round(scaled * 255), 0, 255).astype(np.uint8)
    path = Path(path)
    h, w = pix.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())
    return path
