"""Minimal dependency-free SVG charts.

Output is plain text with fixed number formatting, so identical inputs give
byte-identical files.
"""

from __future__ import annotations

import base64
import math
from pathlib import Path
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f",
           "#bcbd22", "#e377c2", "#393b79", "#637939")
W, H = 640, 400
MARGIN = dict(left=70, right=170, top=40, bottom=50)


def _f(v: float) -> str:
    return f"{v:.2f}"


def _nice_range(lo: float, hi: float):
    if not (math.isfinite(lo) and math.isfinite(hi)):
        return 0.0, 1.0
    if hi - lo < 1e-12:
        pad = abs(lo) * 0.05 or 0.5
        return lo - pad, hi + pad
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def _frame(title: str, xlabel: str, ylabel: str) -> list:
    x0, y0 = MARGIN["left"], MARGIN["top"]
    pw, ph = W - MARGIN["left"] - MARGIN["right"], H - MARGIN["top"] - MARGIN["bottom"]
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.0f}" y="22" text-anchor="middle" font-family="sans-serif" font-size="15">{escape(title)}</text>',
        f'<rect x="{x0}" y="{y0}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
        f'<text x="{x0 + pw / 2:.0f}" y="{H - 12}" text-anchor="middle" font-family="sans-serif" font-size="12">{escape(xlabel)}</text>',
        f'<text x="16" y="{y0 + ph / 2:.0f}" text-anchor="middle" font-family="sans-serif" font-size="12" '
        f'transform="rotate(-90 16 {y0 + ph / 2:.0f})">{escape(ylabel)}</text>',
    ]


def _ticks(lo, hi, n=5):
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def line_chart(series: Mapping[str, tuple], title: str, xlabel: str, ylabel: str) -> str:
    """``series`` maps a legend label to ``(xs, ys)``."""
    x0, y0 = MARGIN["left"], MARGIN["top"]
    pw, ph = W - MARGIN["left"] - MARGIN["right"], H - MARGIN["top"] - MARGIN["bottom"]
    xs_all = np.concatenate([np.asarray(x, float) for x, _ in series.values()] or [np.zeros(0)])
    ys_all = np.concatenate([np.asarray(y, float) for _, y in series.values()] or [np.zeros(0)])
    ys_fin = ys_all[np.isfinite(ys_all)]
    xlo, xhi = _nice_range(*(xs_all.min(), xs_all.max()) if len(xs_all) else (0.0, 1.0))
    ylo, yhi = _nice_range(*(ys_fin.min(), ys_fin.max()) if len(ys_fin) else (0.0, 1.0))

    def sx(v):
        return x0 + (v - xlo) / (xhi - xlo) * pw

    def sy(v):
        return y0 + ph - (v - ylo) / (yhi - ylo) * ph

    out = _frame(title, xlabel, ylabel)
    for t in _ticks(xlo, xhi):
        out.append(f'<text x="{_f(sx(t))}" y="{y0 + ph + 16}" text-anchor="middle" font-family="sans-serif" '
                   f'font-size="10">{t:.4g}</text>')
    for t in _ticks(ylo, yhi):
        out.append(f'<text x="{x0 - 6}" y="{_f(sy(t) + 3)}" text-anchor="end" font-family="sans-serif" '
                   f'font-size="10">{t:.4g}</text>')
        out.append(f'<line x1="{x0}" y1="{_f(sy(t))}" x2="{x0 + pw}" y2="{_f(sy(t))}" stroke="#dddddd"/>')
    for k, (label, (xs, ys)) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        pts = [(float(a), float(b)) for a, b in zip(xs, ys) if math.isfinite(float(b))]
        if len(pts) == 1:
            out.append(f'<circle cx="{_f(sx(pts[0][0]))}" cy="{_f(sy(pts[0][1]))}" r="3" fill="{color}"/>')
        elif pts:
            path = " ".join(f"{_f(sx(a))},{_f(sy(b))}" for a, b in pts)
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{path}"/>')
        ly = y0 + 14 * k + 8
        out.append(f'<line x1="{x0 + pw + 10}" y1="{ly}" x2="{x0 + pw + 28}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{x0 + pw + 32}" y="{ly + 4}" font-family="sans-serif" font-size="10">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def bar_chart(categories: Sequence[str], groups: Mapping[str, Sequence], title: str, ylabel: str,
              ymax: float = 100.0) -> str:
    """Grouped bars; ``groups`` maps a legend label to one value per category (``None`` draws nothing)."""
    x0, y0 = MARGIN["left"], MARGIN["top"]
    pw, ph = W - MARGIN["left"] - MARGIN["right"], H - MARGIN["top"] - MARGIN["bottom"]
    out = _frame(title, "class", ylabel)
    for t in _ticks(0.0, ymax):
        y = y0 + ph - t / ymax * ph
        out.append(f'<text x="{x0 - 6}" y="{_f(y + 3)}" text-anchor="end" font-family="sans-serif" font-size="10">{t:.4g}</text>')
        out.append(f'<line x1="{x0}" y1="{_f(y)}" x2="{x0 + pw}" y2="{_f(y)}" stroke="#dddddd"/>')
    slot = pw / max(len(categories), 1)
    bw = slot * 0.8 / max(len(groups), 1)
    for c, cat in enumerate(categories):
        out.append(f'<text x="{_f(x0 + slot * (c + 0.5))}" y="{y0 + ph + 16}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="10">{escape(cat)}</text>')
        for g, (label, vals) in enumerate(groups.items()):
            v = vals[c]
            if v is None:
                continue
            hgt = max(0.0, min(float(v), ymax)) / ymax * ph
            x = x0 + slot * c + slot * 0.1 + bw * g
            out.append(f'<rect x="{_f(x)}" y="{_f(y0 + ph - hgt)}" width="{_f(bw)}" height="{_f(hgt)}" '
                       f'fill="{PALETTE[g % len(PALETTE)]}"/>')
    for g, label in enumerate(groups):
        ly = y0 + 14 * g + 8
        out.append(f'<rect x="{x0 + pw + 10}" y="{ly - 5}" width="14" height="10" fill="{PALETTE[g % len(PALETTE)]}"/>')
        out.append(f'<text x="{x0 + pw + 30}" y="{ly + 4}" font-family="sans-serif" font-size="10">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _png_gray(img: np.ndarray) -> bytes:
    import struct
    import zlib

    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    raw = b"".join(b"\x00" + img[r].tobytes() for r in range(h))

    def chunk(tag, data):
        return struct.pack(">I", len(data)) + tag + data + struct.pack(">I", zlib.crc32(tag + data) & 0xFFFFFFFF)

    return (b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", struct.pack(">IIBBBBB", w, h, 8, 0, 0, 0, 0))
            + chunk(b"IDAT", zlib.compress(raw, 9)) + chunk(b"IEND", b""))


def overlay(image: np.ndarray, detections, title: str = "") -> str:
    """The image (embedded PNG) with one labelled rectangle per detection."""
    h, w = image.shape
    data = base64.b64encode(_png_gray(image)).decode("ascii")
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" xmlns:xlink="http://www.w3.org/1999/xlink" '
           f'width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
           f'<image x="0" y="0" width="{w}" height="{h}" xlink:href="data:image/png;base64,{data}"/>']
    for k, d in enumerate(detections):
        x1, y1, x2, y2 = d.box
        color = PALETTE[d.class_id % len(PALETTE)]
        out.append(f'<rect x="{_f(x1)}" y="{_f(y1)}" width="{_f(x2 - x1)}" height="{_f(y2 - y1)}" fill="none" '
                   f'stroke="{color}" stroke-width="1.5"/>')
        out.append(f'<text x="{_f(x1)}" y="{_f(max(y1 - 2, 9))}" font-family="sans-serif" font-size="9" '
                   f'fill="{color}">{escape(d.class_name)} {d.score:.2f}</text>')
    if title:
        out.append(f'<text x="4" y="{h - 4}" font-family="sans-serif" font-size="10" fill="yellow">{escape(title)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def save(svg: str, path) -> None:
    Path(path).write_text(svg)
