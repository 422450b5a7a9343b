"""Dependency-free SVG charts with deterministic text output."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .errors import ContractError

W, H = 640, 420
LEFT, RIGHT, TOP, BOTTOM = 70, 170, 40, 50
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2",
           "#7f7f7f", "#bcbd22", "#17becf")


def _num(v: float) -> str:
    return f"{v:.2f}"


def _tick(v: float) -> str:
    return f"{v:.4g}"


def _range(lo: float, hi: float) -> tuple[float, float]:
    if hi - lo < 1e-12 * max(1.0, abs(lo), abs(hi)):
        pad = max(abs(lo) * 0.05, 0.5)
        return lo - pad, hi + pad
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def _normalize(series) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    for s in series:
        if isinstance(s, tuple) and len(s) == 2:
            x, y = (np.asarray(v, dtype=np.float64) for v in s)
        else:
            y = np.asarray(s, dtype=np.float64)
            x = np.arange(y.size, dtype=np.float64)
        if x.shape != y.shape or y.ndim != 1 or y.size == 0:
            raise ContractError("each series needs matching non-empty 1-D x and y")
        keep = np.isfinite(x) & np.isfinite(y)
        out.append((x[keep], y[keep]))
    return out


def emit_svg(series, labels, path, title: str = "", xlabel: str = "", ylabel: str = "") -> Path:
    """Line chart; each series is ``y`` or ``(x, y)``. Axes fit all data."""
    if not series:
        raise ContractError("emit_svg needs at least one series")
    if len(labels) != len(series):
        raise ContractError("one label per series")
    data = _normalize(series)
    xs = np.concatenate([x for x, _ in data])
    ys = np.concatenate([y for _, y in data])
    if xs.size == 0:
        raise ContractError("no finite points to plot")
    x0, x1 = _range(xs.min(), xs.max())
    y0, y1 = _range(ys.min(), ys.max())
    pw, ph = W - LEFT - RIGHT, H - TOP - BOTTOM

    def px(v):
        return LEFT + (v - x0) / (x1 - x0) * pw

    def py(v):
        return TOP + (1.0 - (v - y0) / (y1 - y0)) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
        f'viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.0f}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for k in range(5):
        xv = x0 + (x1 - x0) * k / 4
        yv = y0 + (y1 - y0) * k / 4
        parts.append(f'<text x="{_num(px(xv))}" y="{H - BOTTOM + 15}" '
                     f'text-anchor="middle">{_tick(xv)}</text>')
        parts.append(f'<text x="{LEFT - 5}" y="{_num(py(yv) + 4)}" '
                     f'text-anchor="end">{_tick(yv)}</text>')
    parts.append(f'<text x="{LEFT + pw / 2:.0f}" y="{H - 12}" '
                 f'text-anchor="middle">{escape(xlabel)}</text>')
    parts.append(f'<text x="15" y="{TOP + ph / 2:.0f}" text-anchor="middle" '
                 f'transform="rotate(-90 15 {TOP + ph / 2:.0f})">{escape(ylabel)}</text>')
    for i, ((x, y), label) in enumerate(zip(data, labels)):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{_num(px(a))},{_num(py(b))}" for a, b in zip(x, y))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = TOP + 12 + 16 * i
        parts.append(f'<line x1="{W - RIGHT + 10}" y1="{ly}" x2="{W - RIGHT + 30}" y2="{ly}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{W - RIGHT + 35}" y="{ly + 4}">{escape(str(label))}</text>')
    parts.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(parts) + "\n")
    return path


def emit_heatmap_svg(values, extent, path, box=None, title: str = "") -> Path:
    """Square heat grid; ``values[i, j]`` sits at x index ``i``, y index ``j``
    over ``extent = (lo, hi)`` on both axes. ``box`` outlines ``(lo, hi)^2``."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] != v.shape[1] or v.size == 0:
        raise ContractError("heat map needs a non-empty square grid")
    n = v.shape[0]
    lo, hi = extent
    size = 400
    cell = size / n
    vmin, vmax = float(np.min(v)), float(np.max(v))
    span = vmax - vmin if vmax > vmin else 1.0
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size + 160}" height="{size + 80}" '
        f'font-family="sans-serif" font-size="11">',
        f'<text x="{(size + 160) / 2:.0f}" y="20" text-anchor="middle" '
        f'font-size="13">{escape(title)}</text>',
    ]
    for i in range(n):
        for j in range(n):
            t = (v[i, j] - vmin) / span
            r, g, b = int(255 * t), int(80 + 100 * t), int(255 * (1 - t))
            parts.append(f'<rect x="{_num(40 + i * cell)}" y="{_num(40 + (n - 1 - j) * cell)}" '
                         f'width="{_num(cell)}" height="{_num(cell)}" fill="rgb({r},{g},{b})"/>')
    if box is not None:
        b0, b1 = ((c - lo) / (hi - lo) * size for c in box)
        parts.append(f'<rect x="{_num(40 + b0)}" y="{_num(40 + size - b1)}" width="{_num(b1 - b0)}" '
                     f'height="{_num(b1 - b0)}" fill="none" stroke="black" stroke-width="2"/>')
    parts.append(f'<text x="40" y="{size + 58}">{_tick(lo)}</text>')
    parts.append(f'<text x="{40 + size}" y="{size + 58}" text-anchor="end">{_tick(hi)}</text>')
    parts.append(f'<text x="{size + 55}" y="60">max {_tick(vmax)}</text>')
    parts.append(f'<text x="{size + 55}" y="80">min {_tick(vmin)}</text>')
    parts.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(parts) + "\n")
    return path
