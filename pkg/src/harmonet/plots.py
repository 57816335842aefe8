"""Static SVG charts and PGM image grids, written without a plotting library."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

W, H = 480, 320
PAD = 48
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def _frame(title: str, xlabel: str, ylabel: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD / 2}" y2="{H - PAD}" stroke="black"/>',
        f'<line x1="{PAD}" y1="{PAD / 2}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>',
        f'<text x="{W / 2}" y="{H - 10}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
        f'<text x="14" y="{H / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {H / 2})">{escape(ylabel)}</text>',
    ]


def _scale(v, lo, hi, a, b):
    span = hi - lo if hi > lo else 1.0
    return a + (np.asarray(v, dtype=float) - lo) / span * (b - a)


def _range(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return 0.0, 1.0
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    return lo, hi


def _ticks(lo, hi, horizontal: bool) -> list[str]:
    out = []
    for t in np.linspace(lo, hi, 5):
        if horizontal:
            x = _scale(t, lo, hi, PAD, W - PAD)
            out.append(f'<text x="{x:.1f}" y="{H - PAD + 14}" text-anchor="middle" font-size="10">{t:.3g}</text>')
        else:
            y = _scale(t, lo, hi, H - PAD, PAD)
            out.append(f'<text x="{PAD - 4}" y="{y:.1f}" text-anchor="end" font-size="10">{t:.3g}</text>')
    return out


def _legend(names: Sequence[str]) -> list[str]:
    out = []
    for i, n in enumerate(names):
        y = PAD + 14 * i
        c = COLORS[i % len(COLORS)]
        out.append(f'<rect x="{W - 150}" y="{y - 8}" width="10" height="10" fill="{c}"/>')
        out.append(f'<text x="{W - 135}" y="{y + 1}" font-size="11">{escape(n)}</text>')
    return out


def line_plot(path, x, series: dict[str, Sequence[float]], title: str, xlabel: str, ylabel: str) -> Path:
    ylo, yhi = _range(np.concatenate([np.asarray(v, dtype=float) for v in series.values()]))
    xlo, xhi = _range(x)
    parts = _frame(title, xlabel, ylabel) + _ticks(xlo, xhi, True) + _ticks(ylo, yhi, False)
    xs = _scale(x, xlo, xhi, PAD, W - PAD)
    for i, (name, ys) in enumerate(series.items()):
        pts = " ".join(f"{a:.1f},{b:.1f}" for a, b in zip(xs, _scale(ys, ylo, yhi, H - PAD, PAD)))
        parts.append(f'<polyline fill="none" stroke="{COLORS[i % len(COLORS)]}" stroke-width="1.5" points="{pts}"/>')
    parts += _legend(list(series)) + ["</svg>"]
    Path(path).write_text("\n".join(parts) + "\n")
    return Path(path)


def bar_plot(path, labels: Sequence[str], values: Sequence[float], title: str, ylabel: str) -> Path:
    v = np.nan_to_num(np.asarray(values, dtype=float))
    hi = max(float(v.max()), 1e-12)
    parts = _frame(title, "", ylabel) + _ticks(0.0, hi, False)
    slot = (W - 1.5 * PAD) / max(len(v), 1)
    for i, (lab, val) in enumerate(zip(labels, v)):
        x = PAD + i * slot + slot * 0.15
        top = _scale(val, 0.0, hi, H - PAD, PAD)
        parts.append(f'<rect x="{x:.1f}" y="{top:.1f}" width="{slot * 0.7:.1f}" '
                     f'height="{H - PAD - top:.1f}" fill="{COLORS[0]}"/>')
        parts.append(f'<text x="{x + slot * 0.35:.1f}" y="{H - PAD + 14}" text-anchor="middle" '
                     f'font-size="10">{escape(str(lab))}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
    return Path(path)


def scatter_plot(path, x, y, title: str, xlabel: str, ylabel: str) -> Path:
    xlo, xhi = _range(x)
    ylo, yhi = _range(y)
    parts = _frame(title, xlabel, ylabel) + _ticks(xlo, xhi, True) + _ticks(ylo, yhi, False)
    for a, b in zip(_scale(x, xlo, xhi, PAD, W - PAD), _scale(y, ylo, yhi, H - PAD, PAD)):
        parts.append(f'<circle cx="{a:.1f}" cy="{b:.1f}" r="2.5" fill="{COLORS[0]}" fill-opacity="0.7"/>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
    return Path(path)


def write_pgm(path, image: np.ndarray) -> Path:
    """Binary 8-bit PGM from a 2-D array with values in [0, 1]."""
    img = np.clip(np.asarray(image, dtype=float), 0.0, 1.0)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {img.shape}")
    data = np.round(img * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())
    return Path(path)


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, dims, maxval, rest = raw.split(b"\n", 3)
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = map(int, dims.split())
    return np.frombuffer(rest, dtype=np.uint8, count=w * h).reshape(h, w) / float(maxval)


def tile(rows: Sequence[Sequence[np.ndarray]], gap: int = 1) -> np.ndarray:
    """Lay equally sized 2-D tiles out on a grid separated by ``gap`` white pixels."""
    h, w = rows[0][0].shape
    ncol = max(len(r) for r in rows)
    out = np.ones((len(rows) * (h + gap) - gap, ncol * (w + gap) - gap))
    for i, r in enumerate(rows):
        for j, t in enumerate(r):
            out[i * (h + gap):i * (h + gap) + h, j * (w + gap):j * (w + gap) + w] = t
    return out
