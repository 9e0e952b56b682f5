"""Minimal SVG line charts (no plotting dependency)."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#7f7f7f")
MUTED = "#c8c8c8"


def _ticks(lo: float, hi: float, n: int = 5) -> np.ndarray:
    if hi <= lo:
        hi = lo + 1.0
    step = (hi - lo) / n
    mag = 10 ** np.floor(np.log10(step))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= step), default=step)
    return np.arange(np.ceil(lo / step) * step, hi + 0.5 * step, step)


def line_chart(
    path,
    series: Mapping[str, Sequence[float]],
    *,
    title: str = "",
    x_labels: Sequence[str] | None = None,
    y_label: str = "",
    muted: Sequence[str] = (),
    vline: int | None = None,
    width: int = 800,
    height: int = 420,
) -> None:
    """Write one line per entry of ``series`` against a shared integer x axis.

    Series named in ``muted`` are drawn thin and grey behind the others;
    ``vline`` marks an x index (e.g. the intervention day).
    """
    left, right, top, bottom = 70, 20, 40, 50
    pw, ph = width - left - right, height - top - bottom
    arrays = {k: np.asarray(v, dtype=float) for k, v in series.items()}
    n = max(a.size for a in arrays.values())
    finite = np.concatenate([a[np.isfinite(a)] for a in arrays.values()] + [np.zeros(0)])
    lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    ticks = _ticks(lo, hi)
    lo, hi = min(lo, ticks[0]), max(hi, ticks[-1])
    if hi == lo:
        hi = lo + 1.0

    def sx(i):
        return left + pw * (i / max(n - 1, 1))

    def sy(v):
        return top + ph * (1 - (v - lo) / (hi - lo))

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.0f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
    ]
    for t in ticks:
        y = sy(t)
        out.append(f'<line x1="{left}" x2="{left + pw}" y1="{y:.1f}" y2="{y:.1f}" stroke="#eee"/>')
        out.append(f'<text x="{left - 6}" y="{y + 4:.1f}" text-anchor="end">{t:g}</text>')
    if x_labels is not None and len(x_labels):
        for i in np.linspace(0, len(x_labels) - 1, min(6, len(x_labels))).round().astype(int):
            out.append(f'<text x="{sx(i):.1f}" y="{top + ph + 18}" text-anchor="middle">{escape(str(x_labels[i]))}</text>')
    out.append(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>')
    if y_label:
        out.append(
            f'<text transform="translate(16,{top + ph / 2:.0f}) rotate(-90)" text-anchor="middle">{escape(y_label)}</text>'
        )
    if vline is not None:
        out.append(f'<line x1="{sx(vline):.1f}" x2="{sx(vline):.1f}" y1="{top}" y2="{top + ph}" stroke="#555" stroke-dasharray="4 3"/>')

    ordered = [k for k in arrays if k in muted] + [k for k in arrays if k not in muted]
    colour = 0
    legend = []
    for name in ordered:
        a = arrays[name]
        pts = " ".join(f"{sx(i):.1f},{sy(v):.1f}" for i, v in enumerate(a) if np.isfinite(v))
        if name in muted:
            out.append(f'<polyline points="{pts}" fill="none" stroke="{MUTED}" stroke-width="1"/>')
            continue
        c = PALETTE[colour % len(PALETTE)]
        colour += 1
        out.append(f'<polyline points="{pts}" fill="none" stroke="{c}" stroke-width="1.8"/>')
        legend.append((name, c))
    for k, (name, c) in enumerate(legend):
        y = top + 14 + 16 * k
        out.append(f'<line x1="{left + 10}" x2="{left + 30}" y1="{y - 4}" y2="{y - 4}" stroke="{c}" stroke-width="2"/>')
        out.append(f'<text x="{left + 36}" y="{y}">{escape(name)}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")
