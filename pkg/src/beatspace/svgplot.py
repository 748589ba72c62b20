"""Minimal deterministic SVG output for scatter plots and waveform panels.

Files are plain text with fixed float formatting and no timestamps, so
re-running a pipeline stage reproduces them byte for byte.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

__all__ = ["scatter_svg", "waveform_panels_svg"]

PALETTE = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
    "#e377c2", "#7f7f7f", "#bcbd22", "#17becf", "#aec7e8", "#ffbb78",
    "#98df8a", "#ff9896", "#c5b0d5", "#c49c94", "#f7b6d2", "#c7c7c7",
    "#dbdb8d", "#9edae5",
]

_SIZE = 640
_PAD = 40


def _scale(values: np.ndarray, lo: float, hi: float, size: int) -> np.ndarray:
    span = hi - lo
    if span == 0:
        return np.full_like(values, _PAD + size / 2.0)
    return _PAD + (values - lo) / span * size


def scatter_svg(
    path: str | Path,
    Y: np.ndarray,
    labels=None,
    title: str = "",
    point_radius: float = 1.4,
    max_legend: int = 24,
) -> None:
    """Scatter plot of an (N, 2) embedding, colored by categorical labels."""
    Y = np.asarray(Y, dtype=np.float64)
    inner = _SIZE - 2 * _PAD
    xs = _scale(Y[:, 0], Y[:, 0].min(), Y[:, 0].max(), inner)
    # SVG y grows downward; flip so the embedding keeps its orientation.
    ys = _SIZE - _scale(Y[:, 1], Y[:, 1].min(), Y[:, 1].max(), inner)

    if labels is None:
        color_of = np.zeros(len(Y), dtype=np.int64)
        classes = []
    else:
        labels = np.asarray(labels, dtype=str)
        classes = sorted(set(labels.tolist()))
        index = {c: i for i, c in enumerate(classes)}
        color_of = np.array([index[l] for l in labels.tolist()])

    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SIZE}" height="{_SIZE}" '
        f'viewBox="0 0 {_SIZE} {_SIZE}">',
        f'<rect width="{_SIZE}" height="{_SIZE}" fill="white"/>',
    ]
    if title:
        lines.append(f'<text x="{_PAD}" y="24" font-family="sans-serif" font-size="14">{title}</text>')
    for x, y, c in zip(xs, ys, color_of):
        color = PALETTE[int(c) % len(PALETTE)] if labels is not None else "#444444"
        lines.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{point_radius}" fill="{color}" fill-opacity="0.7"/>')
    for i, cls in enumerate(classes[:max_legend]):
        y = _PAD + 16 * i
        color = PALETTE[i % len(PALETTE)]
        lines.append(f'<circle cx="{_SIZE - 110}" cy="{y}" r="4" fill="{color}"/>')
        lines.append(
            f'<text x="{_SIZE - 100}" y="{y + 4}" font-family="sans-serif" font-size="11">{_xml(cls)}</text>'
        )
    lines.append("</svg>")
    Path(path).write_text("\n".join(lines) + "\n")


def _xml(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")


def waveform_panels_svg(path: str | Path, panels: list[dict], width: int = 260, height: int = 160) -> None:
    """Grid of waveform panels.

    Each panel dict: title, representatives (list of 1-D arrays), mean,
    std (per-sample).  Representatives draw gray, the mean black, and the
    mean +- std band as two thin lines.
    """
    cols = min(3, max(1, len(panels)))
    rows = (len(panels) + cols - 1) // cols
    total_w = cols * width
    total_h = rows * height
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{total_w}" height="{total_h}" '
        f'viewBox="0 0 {total_w} {total_h}">',
        f'<rect width="{total_w}" height="{total_h}" fill="white"/>',
    ]
    for i, panel in enumerate(panels):
        x0 = (i % cols) * width
        y0 = (i // cols) * height
        curves = list(panel.get("representatives", []))
        mean = np.asarray(panel["mean"], dtype=np.float64)
        std = np.asarray(panel.get("std", np.zeros_like(mean)), dtype=np.float64)
        stack = np.vstack(curves + [mean - std, mean + std]) if curves else np.vstack([mean - std, mean + std])
        lo, hi = float(stack.min()), float(stack.max())
        if hi == lo:
            hi = lo + 1.0

        def poly(wave: np.ndarray) -> str:
            n = wave.shape[0]
            xs = x0 + 10 + np.arange(n) / max(n - 1, 1) * (width - 20)
            ys = y0 + height - 24 - (wave - lo) / (hi - lo) * (height - 44)
            return " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))

        lines.append(
            f'<text x="{x0 + 10}" y="{y0 + 16}" font-family="sans-serif" font-size="11">'
            f'{_xml(panel.get("title", ""))}</text>'
        )
        for wave in curves:
            lines.append(f'<polyline points="{poly(np.asarray(wave))}" fill="none" stroke="#bbbbbb" stroke-width="0.6"/>')
        lines.append(f'<polyline points="{poly(mean - std)}" fill="none" stroke="#d62728" stroke-width="0.6"/>')
        lines.append(f'<polyline points="{poly(mean + std)}" fill="none" stroke="#d62728" stroke-width="0.6"/>')
        lines.append(f'<polyline points="{poly(mean)}" fill="none" stroke="#000000" stroke-width="1.2"/>')
    lines.append("</svg>")
    Path(path).write_text("\n".join(lines) + "\n")
