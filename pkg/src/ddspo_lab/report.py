"""Scatter rendering: a dependency-free SVG writer and matplotlib panel figures.

The SVG writer is the byte-stable artifact consumed by the sweep and the
determinism checks.  Only sample markers carry a ``fill`` colour; centers,
axes and the frame are stroked so that the set of fill colours equals the
set of plotted conditions.
"""

from __future__ import annotations

import colorsys
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .data import MixtureSpec

VIEW = 4.0
CANVAS = 400
PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
           "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]


def class_colors(K: int) -> list[str]:
    if K <= len(PALETTE):
        return PALETTE[:K]
    out = []
    for k in range(K):
        r, g, b = colorsys.hsv_to_rgb(k / K, 0.75, 0.85)
        out.append("#{:02x}{:02x}{:02x}".format(round(r * 255), round(g * 255), round(b * 255)))
    return out


def _px(v):
    return (np.asarray(v) + VIEW) / (2 * VIEW) * CANVAS


def _py(v):
    return CANVAS - _px(v)


def scatter_svg(points, labels, spec: MixtureSpec, title: str = "") -> str:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    colors = class_colors(spec.num_classes)
    o = CANVAS / 2
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{CANVAS}" height="{CANVAS}" '
        f'viewBox="0 0 {CANVAS} {CANVAS}">',
        f'<rect x="0" y="0" width="{CANVAS}" height="{CANVAS}" fill="none" stroke="#000000"/>',
        f'<line x1="0" y1="{o:g}" x2="{CANVAS}" y2="{o:g}" stroke="#cccccc"/>',
        f'<line x1="{o:g}" y1="0" x2="{o:g}" y2="{CANVAS}" stroke="#cccccc"/>',
    ]
    if title:
        parts.append(f'<text x="6" y="16" font-size="12" font-family="sans-serif" stroke="none">{escape(title)}</text>')
    parts.append('<g id="samples" stroke="none">')
    for (x, y), c in zip(points, labels):
        if abs(x) > VIEW or abs(y) > VIEW:
            continue
        parts.append(f'<circle cx="{_px(x):.2f}" cy="{_py(y):.2f}" r="1.6" fill="{colors[c]}" fill-opacity="0.6"/>')
    parts.append("</g>")
    parts.append('<g id="centers" fill="none" stroke-width="2">')
    for k, (x, y) in enumerate(spec.centers):
        cx, cy = _px(x), _py(y)
        parts.append(f'<path d="M{cx - 6:.2f} {cy - 6:.2f}L{cx + 6:.2f} {cy + 6:.2f}M{cx - 6:.2f} {cy + 6:.2f}'
                     f'L{cx + 6:.2f} {cy - 6:.2f}" stroke="#000000"/>')
    parts.append("</g>")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_scatter_svg(points, labels, spec: MixtureSpec, path, title: str = "") -> Path:
    path = Path(path)
    path.write_text(scatter_svg(points, labels, spec, title))
    return path


# -- matplotlib --------------------------------------------------------------

def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams.update({"font.size": 9, "axes.titlesize": 10, "svg.hashsalt": "ddspo-lab",
                         "savefig.dpi": 120})
    return plt


def _scatter_ax(ax, points, labels, spec, title):
    colors = class_colors(spec.num_classes)
    points = np.asarray(points).reshape(-1, 2)
    labels = np.asarray(labels)
    for k in range(spec.num_classes):
        sel = points[labels == k]
        ax.scatter(sel[:, 0], sel[:, 1], s=3, alpha=0.5, color=colors[k], linewidths=0)
    ax.scatter(spec.centers[:, 0], spec.centers[:, 1], marker="x", s=30, color="k", linewidths=1.2)
    ax.set_xlim(-VIEW, VIEW)
    ax.set_ylim(-VIEW, VIEW)
    ax.set_aspect("equal")
    ax.set_xticks([])
    ax.set_yticks([])
    ax.set_title(title)


def save_panels(panels, spec: MixtureSpec, path, ncols: int | None = None) -> Path:
    """Render ``[(title, points, labels), ...]`` side by side into one PNG/PDF/SVG."""
    plt = _pyplot()
    ncols = ncols or len(panels)
    nrows = int(np.ceil(len(panels) / ncols))
    fig, axes = plt.subplots(nrows, ncols, figsize=(2.2 * ncols, 2.3 * nrows), squeeze=False)
    for ax, (title, pts, labs) in zip(axes.ravel(), panels):
        _scatter_ax(ax, pts, labs, spec, title)
    for ax in axes.ravel()[len(panels):]:
        ax.set_axis_off()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, metadata={"Software": None} if path.suffix == ".png" else {"Date": None})
    plt.close(fig)
    return path


def save_sweep_heatmap(rows, path, beta_values, n_values) -> Path:
    """One consistency heat map per method over the (N, beta) grid, mean over seeds."""
    plt = _pyplot()
    methods = sorted({r["method"] for r in rows})
    fig, axes = plt.subplots(1, len(methods), figsize=(3.0 * len(methods), 2.8), squeeze=False)
    for ax, m in zip(axes[0], methods):
        grid = np.full((len(n_values), len(beta_values)), np.nan)
        for i, n in enumerate(n_values):
            for j, b in enumerate(beta_values):
                vals = [r["consistency"] for r in rows if r["method"] == m and r["N"] == n
                        and r["beta"] == b and r["status"] == "ok"]
                if vals:
                    grid[i, j] = np.mean(vals)
        im = ax.imshow(grid, vmin=0.5, vmax=1.0, cmap="viridis", origin="lower")
        for i in range(len(n_values)):
            for j in range(len(beta_values)):
                if np.isfinite(grid[i, j]):
                    ax.text(j, i, f"{grid[i, j]:.2f}", ha="center", va="center", color="w", fontsize=8)
        ax.set_xticks(range(len(beta_values)), [f"{b:g}" for b in beta_values])
        ax.set_yticks(range(len(n_values)), [str(n) for n in n_values])
        ax.set_xlabel("beta")
        ax.set_ylabel("N")
        ax.set_title(m)
    fig.colorbar(im, ax=axes[0].tolist(), shrink=0.8, label="consistency")
    path = Path(path)
    fig.savefig(path, metadata={"Software": None} if path.suffix == ".png" else {"Date": None})
    plt.close(fig)
    return path
