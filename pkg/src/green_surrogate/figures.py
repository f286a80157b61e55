"""Figure rendering for CLI reports.

Everything draws through the Agg backend straight to files; nothing here
opens a window. Fields are plotted with x1 horizontal and x2 vertical, so
values[i, j] lands at (x1_i, x2_j).
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .grid import Field
from .trainer import EpochStats


def _imshow(ax, field: Field, title: str, cmap: str = "viridis"):
    d = field.grid.domain
    im = ax.imshow(field.values.T, origin="lower", cmap=cmap,
                   extent=(d.x0, d.x0 + d.L1, d.y0, d.y0 + d.L2),
                   aspect="equal", interpolation="nearest")
    ax.set_title(title, fontsize=10)
    ax.set_xlabel("x1")
    ax.set_ylabel("x2")
    return im


def plot_fields(panels: Sequence[tuple[str, Field]], path, suptitle: str | None = None,
                cmap: str = "viridis") -> Path:
    """One heatmap panel per (label, field) pair, shared figure."""
    if not panels:
        raise ValueError("need at least one panel")
    n = len(panels)
    fig, axes = plt.subplots(1, n, figsize=(4.2 * n, 3.8), squeeze=False)
    for ax, (label, field) in zip(axes[0], panels):
        im = _imshow(ax, field, label, cmap=cmap)
        fig.colorbar(im, ax=ax, shrink=0.85)
    if suptitle:
        fig.suptitle(suptitle)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=140)
    plt.close(fig)
    return path


def plot_comparison(computed: Field, reference: Field | None, path,
                    labels: tuple[str, str] = ("computed", "reference"),
                    suptitle: str | None = None) -> Path:
    """Computed vs reference plus their absolute difference; falls back to a
    single panel when there is nothing to compare against."""
    if reference is None:
        return plot_fields([(labels[0], computed)], path, suptitle=suptitle)
    diff = Field(computed.grid, abs(computed.values - reference.values))
    return plot_fields(
        [(labels[0], computed), (labels[1], reference), ("abs difference", diff)],
        path, suptitle=suptitle)


def plot_contour(field: Field, path, title: str = "u", levels: int = 20) -> Path:
    g = field.grid
    fig, ax = plt.subplots(figsize=(4.6, 4.0))
    X1, X2 = g.mesh()
    cs = ax.contourf(X1, X2, field.values, levels=levels, cmap="viridis")
    ax.contour(X1, X2, field.values, levels=levels, colors="k", linewidths=0.3)
    fig.colorbar(cs, ax=ax)
    ax.set_title(title)
    ax.set_xlabel("x1")
    ax.set_ylabel("x2")
    ax.set_aspect("equal")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=140)
    plt.close(fig)
    return path


def plot_history(history: Sequence[EpochStats], path) -> Path:
    """Loss curves on a log axis next to the sweep-count schedule."""
    if not history:
        raise ValueError("empty training history")
    epochs = [r.epoch for r in history]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9.0, 3.6))
    ax1.semilogy(epochs, [r.train_loss for r in history], label="train")
    ax1.semilogy(epochs, [r.val_loss for r in history], label="validation")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend()
    ax1.grid(True, alpha=0.3)
    ax2.step(epochs, [r.k for r in history], where="post")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("k (Jacobi sweeps per target)")
    ax2.grid(True, alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=140)
    plt.close(fig)
    return path
