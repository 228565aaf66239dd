"""Figure rendering for run reports: field heatmaps, loss curves, sweeps.

Figures land next to the delimited outputs they illustrate; every figure is
optional (runs remain fully usable from the CSV/GFTENSOR artifacts alone).
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_field_grid(path, fields: list, titles: list, cmap="viridis") -> None:
    """One row of square heatmaps with individual colorbars."""
    n = len(fields)
    fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 3.0), squeeze=False)
    for ax, field, title in zip(axes[0], fields, titles):
        field = np.asarray(field)
        n_p = int(round(np.sqrt(field.size)))
        im = ax.imshow(field.reshape(n_p, n_p), cmap=cmap)
        ax.set_title(title, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_loss_curve(path, history, columns: dict, xlabel="epoch", logy=False) -> None:
    """columns: label -> index into each history row."""
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    rows = np.asarray(history, dtype=np.float64)
    for label, idx in columns.items():
        ax.plot(rows[:, 0], rows[:, idx], label=label, linewidth=1.0)
    ax.set_xlabel(xlabel)
    if logy:
        ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_sweep_curve(path, xs, series: dict, xlabel="latent dimension") -> None:
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    for label, ys in series.items():
        ax.plot(xs, ys, marker="o", label=label, linewidth=1.0)
    ax.set_xlabel(xlabel)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
