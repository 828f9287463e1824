"""Static figure rendering for evaluation reports and heatmap inspection.

All functions write image files (Agg backend); nothing opens a window.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .detector import Heatmap


def plot_success_curve(curves: dict[str, dict], path: str | Path, title: str = "Registration success") -> None:
    """One line per labelled curve dict ({'thresholds', 'curve', 'auc'})."""
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for label, data in sorted(curves.items()):
        ax.plot(
            data["thresholds"], data["curve"],
            marker=".", markersize=3, linewidth=1.2,
            label=f"{label} (AUC {data['auc']:.3f})",
        )
    ax.set_xlabel("error threshold [px]")
    ax.set_ylabel("fraction of pairs registered")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_keypoint_distances(
    sweeps: dict[str, Sequence[dict]],
    path: str | Path,
    title: str = "Keypoint distance vs. match fraction",
) -> None:
    """Mean (solid) and median (dashed) matched-keypoint distance per kept
    fraction of matches, per labelled method."""
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for label, sweep in sorted(sweeps.items()):
        fracs = [s["fraction"] for s in sweep]
        ax.plot(fracs, [s["mean_px"] for s in sweep], marker="o", markersize=3,
                linewidth=1.2, label=f"{label} mean")
        ax.plot(fracs, [s["median_px"] for s in sweep], marker="s", markersize=3,
                linewidth=1.0, linestyle="--", label=f"{label} median")
    ax.set_xlabel("fraction of matches kept (closest first)")
    ax.set_ylabel("keypoint distance [px]")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_heatmap_preview(
    heatmap: Heatmap,
    path: str | Path,
    image: Optional[np.ndarray] = None,
) -> None:
    """Colormapped heatmap preview, optionally beside the source image."""
    n = 2 if image is not None else 1
    fig, axes = plt.subplots(1, n, figsize=(4.2 * n, 4))
    axes = np.atleast_1d(axes)
    if image is not None:
        axes[0].imshow(image)
        axes[0].set_title("image")
        axes[0].axis("off")
    shown = np.ma.masked_where(~heatmap.validity_mask, heatmap.values)
    im = axes[-1].imshow(shown, cmap="viridis")
    axes[-1].set_title(f"{heatmap.kind} ({heatmap.polarity})")
    axes[-1].axis("off")
    fig.colorbar(im, ax=axes[-1], fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
