"""Figures written next to the CSV reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

COLORS = ["#2b8cbe", "#e34a33", "#31a354", "#756bb1", "#636363"]

STYLE = {
    "axes.prop_cycle": matplotlib.cycler(color=COLORS),
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.family": "sans-serif",
    "font.size": 8,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.figsize": (4.5, 3.0),
    "figure.dpi": 150,
    "lines.linewidth": 1.0,
    "savefig.bbox": "tight",
}

# no software/version stamp, so identical data gives identical files
_PNG_META = {"Software": None}


def _save(fig, path) -> None:
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def plot_loss(iterations, losses, path, window: int = 20) -> None:
    from .training import smoothed

    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(iterations, losses, alpha=0.35, label="loss")
        sm = smoothed(losses, window)
        if len(sm) < len(losses):
            ax.plot(np.asarray(iterations)[window - 1:], sm, label=f"mean of {window}")
        ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel("training loss")
        ax.legend()
        _save(fig, path)


def plot_metrics(cloud_ids, noisy_chamfer, denoised_chamfer, path) -> None:
    """Grouped bars of Chamfer (x1e-6) per cloud, noisy against denoised."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        x = np.arange(len(cloud_ids))
        ax.bar(x - 0.2, np.asarray(noisy_chamfer) * 1e6, 0.4, label="noisy")
        ax.bar(x + 0.2, np.asarray(denoised_chamfer) * 1e6, 0.4, label="denoised")
        ax.set_xticks(x, cloud_ids, rotation=30, ha="right")
        ax.set_ylabel(r"Chamfer ($\times 10^{-6}$)")
        ax.legend()
        _save(fig, path)


def plot_ablation(table: dict, path) -> None:
    """``table`` maps column label (graph mode or k) to mean Chamfer."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        labels = list(table)
        ax.bar(range(len(labels)), [table[c] * 1e6 for c in labels], color=COLORS[: len(labels)])
        ax.set_xticks(range(len(labels)), labels)
        ax.set_ylabel(r"mean Chamfer ($\times 10^{-6}$)")
        _save(fig, path)


def plot_receptive_field(radii: dict, path, bins: int = 40) -> None:
    """Overlaid histograms of per-point receptive-field radii, one per graph mode."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        hi = max(float(np.max(r)) for r in radii.values())
        edges = np.linspace(0.0, hi if hi > 0 else 1.0, bins + 1)
        for mode, r in radii.items():
            ax.hist(r, bins=edges, histtype="step", label=mode)
        ax.set_xlabel("receptive field radius")
        ax.set_ylabel("points")
        ax.legend()
        _save(fig, path)
