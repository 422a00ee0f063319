"""Matplotlib figures written next to the CSV reports."""
from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.4,
    "lines.markersize": 4,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def figsize(width=4.5, height=None):
    if height is None:
        height = width * (math.sqrt(5) - 1) / 2
    return width, height


def _save(fig, path):
    fig.savefig(str(path))
    plt.close(fig)


def plot_stratified(curves, path, title=None):
    """``curves`` maps a legend label to a :class:`StratifiedAccuracy`."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=figsize())
        for label, acc in curves.items():
            ax.plot(acc.distances, acc.accuracy, marker="o", label=label)
        ax.set_xlabel("distance to boundary (px)")
        ax.set_ylabel("pixel accuracy")
        ax.legend(frameon=False)
        if title:
            ax.set_title(title)
        _save(fig, path)


def plot_ablation(rows, path):
    steps = [r["steps"] for r in rows]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=figsize())
        ax.plot(steps, [r["mean_dice"] for r in rows], marker="o", color="C0")
        ax.set_xlabel("FRF steps N")
        ax.set_ylabel("mean Dice", color="C0")
        ax2 = ax.twinx()
        ax2.plot(steps, [r["mean_hd_mm"] for r in rows], marker="s", color="C3")
        ax2.set_ylabel("mean HD (mm)", color="C3")
        ax2.spines["right"].set_visible(True)
        ax.set_xticks(steps)
        _save(fig, path)


def plot_training_curves(history, path):
    epochs = [h["epoch"] for h in history]
    with plt.rc_context(RC):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=figsize(8, 3))
        ax1.plot(epochs, [h["train_loss"] for h in history], label="train")
        ax1.plot(epochs, [h["val_loss"] for h in history], label="val")
        ax1.set_xlabel("epoch")
        ax1.set_ylabel("loss")
        ax1.legend(frameon=False)
        ax2.plot(epochs, [h["val_dice"] for h in history], color="C2")
        ax2.set_xlabel("epoch")
        ax2.set_ylabel("val mean Dice")
        _save(fig, path)
