"""Figure rendering for run directories: training curves, confusion matrix
heatmaps, and Gabor filter montages, written alongside the CSV outputs."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def plot_training_curves(rows, path):
    """rows: the per-epoch metric dicts emitted by network.train."""
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.5))
    for split in ("train", "val"):
        sel = [r for r in rows if r["split"] == split]
        if not sel:
            continue
        epochs = [r["epoch"] for r in sel]
        ax_loss.plot(epochs, [r["loss"] for r in sel], label=split)
        ax_acc.plot(epochs, [r["accuracy"] for r in sel], label=split)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(0, 1.02)
    ax_acc.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_confusion(confusion, path):
    confusion = np.asarray(confusion)
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(confusion, cmap="Blues")
    n = confusion.shape[0]
    for i in range(n):
        for j in range(n):
            ax.text(j, i, str(confusion[i, j]), ha="center", va="center", fontsize=8)
    ax.set_xlabel("predicted")
    ax.set_ylabel("truth")
    ax.set_xticks(range(n))
    ax.set_yticks(range(n))
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_filter_montage(kernels, path, max_filters=40):
    """kernels: (n, k, k) array of synthesized Gabor kernels."""
    kernels = np.asarray(kernels)[:max_filters]
    n = kernels.shape[0]
    cols = 8
    rows = -(-n // cols)
    fig, axes = plt.subplots(rows, cols, figsize=(cols * 1.1, rows * 1.1))
    axes = np.atleast_2d(axes)
    for i in range(rows * cols):
        ax = axes[i // cols, i % cols]
        ax.axis("off")
        if i < n:
            ax.imshow(kernels[i], cmap="RdBu_r")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
