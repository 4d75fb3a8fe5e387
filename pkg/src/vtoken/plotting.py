"""Figures for training runs and token maps. Files only; never opens a window."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    return path


def _smooth(y: np.ndarray, window: int) -> np.ndarray:
    if window <= 1 or len(y) < window:
        return y
    kernel = np.ones(window) / window
    return np.convolve(y, kernel, mode="valid")


def loss_curves(runs: dict, path, title: str = "training loss"):
    """One panel per run; ``runs`` maps a label to a RunMetrics."""
    n = len(runs)
    fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 2.8), squeeze=False, layout="constrained")
    for ax, (label, metrics) in zip(axes[0], runs.items()):
        steps = metrics.column("step")
        for key, style in (("loss", "-"), ("loss_lm", "--"), ("loss_vm", ":")):
            y = metrics.column(key) if all(r.get(key) is not None for r in metrics.rows) else None
            if y is None or not len(y):
                continue
            w = max(1, len(y) // 50)
            ys = _smooth(y, w)
            ax.plot(steps[len(steps) - len(ys):], ys, style, lw=1.2, label=key)
        ax.set_title(label, fontsize=10)
        ax.set_xlabel("step")
        ax.set_yscale("log")
        ax.legend(fontsize=7, frameon=False)
    axes[0][0].set_ylabel("loss")
    fig.suptitle(title, fontsize=11)
    return _save(fig, path)


def ablation(mm, lm, path):
    """Stage IV text loss for the multi-modal and LM-only runs on one axis."""
    fig, ax = plt.subplots(figsize=(4.5, 3))
    for label, metrics in (("MM loss", mm), ("LM-only loss", lm)):
        y = metrics.column("loss_lm")
        ys = _smooth(y, max(1, len(y) // 50))
        ax.plot(metrics.column("step")[len(y) - len(ys):], ys, lw=1.2, label=label)
    ax.set_xlabel("step")
    ax.set_ylabel("loss_lm")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    return _save(fig, path)


def token_map(pixels: np.ndarray, tmap, path):
    """The image with each patch labelled by its token string and score."""
    rows, cols = tmap.grid.shape
    h, w = pixels.shape[0] // rows, pixels.shape[1] // cols
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(pixels, interpolation="nearest")
    for r in range(rows):
        for c in range(cols):
            ax.text(c * w + w / 2 - 0.5, r * h + h / 2 - 0.5,
                    f"{tmap.token_strings[r][c]}\n{tmap.scores[r, c]:.2f}",
                    ha="center", va="center", fontsize=6, color="white",
                    bbox=dict(facecolor="black", alpha=0.45, lw=0, pad=1))
    ax.set_xticks(np.arange(0, pixels.shape[1] + 1, w) - 0.5, minor=False)
    ax.set_yticks(np.arange(0, pixels.shape[0] + 1, h) - 0.5, minor=False)
    ax.grid(color="gray", lw=0.5)
    ax.set_xticklabels([])
    ax.set_yticklabels([])
    ax.set_title(tmap.source, fontsize=9)
    return _save(fig, path)
