"""PNG figures written next to the text reports. Uses the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .losses import EvalReport  # noqa: E402

HORIZON_MINUTES = (5, 10, 15, 30, 45, 60)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_history(history, path) -> Path:
    fig, (ax_loss, ax_val) = plt.subplots(2, 1, figsize=(7, 6))
    steps = np.arange(len(history.step_loss))
    ax_loss.semilogy(steps, np.maximum(history.step_loss, 1e-12), lw=0.8)
    for s in history.cycle_start_steps[1:]:
        ax_loss.axvline(s, color="0.7", ls="--", lw=0.8)
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("train loss (normalized)")
    lr_ax = ax_loss.twinx()
    lr_ax.plot(steps, history.step_lr, color="tab:orange", lw=0.6)
    lr_ax.set_ylabel("learning rate")

    if history.epoch_val:
        cycles, epochs, scores = zip(*history.epoch_val)
        ax_val.plot(np.arange(1, len(scores) + 1), scores, marker="o", ms=3)
        for i, c in enumerate(cycles[1:], 1):
            if c != cycles[i - 1]:
                ax_val.axvline(i + 0.5, color="0.7", ls="--", lw=0.8)
    ax_val.set_xlabel("epoch")
    ax_val.set_ylabel("validation MSE (raw)")
    fig.tight_layout()
    return _save(fig, path)


def plot_report(reports: dict[str, EvalReport], path) -> Path:
    """Per-horizon raw MSE bars, one group per named report."""
    fig, ax = plt.subplots(figsize=(7, 4))
    n = max(len(reports), 1)
    width = 0.8 / n
    x = np.arange(len(HORIZON_MINUTES))
    for i, (name, rep) in enumerate(reports.items()):
        vals = list(rep.per_frame_raw) or [rep.mse_raw] * len(HORIZON_MINUTES)
        ax.bar(x + (i - (n - 1) / 2) * width, vals, width, label=f"{name} ({rep.mse_raw:.3f})")
    ax.set_xticks(x)
    ax.set_xticklabels([f"{m} min" for m in HORIZON_MINUTES])
    ax.set_ylabel("MSE (raw units)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_mask(mask: np.ndarray, path, nodes: np.ndarray | None = None) -> Path:
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.imshow(np.asarray(mask, dtype=float), cmap="gray_r", interpolation="nearest")
    if nodes is not None and len(nodes):
        ax.scatter(nodes[:, 1], nodes[:, 0], s=4, c="tab:red")
    ax.set_title(f"road pixels: {int(np.count_nonzero(mask))}")
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    return _save(fig, path)
