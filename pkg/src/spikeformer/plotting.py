"""Training-curve figures for a RunReport, rendered off-screen to image files."""

from __future__ import annotations

from pathlib import Path
from typing import Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402

from .training import RunReport  # noqa: E402


def plot_report(report: RunReport, path: Union[str, Path], title: str = "") -> Path:
    """Loss, accuracy and learning rate per epoch, side by side."""
    if not report.records:
        raise ValueError("cannot plot an empty report")
    epochs = [r.epoch for r in report.records]
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2), constrained_layout=True)
    ax_loss, ax_acc, ax_lr = axes

    ax_loss.plot(epochs, report.train_loss, marker="o", ms=3)
    ax_loss.set_ylabel("train loss")

    ax_acc.plot(epochs, report.train_acc, marker="o", ms=3, label="train")
    evals = [(e, a) for e, a in zip(epochs, report.eval_acc) if a is not None]
    if evals:
        ax_acc.plot(*zip(*evals), marker="s", ms=3, label="eval")
    ax_acc.set_ylim(-0.02, 1.02)
    ax_acc.set_ylabel("accuracy")
    ax_acc.legend(frameon=False)

    ax_lr.plot(epochs, report.lr, marker="o", ms=3)
    ax_lr.set_ylabel("learning rate (end of epoch)")

    for ax in axes:
        ax.set_xlabel("epoch")
        ax.xaxis.set_major_locator(MaxNLocator(integer=True))
        ax.grid(alpha=0.3)
    if title:
        fig.suptitle(title)
    out = Path(path)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out
