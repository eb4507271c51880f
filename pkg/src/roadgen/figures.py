"""Report figures: confusion heatmap, training curves, ablation bars.

Rendering is file-only (Agg); every function writes a PNG next to the
delimited artifact it illustrates and returns the path written.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import MetricsReport
from .trainer import RoundRow


def confusion_figure(report: MetricsReport, path: str | Path) -> Path:
    path = Path(path)
    cm = np.asarray(report.confusion)
    names = list(report.per_class) or [str(i) for i in range(cm.shape[0])]
    fig, ax = plt.subplots(figsize=(4.2, 3.8))
    im = ax.imshow(cm, cmap="Blues")
    ax.set_xticks(range(len(names)), names)
    ax.set_yticks(range(len(names)), names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    title = report.domain or "confusion"
    if report.variant:
        title += f" ({report.variant})"
    ax.set_title(title)
    threshold = cm.max() / 2 if cm.max() else 0
    for i in range(cm.shape[0]):
        for j in range(cm.shape[1]):
            ax.text(j, i, str(cm[i, j]), ha="center", va="center",
                    color="white" if cm[i, j] > threshold else "black")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def curves_figure(rounds: Sequence[RoundRow], path: str | Path) -> Path:
    path = Path(path)
    x = np.arange(len(rounds))
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    ax.plot(x, [r.mean_l_tr for r in rounds], label="train loss")
    ax.plot(x, [r.mean_l_ce_te for r in rounds], label="test cross-entropy")
    if any(r.mean_l_dg_te for r in rounds):
        ax.plot(x, [r.mean_l_dg_te for r in rounds],
                label="generalization penalty")
    for i in range(1, len(rounds)):
        if rounds[i].epoch != rounds[i - 1].epoch:
            ax.axvline(i - 0.5, color="0.85", linewidth=0.8, zorder=0)
    ax.set_xlabel("round")
    ax.set_ylabel("mean loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def ablation_figure(averages: Mapping[str, tuple[float, float | None]],
                    path: str | Path) -> Path:
    """Bar per variant of mean held-out macro-F1, optional std error bars."""
    path = Path(path)
    variants = list(averages)
    means = [averages[v][0] for v in variants]
    stds = [averages[v][1] for v in variants]
    errs = None if any(s is None for s in stds) else stds
    fig, ax = plt.subplots(figsize=(4.6, 3.2))
    ax.bar(range(len(variants)), means, yerr=errs, capsize=4,
           color="tab:blue")
    ax.set_xticks(range(len(variants)), variants)
    ax.set_ylabel("held-out macro F1")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path
