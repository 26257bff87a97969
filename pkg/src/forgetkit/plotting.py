"""Figures for run reports. Everything renders to files through the Agg backend."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 120,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.frameon": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps repeated renders byte-stable
    fig.savefig(path, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_similarity_profiles(profiles: Mapping[str, Sequence[float]], path, title: str = "") -> Path:
    """One cosine-vs-depth curve per labelled profile (group 0 = embeddings)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, cos in sorted(profiles.items()):
            ax.plot(range(len(cos)), cos, marker="o", ms=3, lw=1.2, label=label)
        ax.set_xlabel("layer group (input to output)")
        ax.set_ylabel("cosine similarity")
        if title:
            ax.set_title(title)
        ax.legend(fontsize=7)
        return _save(fig, path)


def plot_lambda_sweep(lams: Sequence[float], forgetting: Sequence[float], target_loss: Sequence[float],
                      path, monotone: bool | None = None) -> Path:
    """Previous-domain forgetting and new-domain loss against lambda (symlog x axis)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(lams, forgetting, marker="o", color="C0", label="previous-domain forgetting")
        ax.set_xscale("symlog", linthresh=0.5)
        ax.set_xlabel("lambda")
        ax.set_ylabel("relative loss increase", color="C0")
        ax2 = ax.twinx()
        ax2.plot(lams, target_loss, marker="s", color="C3", label="new-domain loss")
        ax2.set_ylabel("new-domain loss", color="C3")
        ax2.grid(False)
        if monotone is not None:
            ax.set_title(f"monotone check: {'pass' if monotone else 'FAIL'}",
                         color="green" if monotone else "red")
        return _save(fig, path)


def plot_overall(labels: Sequence[str], overall: Sequence[float], path, ylabel: str = "mean held-out loss") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.45 * len(labels) + 1.5), 3.4))
        ax.bar(range(len(labels)), overall, color="C0")
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=7)
        ax.set_ylabel(ylabel)
        return _save(fig, path)
