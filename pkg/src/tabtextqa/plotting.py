"""Report figures.  Rendered with the Agg backend and no timestamps so reruns give identical PNGs."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_SAVE = {"dpi": 100, "metadata": {"Software": None}}


def _finish(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, format="png", **_SAVE)
    plt.close(fig)
    return path


def plot_history(history: list[dict], path, title: str) -> Path:
    """Training loss (left axis) and any dev metrics (right axis) per epoch."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    epochs = [row["epoch"] for row in history]
    ax.plot(epochs, [row["loss"] for row in history], color="tab:blue", marker="o", label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    metrics = [k for k in (history[0] if history else {}) if k not in ("epoch", "loss", "skipped")]
    if metrics:
        ax2 = ax.twinx()
        for name in metrics:
            ax2.plot(epochs, [row[name] for row in history], marker="s", linestyle="--", label=f"dev {name}")
        ax2.set_ylim(0, 1.02)
        ax2.set_ylabel("dev metric")
        ax2.legend(loc="center right", fontsize=8)
    ax.set_title(title)
    return _finish(fig, path)


def plot_breakdown(report_dict: dict, path, title: str) -> Path:
    """EA/PA bars per question type and per program length."""
    groups = [("by_question_type", "question type"), ("by_length", "program steps")]
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
    for ax, (key, label) in zip(axes, groups):
        cats = list(report_dict[key])
        ea = [report_dict[key][c]["ea"] for c in cats]
        pa = [report_dict[key][c]["pa"] for c in cats]
        xs = range(len(cats))
        ax.bar([x - 0.2 for x in xs], ea, width=0.4, label="EA")
        ax.bar([x + 0.2 for x in xs], pa, width=0.4, label="PA")
        ax.set_xticks(list(xs))
        ax.set_xticklabels([f"{c}\n(n={report_dict[key][c]['n']})" for c in cats], fontsize=8)
        ax.set_ylim(0, 1.05)
        ax.set_xlabel(label)
    axes[0].legend(fontsize=8)
    fig.suptitle(title)
    return _finish(fig, path)


def plot_ablation(summary: dict, path, title: str = "ablation") -> Path:
    names = list(summary)
    fig, ax = plt.subplots(figsize=(6, 3.2))
    xs = range(len(names))
    ax.bar([x - 0.2 for x in xs], [summary[n]["ea"] for n in names], width=0.4, label="EA")
    ax.bar([x + 0.2 for x in xs], [summary[n]["pa"] for n in names], width=0.4, label="PA")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(names)
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    ax.set_title(title)
    return _finish(fig, path)
