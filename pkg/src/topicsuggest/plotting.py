"""PNG figures for evaluation reports: topic acceptance rates and accuracy
against the ordinal number of the suggestion."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_META = {"Software": None}  # keep PNG bytes free of version strings


def plot_acceptance_rates(rates: dict, path) -> Path:
    names = list(rates)
    fig, ax = plt.subplots(figsize=(7, 3.6))
    ax.bar(range(len(names)), [rates[n] for n in names], color="#4c72b0")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels([n.replace("_", " ") for n in names], rotation=30, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("acceptance rate")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return Path(path)


def plot_accuracy_by_index(curves: dict, path, max_index: int = 6) -> Path:
    """``curves`` maps a model name to its list of {"index", "n_events", "accuracy"} rows."""
    fig, ax = plt.subplots(figsize=(6, 3.6))
    for name, rows in curves.items():
        rows = [r for r in rows if r["index"] <= max_index]
        ax.plot([r["index"] for r in rows], [r["accuracy"] for r in rows], marker="o", label=name)
    ax.set_xlabel("suggestion number in conversation")
    ax.set_ylabel("micro accuracy")
    ax.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return Path(path)
