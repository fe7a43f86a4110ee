"""SVG figures for run reports and memory sweeps."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed ids and no timestamp, so the same data renders to the same bytes
plt.rcParams["svg.hashsalt"] = "modil"
plt.rcParams["svg.fonttype"] = "none"

COLORS = {"finetune": "#d62728", "joint": "#2ca02c", "icarl": "#1f77b4", "bic": "#9467bd",
          "lucir": "#ff7f0e"}
LABELS = {"finetune": "Finetune", "joint": "Joint", "icarl": "iCaRL", "bic": "BiC", "lucir": "LUCIR"}


def _save(fig, path) -> None:
    fig.savefig(path, format="svg", bbox_inches="tight", metadata={"Date": None})
    plt.close(fig)


def mean_curves(reports) -> dict[str, np.ndarray]:
    """Overall accuracy per task, averaged over the runs of each strategy."""
    by = {}
    for r in reports:
        by.setdefault(r.strategy, []).append(r.overall)
    out = {}
    for s, curves in by.items():
        n = min(len(c) for c in curves)
        out[s] = np.mean([c[:n] for c in curves], axis=0)
    return out


def plot_accuracy_curves(reports, path, title: str | None = None) -> None:
    """One polyline per strategy: overall seen-class accuracy after each task."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for s, y in mean_curves(reports).items():
        x = np.arange(1, len(y) + 1)
        ax.plot(x, 100 * y, marker="o", ms=4, color=COLORS.get(s), label=LABELS.get(s, s))
    ax.set_xlabel("task")
    ax.set_ylabel("accuracy on seen classes (%)")
    ax.set_ylim(0, 100)
    ax.xaxis.set_major_locator(matplotlib.ticker.MaxNLocator(integer=True))
    ax.grid(alpha=0.3)
    ax.legend(frameon=False)
    if title:
        ax.set_title(title)
    _save(fig, path)


def plot_memory_sweep(summary: list[dict], path, references: dict[str, float] | None = None,
                      title: str | None = None) -> None:
    """Mean final accuracy against budget with std whiskers.

    ``references`` maps a strategy name (joint, finetune) to a constant level
    drawn as a horizontal line.
    """
    fig, ax = plt.subplots(figsize=(6, 4))
    by = {}
    for row in summary:
        by.setdefault(row["strategy"], []).append(row)
    for s, rows in by.items():
        rows = sorted(rows, key=lambda r: r["budget"])
        b = [r["budget"] for r in rows]
        m = [100 * r["mean_final_acc"] for r in rows]
        e = [100 * r["std_final_acc"] for r in rows]
        ax.errorbar(b, m, yerr=e, marker="o", ms=4, capsize=3, color=COLORS.get(s), label=LABELS.get(s, s))
    for s, level in (references or {}).items():
        ax.axhline(100 * level, ls="--", lw=1, color=COLORS.get(s, "0.4"), label=LABELS.get(s, s))
    ax.set_xlabel("exemplar budget")
    ax.set_ylabel("final accuracy (%)")
    ax.set_ylim(0, 100)
    ax.grid(alpha=0.3)
    ax.legend(frameon=False)
    if title:
        ax.set_title(title)
    _save(fig, path)
