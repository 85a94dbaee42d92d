"""Figures for the regime matrix and the RL cost sweeps."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import TEST_REGIMES, TRAIN_REGIMES  # noqa: E402


def _save(fig, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_matrix(report, path):
    """Heatmap of one task's train x test accuracies."""
    trains = [t for t in TRAIN_REGIMES if any(c[0] == t for c in report.cells)]
    tests = [t for t in TEST_REGIMES if any(c[1] == t for c in report.cells)]
    grid = np.full((len(trains), len(tests)), np.nan)
    for i, tr in enumerate(trains):
        for j, te in enumerate(tests):
            grid[i, j] = report.cells.get((tr, te), np.nan)
    fig, ax = plt.subplots(figsize=(1.6 * len(tests) + 1.5, 1.2 * len(trains) + 1))
    ax.imshow(grid, vmin=0.0, vmax=1.0, cmap="viridis")
    ax.set_xticks(range(len(tests)), [f"Test{t}" for t in tests])
    ax.set_yticks(range(len(trains)), [f"Train{t}" for t in trains])
    for i in range(len(trains)):
        for j in range(len(tests)):
            if not np.isnan(grid[i, j]):
                ax.text(j, i, f"{grid[i, j]:.2f}", ha="center", va="center",
                        color="white" if grid[i, j] < 0.6 else "black")
    ax.set_title(f"Task {report.task} ({report.kind})")
    fig.tight_layout()
    return _save(fig, path)


def plot_sweep(rows, path):
    """Ask rate and accuracy against cost, one line per task and scenario."""
    groups = {}
    for r in rows:
        groups.setdefault((int(r["task"]), r["scenario"]), []).append(r)
    fig, (ax_ask, ax_acc) = plt.subplots(1, 2, figsize=(10, 4))
    for (task, scenario), rs in sorted(groups.items()):
        rs = sorted(rs, key=lambda r: float(r["cost"]))
        cost = [float(r["cost"]) for r in rs]
        label = f"Task {task} {scenario}"
        ax_ask.plot(cost, [float(r["ask_rate"]) for r in rs], marker="o", label=label)
        ax_acc.plot(cost, [float(r["accuracy"]) for r in rs], marker="o", label=label)
    ax_ask.set_xlabel("cost of asking")
    ax_ask.set_ylabel("ask rate")
    ax_acc.set_xlabel("cost of asking")
    ax_acc.set_ylabel("accuracy")
    for ax in (ax_ask, ax_acc):
        ax.set_ylim(-0.02, 1.02)
        ax.grid(alpha=0.3)
    ax_acc.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)
