"""Figure rendering for reports. Always uses the non-interactive Agg backend."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (7.0, 3.6),
    "figure.dpi": 110,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
}


def _finish(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_equity(curve, path, benchmark=None, label: str = "strategy") -> Path:
    """Cumulative return of ``curve`` (and an optional benchmark) over time."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        x = np.arange(curve.values.size)
        ax.plot(x, 100 * (curve.values / curve.values[0] - 1), lw=1.4, label=label)
        if benchmark is not None:
            bx = np.arange(benchmark.values.size)
            ax.plot(bx, 100 * (benchmark.values / benchmark.values[0] - 1), lw=1.0, ls="--",
                    color="0.4", label="benchmark")
        ax.set_xlabel("period")
        ax.set_ylabel("cumulative return (%)")
        ax.legend(loc="upper left")
        return _finish(fig, path)


def plot_fitness(records, path) -> Path:
    """Fitness per evaluation, one line per (agent, generation)."""
    series = defaultdict(list)
    for r in records:
        series[(r["generation"], r["agent"])].append((r["epoch"], r["fitness"]))
    gens = sorted({g for g, _ in series})
    span = {g: max(e for (gg, _), pts in series.items() if gg == g for e, _ in pts) for g in gens}
    offsets = {g: sum(span[h] for h in gens if h < g) for g in gens}
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
        for (g, agent), pts in sorted(series.items()):
            e, f = zip(*pts)
            ax.plot(np.array(e) + offsets[g], f, marker=".", lw=1, color=colors[agent % len(colors)],
                    label=f"agent {agent}" if g == gens[0] else None)
        for g in gens[1:]:
            ax.axvline(offsets[g] + 0.5, color="0.6", lw=0.8, ls=":")
        ax.set_xlabel("epoch (generation barriers dotted)")
        ax.set_ylabel("fitness")
        ax.legend(loc="best", ncol=2)
        return _finish(fig, path)
