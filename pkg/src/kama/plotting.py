"""Report figures.  Always renders off-screen to files."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_loss_traces(traces: Mapping[str, Sequence[Sequence[float]]], path) -> Path:
    """Median (and 25-75% band) of per-frame loss traces, one line per arm."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        for name, tr in traces.items():
            if not tr:
                continue
            n = min(len(t) for t in tr)
            if n == 0:
                continue
            a = np.array([t[:n] for t in tr])
            it = np.arange(1, n + 1)
            lo, med, hi = np.percentile(a, [25, 50, 75], axis=0)
            ax.plot(it, med, label=name)
            ax.fill_between(it, lo, hi, alpha=0.2)
        ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel("total loss")
        if ax.lines:
            ax.legend(frameon=False)
        return _save(fig, path)


def plot_metric_bars(values: Mapping[str, float], path, ylabel: str = "PA-MPJPE (mm)") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 3.0))
        names = list(values)
        ax.bar(names, [values[n] for n in names], color="0.55")
        for i, n in enumerate(names):
            ax.annotate(f"{values[n]:.1f}", (i, values[n]), ha="center", va="bottom", fontsize=8)
        ax.set_ylabel(ylabel)
        return _save(fig, path)


def plot_per_frame(frame_ids: Sequence[int], series: Mapping[str, Sequence[float]], path,
                   ylabel: str = "error (mm)") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.0))
        for name, ys in series.items():
            ax.plot(frame_ids, ys, marker="o", ms=3, lw=1, label=name)
        ax.set_xlabel("frame")
        ax.set_ylabel(ylabel)
        ax.legend(frameon=False)
        return _save(fig, path)
