"""Figures for the command-line reports.

matplotlib is imported here only, so the numerical modules never pull it in.
PNG metadata is stripped so that identical data gives identical bytes.
"""
from __future__ import annotations

from pathlib import Path

_DPI = 100


def _pyplot():
    import matplotlib

    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt

    plt.rcParams.update({"svg.hashsalt": "stallbound", "figure.max_open_warning": 0})
    return plt


def _save(fig, path: Path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=_DPI, metadata={"Software": None})
    fig.clf()
    import matplotlib.pyplot as plt

    plt.close(fig)
    return path


def convergence(objectives, path, title: str = "Objective per accepted step") -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(range(len(objectives)), objectives, marker=".", lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("weighted objective")
    ax.set_yscale("log" if min(objectives) > 0 else "linear")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def policy_bars(rows, path) -> Path:
    plt = _pyplot()
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    names = [r.policy for r in rows]
    for ax, attr, label in ((axes[0], "mean_stall", "mean stall bound (s)"), (axes[1], "tail", "tail bound")):
        ax.bar(range(len(rows)), [getattr(r, attr) for r in rows], color="0.4")
        ax.set_xticks(range(len(rows)), names, rotation=30, ha="right")
        ax.set_ylabel(label)
    fig.tight_layout()
    return _save(fig, path)


def sweep_lines(xs, series: dict, path, xlabel: str, ylabel: str) -> Path:
    """One line per policy; ``series`` maps name to y values aligned with ``xs``."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    pos = range(len(xs))
    for name, ys in series.items():
        ax.plot(pos, ys, marker="o", label=name)
    ax.set_xticks(list(pos), [str(x) for x in xs])
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def frontier(means, tails, thetas, path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(means, tails, marker="o")
    for m, t, th in zip(means, tails, thetas):
        ax.annotate(f"{th:.1f}", (m, t), fontsize=7, xytext=(3, 3), textcoords="offset points")
    ax.set_xlabel("weighted mean stall bound (s)")
    ax.set_ylabel("weighted tail bound")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def bound_vs_sim(bound, sim, se, path, ylabel: str = "mean stall (s)") -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 4))
    idx = range(len(bound))
    ax.plot(idx, bound, "s", label="bound", ms=4)
    ax.errorbar(idx, sim, yerr=[2 * s for s in se], fmt="o", ms=3, label="simulated (2 se)")
    ax.set_xlabel("file")
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)
