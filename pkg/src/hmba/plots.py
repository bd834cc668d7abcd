"""Figure rendering for the command-line reports.

Every figure lands as a PNG next to the delimited output it illustrates.
The Agg backend is forced before pyplot loads so the renderer never needs
a display.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

__all__ = ["plot_flops_sweep", "plot_training_curves", "plot_ablation"]


def _finish(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_flops_sweep(rows: list[dict], path: str | Path) -> Path:
    """Forward flops against sequence length, one line per module.

    rows follow the sweep schema: module, length, flops, params.
    """
    by_module: dict[str, list[tuple[int, int]]] = {}
    for row in rows:
        by_module.setdefault(row["module"], []).append(
            (row["length"], row["flops"]))
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for name, pts in by_module.items():
        pts.sort()
        style = "--" if "attention" in name else "-"
        ax.plot([p[0] for p in pts], [p[1] for p in pts],
                style, marker="o", label=name)
    ax.set_xlabel("frames")
    ax.set_ylabel("forward flops")
    ax.set_yscale("log")
    ax.set_xscale("log", base=2)
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=8)
    ax.set_title("scan arrangements vs attention baselines")
    return _finish(fig, path)


def plot_training_curves(history: list[tuple[int, float, float | None]],
                         path: str | Path, title: str = "training") -> Path:
    """Loss per step plus the sparse accuracy trace on a twin axis."""
    steps = [h[0] for h in history]
    losses = [h[1] for h in history]
    acc_pts = [(h[0], h[2]) for h in history if h[2] is not None]
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    ax.plot(steps, losses, color="tab:blue", alpha=0.8, label="batch loss")
    ax.set_xlabel("step")
    ax.set_ylabel("loss", color="tab:blue")
    ax2 = ax.twinx()
    if acc_pts:
        ax2.plot([p[0] for p in acc_pts], [p[1] for p in acc_pts],
                 color="tab:red", marker="o", label="test accuracy")
    ax2.set_ylabel("accuracy (%)", color="tab:red")
    ax2.set_ylim(0, 100)
    ax.grid(True, alpha=0.3)
    ax.set_title(title)
    return _finish(fig, path)


def plot_ablation(rows: list[dict], path: str | Path) -> Path:
    """Final accuracy per configuration as horizontal bars.

    rows need `name` and `accuracy` keys; multiple rows per name are drawn
    as mean with min/max whiskers.
    """
    grouped: dict[str, list[float]] = {}
    for row in rows:
        grouped.setdefault(row["name"], []).append(float(row["accuracy"]))
    names = list(grouped)
    means = [sum(v) / len(v) for v in grouped.values()]
    lo = [m - min(v) for m, v in zip(means, grouped.values())]
    hi = [max(v) - m for m, v in zip(means, grouped.values())]
    fig, ax = plt.subplots(figsize=(6.4, 0.5 + 0.45 * len(names)))
    ypos = range(len(names))
    ax.barh(list(ypos), means, xerr=[lo, hi], color="tab:blue", alpha=0.8,
            capsize=3)
    ax.set_yticks(list(ypos), names)
    ax.invert_yaxis()
    ax.set_xlabel("final test accuracy (%)")
    ax.set_xlim(0, 100)
    ax.grid(True, axis="x", alpha=0.3)
    ax.set_title("ablation over context arrangements")
    return _finish(fig, path)
