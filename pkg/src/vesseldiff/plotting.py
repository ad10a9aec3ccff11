"""Figure style and the report plots."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

COLORS = {"iou": "#1f77b4", "dice": "#d62728", "precision": "#2ca02c"}


def set_style():
    plt.rcParams.update({
        "font.size": 10,
        "axes.labelsize": 10,
        "legend.fontsize": 8,
        "xtick.labelsize": 8,
        "ytick.labelsize": 8,
        "axes.spines.top": False,
        "axes.spines.right": False,
    })


def save(fig, path, dpi: int = 150) -> Path:
    path = Path(path)
    fig.savefig(path, bbox_inches="tight", dpi=dpi)
    plt.close(fig)
    return path


def plot_metric_vs_sigma(table, path, title: str = ""):
    """Mean metric with a one-std band against corruption level."""
    set_style()
    table = sorted(table, key=lambda r: r["sigma"])
    sig = [r["sigma"] for r in table]
    fig, ax = plt.subplots(figsize=(4.2, 3.0))
    for m, color in COLORS.items():
        mean = [r[f"{m}_mean"] for r in table]
        std = [r[f"{m}_std"] for r in table]
        ax.plot(sig, mean, marker="o", color=color, label=m.capitalize() if m != "iou" else "IoU")
        ax.fill_between(sig, [a - b for a, b in zip(mean, std)], [a + b for a, b in zip(mean, std)],
                        color=color, alpha=0.15, linewidth=0)
    ax.set_xlabel("Gaussian noise $\\sigma$ (0-255 scale)")
    ax.set_ylabel("score")
    ax.set_ylim(0, 1)
    ax.set_xticks(sig)
    if title:
        ax.set_title(title)
    ax.legend(frameon=False)
    return save(fig, path)


def plot_training_curves(rows, path, keys=("total_g", "total_d", "cyc", "diff")):
    set_style()
    fig, ax = plt.subplots(figsize=(5.0, 3.0))
    steps = [r["step"] for r in rows]
    for k in keys:
        ys = [r.get(k) for r in rows]
        if all(y is None for y in ys):
            continue
        ax.plot(steps, [float("nan") if y is None else y for y in ys], label=k, linewidth=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    return save(fig, path)
