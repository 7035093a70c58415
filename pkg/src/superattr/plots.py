"""Report figures rendered next to the delimited outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import ScoreReport

FIGSIZE = (7.0, 4.2)


def save_training_curves(records: list[dict], path: Path | str) -> None:
    """Loss-vs-epoch curves from training_log.jsonl records."""
    epochs = [r["epoch"] for r in records]
    fig, ax = plt.subplots(figsize=FIGSIZE, layout="constrained")
    for key, label in [("loss_total", "total"), ("loss_asym", "classification"),
                       ("loss_scr", "consistency")]:
        ax.plot(epochs, [r[key] for r in records], label=label, linewidth=1.5)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_ap_figures(report: ScoreReport, out_dir: Path | str, novel_indices=None) -> list[Path]:
    """Bar charts: per-class AP (base vs novel) and group means."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    aps = np.array([np.nan if a is None else a for a in report.per_class_ap])
    novel = set(int(i) for i in novel_indices) if novel_indices is not None else set()
    colors = ["tab:orange" if i in novel else "tab:blue" for i in range(aps.size)]
    fig, ax = plt.subplots(figsize=FIGSIZE, layout="constrained")
    ax.bar(np.arange(aps.size), np.nan_to_num(aps), color=colors, width=0.85)
    ax.set_xlabel("attribute class")
    ax.set_ylabel("average precision")
    ax.set_ylim(0, 1.02)
    ax.grid(True, axis="y", alpha=0.3)
    if novel:
        handles = [plt.Rectangle((0, 0), 1, 1, color=c) for c in ("tab:blue", "tab:orange")]
        ax.legend(handles, ["base", "novel"], loc="lower right")
    p1 = out_dir / "ap_per_class.png"
    fig.savefig(p1, dpi=150)
    plt.close(fig)
    written.append(p1)

    names, vals = [], []
    for name, stat in report.groups.items():
        if stat.mean_ap is not None:
            names.append(name)
            vals.append(stat.mean_ap)
    fig, ax = plt.subplots(figsize=(5.0, 4.0), layout="constrained")
    ax.bar(names, vals, color="tab:green", width=0.6)
    for i, v in enumerate(vals):
        ax.text(i, v + 0.01, f"{v:.3f}", ha="center", fontsize=9)
    ax.set_ylabel("mean average precision")
    ax.set_ylim(0, 1.08)
    ax.grid(True, axis="y", alpha=0.3)
    p2 = out_dir / "ap_groups.png"
    fig.savefig(p2, dpi=150)
    plt.close(fig)
    written.append(p2)
    return written
