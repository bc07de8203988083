"""Report figures rendered next to the delimited output of each command."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def training_curves(log_rows: list[dict], path) -> Path:
    epochs = [r["epoch"] for r in log_rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax1.plot(epochs, [r["recon"] for r in log_rows], label="recon")
    ax1.plot(epochs, [r["val_recon"] for r in log_rows], label="val recon")
    if any(r["dir"] > 0 for r in log_rows):
        ax1.plot(epochs, [r["dir"] for r in log_rows], label="dir", alpha=0.7)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.set_yscale("log")
    ax1.legend(fontsize=8)
    ax1.set_title("losses")
    ax2.plot(epochs, [r["lr"] for r in log_rows], color="tab:green")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("learning rate")
    ax2.set_title("cosine schedule")
    fig.tight_layout()
    return _save(fig, path)


def score_separation(scores, labels, report, path) -> Path:
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    bins = np.histogram_bin_edges(scores, bins=30)
    ax.hist(scores[labels == 0], bins=bins, alpha=0.6, label="normal", color="tab:blue")
    ax.hist(scores[labels == 1], bins=bins, alpha=0.6, label="defect", color="tab:red")
    ax.set_xlabel("image score (max of smoothed squared error)")
    ax.set_ylabel("cases")
    ax.legend(fontsize=8)
    ax.set_title(f"O-AUROC {report.o_auroc:.3f}   P-AUROC {report.p_auroc:.3f}   AUPRO {report.aupro:.3f}")
    return _save(fig, path)


def uncertainty_collapse(initial_u, final_u, path) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.4))
    parts = ax.violinplot([initial_u, final_u], showmedians=True)
    for body in parts["bodies"]:
        body.set_alpha(0.6)
    ax.set_xticks([1, 2], ["initial view", "final decision"])
    ax.set_ylabel("uncertainty U")
    ax.set_yscale("log")
    ax.set_title("uncertainty collapse under re-orientation")
    return _save(fig, path)


def accuracy_lift(initial_acc, final_acc, path) -> Path:
    fig, ax = plt.subplots(figsize=(3.6, 3.4))
    bars = ax.bar(["initial", "final"], [100 * initial_acc, 100 * final_acc], color=["tab:gray", "tab:green"])
    for bar, v in zip(bars, [initial_acc, final_acc]):
        ax.text(bar.get_x() + bar.get_width() / 2, bar.get_height() + 1, f"{100 * v:.1f}%", ha="center", fontsize=9)
    ax.set_ylim(0, 110)
    ax.set_ylabel("accuracy on hard cases [%]")
    ax.set_title("active re-orientation lift")
    return _save(fig, path)


def bench_scaling(rows: list[dict], path) -> Path:
    ns = [r["N"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.4))
    ax.plot(ns, [r["la3_ms"] for r in rows], "o-", label="linear attention")
    ax.plot(ns, [r["quadratic_ms"] for r in rows], "s-", label="quadratic reference")
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("tokens N")
    ax.set_ylabel("time per call [ms]")
    ax.legend(fontsize=8)
    ax.set_title("attention cost scaling")
    return _save(fig, path)
