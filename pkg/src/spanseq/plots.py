"""Report figures: training curves, ROC curves, and ablation bars.

Everything renders through the Agg backend straight to files, so the
functions work in headless runs and never open a window.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .trainer import read_metrics


def plot_training(metrics, out_path):
    """Loss components and learning rate over optimizer steps.

    metrics: a metrics.tsv path or the dict read_metrics returns.
    """
    cols = read_metrics(metrics) if not isinstance(metrics, dict) else metrics
    fig, ax = plt.subplots(figsize=(8, 4.5))
    steps = cols["step"]
    for name, label in (("loss_total", "total"), ("loss_coarse", "coarse"),
                        ("loss_fine", "fine"), ("loss_count", "count")):
        if np.any(cols[name] != 0.0):
            ax.plot(steps, cols[name], label=label, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right", fontsize=8)
    ax2 = ax.twinx()
    ax2.plot(steps, cols["lr"], color="tab:gray", linestyle="--", linewidth=0.8)
    ax2.set_ylabel("learning rate", color="tab:gray")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def roc_points(scores, labels):
    """False/true positive rates swept over score thresholds, ties grouped."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel() == 1
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    # keep only the last index of each tied-score run
    last = np.flatnonzero(np.append(np.diff(s) != 0, True))
    tpr = np.concatenate([[0.0], tp[last] / max(tp[-1], 1)])
    fpr = np.concatenate([[0.0], fp[last] / max(fp[-1], 1)])
    return fpr, tpr


def plot_roc(named_results, out_path):
    """Overlayed ROC curves; named_results maps label -> (scores, labels)."""
    fig, ax = plt.subplots(figsize=(5.5, 5.5))
    for name, (scores, labels) in named_results.items():
        fpr, tpr = roc_points(scores, labels)
        area = float(np.trapezoid(tpr, fpr))
        ax.plot(fpr, tpr, label=f"{name} (AUC {area:.3f})", linewidth=1.2)
    ax.plot([0, 1], [0, 1], color="gray", linestyle=":", linewidth=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_ablation(rows, out_path):
    """Grouped bars: clustering score and both probe AUCs per grid entry."""
    names = [r["config"] for r in rows]
    x = np.arange(len(names))
    width = 0.27
    fig, ax = plt.subplots(figsize=(max(6.0, 1.2 * len(names)), 4.2))
    ax.bar(x - width, [r["nmi_mean"] for r in rows], width, label="NMI",
           yerr=[r["nmi_std"] for r in rows], capsize=3)
    ax.bar(x, [r["auc_lr"] for r in rows], width, label="AUC (LR)")
    ax.bar(x + width, [r["auc_mlp"] for r in rows], width, label="AUC (MLP)")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
