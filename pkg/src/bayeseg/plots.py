"""Figure rendering for the report paths.

Every CSV the toolkit emits gets a companion PNG: training curves next to
the training log, variance-vs-T curves next to the sweep table, and the
uncertainty-response chart next to the degradation report. All rendering
uses the Agg backend so it works headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_training_curves(log_rows, path):
    """Loss/KL on the left axis pair, validation F1/IoU on the right panel."""
    epochs = [r.epoch for r in log_rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(epochs, [r.loss for r in log_rows], marker="o", label="loss")
    ax1.plot(epochs, [r.nll for r in log_rows], marker="s", label="nll")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("training objective")
    ax1.legend(loc="best")
    ax1.grid(alpha=0.3)
    ax2.plot(epochs, [r.f1 for r in log_rows], marker="o", label="val F1")
    ax2.plot(epochs, [r.iou for r in log_rows], marker="s", label="val IoU")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("validation score")
    ax2.set_ylim(0, 1.05)
    ax2.legend(loc="best")
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_sweep_variance(rows, path, labels=("term1", "term2")):
    """Variance of the two scalar uncertainty estimates against the MC budget."""
    ts = [r["T"] for r in rows]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for ax, key, label in zip(axes, ("var_term1", "var_term2"), labels):
        ax.plot(ts, [r[key] for r in rows], marker="o")
        ax.set_xlabel("MC samples T")
        ax.set_ylabel(f"variance of {label} estimate")
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_degradation_response(rows, path):
    """Per-spec percent change in mean total uncertainty, with F1 overlaid."""
    names = [r.spec_id for r in rows]
    pct = [r.pct_change_unc for r in rows]
    f1s = [r.mean_f1 for r in rows]
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(max(5, 1.4 * len(names)), 3.8))
    ax.bar(x, pct, color="#5b8db8")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylabel("total uncertainty change vs clean [%]")
    ax.axhline(0, color="black", linewidth=0.8)
    ax.grid(alpha=0.3, axis="y")
    ax2 = ax.twinx()
    ax2.plot(x, f1s, color="#c44e52", marker="o", label="mean F1")
    ax2.set_ylabel("mean F1")
    ax2.set_ylim(0, 1.05)
    ax2.legend(loc="lower left")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_inference_panel(image, result, path):
    """Input, MC mean and the three uncertainty maps side by side."""
    panels = [
        ("input", image, "gray"),
        ("mean probability", result.mean_map, "gray"),
        ("aleatoric", result.aleatoric_map, "magma"),
        ("epistemic", result.epistemic_map, "magma"),
        ("total", result.total_map, "magma"),
    ]
    fig, axes = plt.subplots(1, len(panels), figsize=(3 * len(panels), 3.2))
    for ax, (title, data, cmap) in zip(axes, panels):
        im = ax.imshow(np.asarray(data), cmap=cmap)
        ax.set_title(title, fontsize=9)
        ax.axis("off")
        if cmap == "magma":
            fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
