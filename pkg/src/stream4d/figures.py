"""Matplotlib figure rendering for the report-producing commands.

Every figure lands next to its delimited output so a run leaves both a
machine-readable CSV and something a human can glance at.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_loss_figure(rows, path):
    """Loss parts and learning rate over training steps."""
    steps = [r["step"] for r in rows]
    fig, (ax, ax_lr) = plt.subplots(2, 1, figsize=(7, 6), sharex=True,
                                    height_ratios=[3, 1])
    for key in ("L_camera", "L_depth", "L_pmap", "L_track", "L_total"):
        ax.plot(steps, [r[key] for r in rows], label=key, linewidth=1.0)
    ax.set_yscale("symlog")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8, ncol=3)
    ax.grid(alpha=0.3)
    ax_lr.plot(steps, [r["lr"] for r in rows], color="tab:gray")
    ax_lr.set_ylabel("lr")
    ax_lr.set_xlabel("step")
    ax_lr.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_latency_figure(rows, path):
    """Last-frame latency per mode against sequence length."""
    modes = sorted({r["mode"] for r in rows})
    fig, ax = plt.subplots(figsize=(6, 4))
    for mode in modes:
        pts = sorted((r["frames"], r["seconds"]) for r in rows
                     if r["mode"] == mode and r["frame_index"] == r["frames"])
        if pts:
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=mode)
    ax.set_xlabel("sequence length T")
    ax.set_ylabel("last-frame latency [s]")
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_pose_curves_figure(pose_metrics, path):
    """RRA/RTA/min accuracy against the angular threshold."""
    taus = np.arange(1, 31)
    both = np.minimum.reduce([pose_metrics.rra_curve, pose_metrics.rta_curve])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(taus, pose_metrics.rra_curve, label="rotation")
    ax.plot(taus, pose_metrics.rta_curve, label="translation dir")
    ax.plot(taus, both, label="min (upper bound)", linestyle="--", color="gray")
    ax.set_xlabel("threshold [deg]")
    ax.set_ylabel("pair accuracy")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend()
    ax.set_title(f"auc30 = {pose_metrics.auc30:.3f}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
