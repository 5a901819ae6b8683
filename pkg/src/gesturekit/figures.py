"""Report figures rendered straight to files; no display server needed."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def loss_curve(traces, path):
    """One line per named trace, over epochs."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, values in traces.items():
        ax.plot(range(1, len(values) + 1), values, label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def metric_bars(report, path):
    pairs = [
        ("diversity A", report.diversity_a),
        ("diversity B", report.diversity_b),
        ("fgd", report.fgd),
        ("jerk A", report.jerk_a),
        ("jerk B", report.jerk_b),
    ]
    if report.l1_mean is not None:
        pairs.append(("L1", report.l1_mean))
    names = [n for n, _ in pairs]
    values = [v for _, v in pairs]
    fig, ax = plt.subplots(figsize=(6, 4))
    bars = ax.bar(names, values, color="#4878a8")
    ax.bar_label(bars, fmt="%.3g", padding=2)
    ax.set_ylabel("value")
    ax.tick_params(axis="x", rotation=20)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def space_scatter(gesture_points, path, text_points=()):
    """2-D projection of the joint space: gestures colored by cluster,
    recent text queries as crosses."""
    fig, ax = plt.subplots(figsize=(5.5, 5))
    if gesture_points:
        xy = np.array([p["xy"] for p in gesture_points])
        clusters = np.array([p.get("cluster", 0) for p in gesture_points])
        ax.scatter(xy[:, 0], xy[:, 1], c=clusters, cmap="tab10", s=22, alpha=0.8)
    if text_points:
        txy = np.array([p["xy"] for p in text_points])
        ax.scatter(txy[:, 0], txy[:, 1], marker="x", c="crimson", s=40)
    ax.set_xlabel("proj 0")
    ax.set_ylabel("proj 1")
    ax.set_aspect("equal", adjustable="datalim")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
