"""Static report figures rendered next to the delimited outputs."""

from __future__ import annotations

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .heads import CLASS_NAMES  # noqa: E402


def plot_loss_trace(trace: list, path):
    """Per-step loss components from a training trace."""
    steps = [e["step"] for e in trace]
    fig, ax = plt.subplots(figsize=(7, 4))
    for key in ("total", "cls", "coord", "trajectory"):
        ax.plot(steps, [e[key] for e in trace], label=key, linewidth=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss (per-frame mean)")
    ax.set_yscale("log")
    ax.legend()
    ax.set_title("training loss")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_gate_bins(rows: list, path):
    """Mean LiDAR gate weight binned by point support."""
    labels = [r[0] for r in rows]
    counts = [r[1] for r in rows]
    means = [r[2] if r[2] is not None else np.nan for r in rows]
    fig, ax = plt.subplots(figsize=(8, 4))
    xs = np.arange(len(labels))
    ax.bar(xs, means, color="#4878a8")
    for x, c in zip(xs, counts):
        ax.text(x, 0.01, str(c), ha="center", fontsize=7, color="white")
    ax.set_xticks(xs)
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=8)
    ax.set_xlabel("LiDAR points in predicted box")
    ax.set_ylabel("mean LiDAR gate weight")
    ax.set_title("modality gate vs point support (bar labels: counts)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_scene_bev(scene, predictions, frame_idx: int, path):
    """Top-down view of one frame: boxes, ground-truth and predicted futures."""
    from .scenesim import agent_future

    frame = scene.frames[frame_idx]
    fig, ax = plt.subplots(figsize=(7, 7))
    if len(frame.points):
        ax.scatter(frame.points[:, 0], frame.points[:, 1], s=1, c="#cccccc", label="lidar")
    palette = plt.cm.tab10(np.linspace(0, 1, len(CLASS_NAMES)))
    for agent in frame.agents:
        color = palette[CLASS_NAMES.index(agent.class_name)]
        length, width = agent.size[0], agent.size[1]
        c, s = np.cos(agent.yaw), np.sin(agent.yaw)
        corners = np.array(
            [[length / 2, width / 2], [length / 2, -width / 2],
             [-length / 2, -width / 2], [-length / 2, width / 2], [length / 2, width / 2]]
        ) @ np.array([[c, s], [-s, c]])
        ax.plot(
            corners[:, 0] + agent.center[0], corners[:, 1] + agent.center[1],
            color=color, linewidth=1.0,
        )
        future, valid = agent_future(scene, frame_idx, agent.agent_id)
        if valid.any():
            ax.plot(future[valid, 0], future[valid, 1], "--", color=color, linewidth=1.0)
    for pred in predictions:
        if pred.frame != frame_idx or pred.scene_id != scene.scene_id:
            continue
        for k in range(pred.trajectory.shape[0]):
            ax.plot(
                pred.trajectory[k, :, 0], pred.trajectory[k, :, 1],
                color="black", alpha=0.25, linewidth=0.8,
            )
        ax.plot(pred.center[0], pred.center[1], "kx", markersize=6)
    ax.set_xlim(-52, 52)
    ax.set_ylim(-52, 52)
    ax.set_aspect("equal")
    ax.set_title(f"scene {scene.scene_id} frame {frame_idx} "
                 "(solid: boxes, dashed: gt future, black: predictions)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
