"""Query decoding heads and the joint detection/forecasting loss.

A refreshed query decodes into class probabilities over the seven agent
categories plus the empty class, a 3D box, and six candidate future
trajectories over a 6 s horizon at 2 Hz. Training uses a winner-take-all
trajectory loss: only the hypothesis closest to the ground truth (summed
point-wise l2) receives gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import FfnParams, Value
from .geometry import VOLUME_HI, VOLUME_LO

CLASS_NAMES = ("car", "truck", "bus", "trailer", "motorcycle", "bicycle", "pedestrian")
EMPTY_CLASS = len(CLASS_NAMES)  # index 7
N_CLASSES = len(CLASS_NAMES) + 1
N_HYPOTHESES = 6
HORIZON = 12  # 6 s at 2 Hz
BOX_DIM = 8  # cx, cy, cz, l, w, h, sin(yaw), cos(yaw)


@dataclass
class HeadParams:
    class_head: FfnParams  # E -> 8
    box_head: FfnParams  # E -> hidden -> 8
    traj_head: FfnParams  # E -> hidden -> K*T*2

    @staticmethod
    def create(
        rng: np.random.Generator,
        embed_dim: int,
        box_hidden: int = 32,
        traj_hidden: int = 48,
        dtype=np.float64,
    ) -> "HeadParams":
        return HeadParams(
            class_head=FfnParams.create((embed_dim, N_CLASSES), rng, activation=None, dtype=dtype),
            box_head=FfnParams.create((embed_dim, box_hidden, BOX_DIM), rng, scale=0.1, dtype=dtype),
            traj_head=FfnParams.create(
                (embed_dim, traj_hidden, N_HYPOTHESES * HORIZON * 2), rng, scale=0.1, dtype=dtype
            ),
        )

    def parameters(self, prefix: str = "heads") -> dict:
        out = {}
        out.update(self.class_head.parameters(f"{prefix}.cls"))
        out.update(self.box_head.parameters(f"{prefix}.box"))
        out.update(self.traj_head.parameters(f"{prefix}.traj"))
        return out


def gt_box_vector(center, size, yaw: float) -> np.ndarray:
    """Ground-truth box as the 8-vector the box head regresses."""
    center = np.asarray(center, dtype=np.float64)
    size = np.asarray(size, dtype=np.float64)
    return np.concatenate([center, size, [np.sin(yaw), np.cos(yaw)]])


def decode_detection(queries: Value, refs: Value, params: HeadParams):
    """Decode class probabilities (N, 8) and box vectors (N, 8).

    Box centers are offsets in logit space added to the reference point, so a
    zero box head reproduces the denormalized reference exactly. Sizes go
    through exp and are strictly positive; yaw is a raw (sin, cos) pair.
    """
    probs = ad.softmax(ad.ffn_apply(queries, params.class_head), axis=-1)
    raw = ad.ffn_apply(queries, params.box_head)
    center_norm = ad.sigmoid(ad.inverse_sigmoid(refs) + raw[:, 0:3])
    center = center_norm * (VOLUME_HI - VOLUME_LO) + VOLUME_LO
    size = ad.exp(raw[:, 3:6])
    boxes = ad.concat([center, size, raw[:, 6:8]], axis=1)
    return probs, boxes


def decode_trajectories(queries: Value, centers_xy: Value, params: HeadParams) -> Value:
    """Decode (N, K, T, 2) future positions as cumulative displacements."""
    n = queries.data.shape[0]
    disp = ad.ffn_apply(queries, params.traj_head).reshape((n, N_HYPOTHESES, HORIZON, 2))
    steps = ad.cumsum(disp, axis=2)
    return steps + centers_xy.reshape((n, 1, 1, 2))


def select_hypothesis(
    trajectories: np.ndarray, gt_future: np.ndarray, valid: Optional[np.ndarray] = None
) -> int:
    """Index of the hypothesis minimizing summed point-wise l2 distance.

    ``valid`` masks timesteps for agents with shorter futures; ties break to
    the lowest index (np.argmin's first occurrence).
    """
    trajectories = np.asarray(trajectories, dtype=np.float64)
    gt_future = np.asarray(gt_future, dtype=np.float64)
    if valid is None:
        valid = np.ones(len(gt_future), dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        raise ValueError("select_hypothesis needs at least one valid timestep")
    d = np.linalg.norm(trajectories[:, valid] - gt_future[valid], axis=-1).sum(axis=-1)
    return int(np.argmin(d))


@dataclass
class FrameTargets:
    """Per-frame supervision: class targets for every query, boxes and futures
    for the matched ones. ``hypothesis`` pins the winning trajectory index per
    matched agent (otherwise re-selected on the fly); gradient checks pin it so
    finite differences cannot flip the argmin."""

    class_ids: np.ndarray  # (N,) int, EMPTY_CLASS for unmatched queries
    matched_rows: np.ndarray  # (M,) query row indices
    gt_boxes: np.ndarray  # (M, 8)
    gt_futures: Sequence[np.ndarray]  # M x (T, 2)
    future_valid: Sequence[np.ndarray]  # M x (T,) bool
    hypothesis: Optional[Sequence[int]] = None


def compute_losses(probs: Value, boxes: Value, trajectories: Value, targets: FrameTargets):
    """Joint loss: cross-entropy + box l1 + winner-take-all trajectory l1.

    Returns a dict of scalar Values (cls, coord, trajectory, total). The
    hypothesis choice and the matching are fixed inputs; gradients flow only
    through the decoded tensors.
    """
    n = probs.data.shape[0]
    picked = probs[np.arange(n), targets.class_ids]
    l_cls = -ad.log(picked).sum()

    if len(targets.matched_rows):
        pred_boxes = boxes[targets.matched_rows]
        l_coord = ad.absolute(pred_boxes - targets.gt_boxes).sum()
        traj_terms = []
        for m, (row, future, valid) in enumerate(
            zip(targets.matched_rows, targets.gt_futures, targets.future_valid)
        ):
            if targets.hypothesis is not None:
                k_hat = targets.hypothesis[m]
            else:
                k_hat = select_hypothesis(trajectories.data[row], future, valid)
            pred = trajectories[row, k_hat]
            diff = ad.absolute(pred - future)
            traj_terms.append((diff * valid[:, None].astype(np.float64)).sum())
        l_traj = traj_terms[0] if len(traj_terms) == 1 else ad.stack(traj_terms).sum()
    else:
        l_coord = Value(np.array(0.0))
        l_traj = Value(np.array(0.0))

    total = l_cls + l_coord + l_traj
    return {"cls": l_cls, "coord": l_coord, "trajectory": l_traj, "total": total}
