"""Query lifecycle: matching to ground truth, persistence, and the memory bank.

Matching runs per frame over the unassigned queries and unassigned ground
truths only; pairs that survived from earlier frames are never reconsidered.
A matched query keeps its ground-truth id until it predicts the empty class,
which releases the assignment the same frame (the freed ground truth becomes
matchable again immediately; the released query re-enters the pool on the
next frame). Each query owns a FIFO of up to four past embeddings used for
per-query temporal cross-attention.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .autodiff import FfnParams, Value, as_value
from .heads import EMPTY_CLASS

BANK_DEPTH = 4


def match_cost(class_probs: np.ndarray, box: np.ndarray, gt_class, gt_box) -> float:
    """Pairwise matching cost: -p(class) + l1 box distance (empty gt costs 0)."""
    if gt_class is None or gt_class == EMPTY_CLASS:
        return 0.0
    box = np.asarray(box, dtype=np.float64)
    gt_box = np.asarray(gt_box, dtype=np.float64)
    return float(-class_probs[gt_class] + np.abs(box - gt_box).sum())


def cost_matrix(
    class_probs: np.ndarray, boxes: np.ndarray, gt_classes, gt_boxes
) -> np.ndarray:
    out = np.zeros((len(class_probs), len(gt_classes)))
    for j, (cls, gtb) in enumerate(zip(gt_classes, gt_boxes)):
        out[:, j] = -class_probs[:, cls] + np.abs(boxes - gtb).sum(axis=1)
    return out


@dataclass
class Assignment:
    pairs: list  # [(row, col)] sorted by row
    unmatched_rows: list
    unmatched_cols: list


def assign(cost: np.ndarray) -> Assignment:
    """Minimum-total-cost one-to-one assignment (Hungarian via scipy)."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        rows = list(range(cost.shape[0])) if cost.ndim == 2 else []
        cols = list(range(cost.shape[1])) if cost.ndim == 2 else []
        return Assignment([], rows, cols)
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    rr, cc = linear_sum_assignment(cost)
    pairs = sorted(zip(rr.tolist(), cc.tolist()))
    matched_r = {r for r, _ in pairs}
    matched_c = {c for _, c in pairs}
    return Assignment(
        pairs,
        [r for r in range(cost.shape[0]) if r not in matched_r],
        [c for c in range(cost.shape[1]) if c not in matched_c],
    )


@dataclass
class TrackBank:
    """Per-query FIFO history plus ground-truth assignment bookkeeping."""

    depth: int = BANK_DEPTH
    history: dict = field(default_factory=dict)  # uid -> deque of (E,) arrays
    assigned: dict = field(default_factory=dict)  # uid -> gt agent id
    age: dict = field(default_factory=dict)

    def push(self, uid: int, state: np.ndarray):
        if uid not in self.history:
            self.history[uid] = deque(maxlen=self.depth)
        self.history[uid].append(np.asarray(state, dtype=np.float64).copy())
        self.age[uid] = self.age.get(uid, 0) + 1

    def history_of(self, uid: int) -> list:
        return list(self.history.get(uid, ()))

    def assign_gt(self, uid: int, gt_id: int):
        self.assigned[uid] = gt_id

    def release(self, uid: int):
        self.assigned.pop(uid, None)

    def drop(self, uid: int):
        self.history.pop(uid, None)
        self.assigned.pop(uid, None)
        self.age.pop(uid, None)

    def assigned_gt_ids(self) -> set:
        return set(self.assigned.values())


def lifecycle_update(bank: TrackBank, uids, argmax_classes, gt_ids_present) -> list:
    """Apply the persistence rules for one frame, before matching.

    Queries keep their assignment unless they predict the empty class (then
    released, returned) or their ground truth left the scene (dropped
    silently). Returns the uids released by an empty prediction; callers must
    exclude them from this frame's cost matrix.
    """
    released = []
    present = set(gt_ids_present)
    cls_of = dict(zip(uids, argmax_classes))
    for uid in list(bank.assigned):
        if uid not in cls_of:
            bank.release(uid)
            continue
        if bank.assigned[uid] not in present:
            bank.release(uid)
            continue
        if cls_of[uid] == EMPTY_CLASS:
            bank.release(uid)
            released.append(uid)
    return released


def bank_attend(query: Value, history: list, temporal: FfnParams) -> Value:
    """Refresh one query against its own stored history.

    Scaled dot-product attention over the stored states (keys = values = the
    embeddings themselves), then a feed-forward pass over query + summary.
    Empty history contributes a zero summary. Strictly per query: no state
    from any other agent is visible here.
    """
    query = as_value(query)
    e = query.data.shape[-1]
    if not history:
        return ad.ffn_apply(query, temporal)
    keys = np.stack(history)  # (h, E) constants: history is detached by design
    scores = ad.matmul(query.reshape((1, e)), keys.T) * (1.0 / np.sqrt(e))
    weights = ad.softmax(scores, axis=-1)  # (1, h)
    summary = ad.matmul(weights, keys).reshape((e,))
    return ad.ffn_apply(query + summary, temporal)
