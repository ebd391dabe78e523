"""Forecasting and detection metrics over evaluation records.

Matching is greedy by descending score with a 2 m BEV center-distance gate
and deterministic index tie-breaks; displacement metrics and
precision/recall/FP-ratio match class-agnostically, EPA and mAP per class.
A record is one evaluated (scene, frame) sample; per-"scene" statistics such
as the FP ratio average over records.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .heads import CLASS_NAMES, HORIZON

MATCH_THRESHOLD_M = 2.0
EPA_FP_PENALTY = 0.5
MAP_THRESHOLDS_M = (0.5, 1.0, 2.0, 4.0)


@dataclass
class PredEntry:
    class_name: str
    score: float
    center: np.ndarray  # (>=2,), BEV matching uses x, y
    trajectory: np.ndarray  # (K, T, 2)
    track_id: int = -1


@dataclass
class GtEntry:
    class_name: str
    center: np.ndarray
    future: np.ndarray  # (T, 2)


@dataclass
class EvalRecord:
    scene_id: int
    frame: int
    predictions: list
    ground_truths: list


def greedy_match(
    pred_centers: Sequence, pred_scores: Sequence, gt_centers: Sequence, threshold: float
) -> list:
    """One-to-one greedy matching by descending score; returns (pred, gt) pairs."""
    if not len(pred_centers) or not len(gt_centers):
        return []
    pc = np.asarray([c[:2] for c in pred_centers], dtype=np.float64)
    gc = np.asarray([c[:2] for c in gt_centers], dtype=np.float64)
    order = sorted(range(len(pc)), key=lambda i: (-pred_scores[i], i))
    taken = np.zeros(len(gc), dtype=bool)
    pairs = []
    for pi in order:
        d = np.linalg.norm(gc - pc[pi], axis=1)
        d[taken] = np.inf
        gi = int(np.argmin(d))
        if d[gi] <= threshold:
            pairs.append((pi, gi))
            taken[gi] = True
    return pairs


@dataclass
class DisplacementResult:
    min_ade: Optional[float]
    min_fde: Optional[float]
    miss_rate: Optional[float]
    pairs: list = field(default_factory=list)  # (record_idx, pred_idx, gt_idx, ade, fde)


def hypothesis_errors(trajectory: np.ndarray, gt_future: np.ndarray):
    """(ADE per hypothesis, FDE per hypothesis) against one ground truth."""
    d = np.linalg.norm(np.asarray(trajectory) - np.asarray(gt_future), axis=-1)  # (K, T)
    return d.mean(axis=1), d[:, -1]


def displacement_metrics(
    records: Sequence, threshold: float = MATCH_THRESHOLD_M
) -> DisplacementResult:
    """minADE / minFDE / miss rate over matched prediction-gt pairs.

    A pair misses when its minFDE strictly exceeds the threshold (exactly
    2.0 m is a hit). With no matched pairs all three are None.
    """
    details = []
    for ri, rec in enumerate(records):
        pairs = greedy_match(
            [p.center for p in rec.predictions],
            [p.score for p in rec.predictions],
            [g.center for g in rec.ground_truths],
            threshold,
        )
        for pi, gi in pairs:
            ades, fdes = hypothesis_errors(
                rec.predictions[pi].trajectory, rec.ground_truths[gi].future
            )
            details.append((ri, pi, gi, float(ades.min()), float(fdes.min())))
    if not details:
        return DisplacementResult(None, None, None, [])
    ades = np.array([d[3] for d in details])
    fdes = np.array([d[4] for d in details])
    return DisplacementResult(
        float(ades.mean()),
        float(fdes.mean()),
        float((fdes > threshold).mean()),
        details,
    )


def epa(
    records: Sequence,
    threshold: float = MATCH_THRESHOLD_M,
    penalty: float = EPA_FP_PENALTY,
):
    """End-to-end prediction accuracy per class and its mean.

    Per class: clamp(hits - penalty * false positives, 0) / ground truths,
    matched within class; classes with no ground truth are excluded from the
    mean. Returns (mean EPA or None, per-class dict).
    """
    per_class = {}
    for cls in CLASS_NAMES:
        hits = fps = n_gt = 0
        for rec in records:
            preds = [p for p in rec.predictions if p.class_name == cls]
            gts = [g for g in rec.ground_truths if g.class_name == cls]
            pairs = greedy_match(
                [p.center for p in preds], [p.score for p in preds],
                [g.center for g in gts], threshold,
            )
            hits += len(pairs)
            fps += len(preds) - len(pairs)
            n_gt += len(gts)
        if n_gt > 0:
            per_class[cls] = max(0.0, hits - penalty * fps) / n_gt
    mean = float(np.mean(list(per_class.values()))) if per_class else None
    return mean, per_class


def detection_prf(records: Sequence, threshold: float = MATCH_THRESHOLD_M):
    """(precision, recall, FP ratio); zero-prediction records contribute 0 to
    the per-record FP ratio, a globally empty prediction set gives precision 0."""
    tp = fp = n_gt = 0
    ratios = []
    for rec in records:
        pairs = greedy_match(
            [p.center for p in rec.predictions],
            [p.score for p in rec.predictions],
            [g.center for g in rec.ground_truths],
            threshold,
        )
        r_tp = len(pairs)
        r_fp = len(rec.predictions) - r_tp
        tp += r_tp
        fp += r_fp
        n_gt += len(rec.ground_truths)
        ratios.append(r_fp / len(rec.predictions) if rec.predictions else 0.0)
    precision = tp / (tp + fp) if (tp + fp) > 0 else 0.0
    recall = tp / n_gt if n_gt > 0 else 0.0
    fp_ratio = float(np.mean(ratios)) if ratios else 0.0
    return float(precision), float(recall), fp_ratio


def average_precision(scored_matches: list, n_gt: int) -> float:
    """Area under the precision-envelope PR curve.

    ``scored_matches`` is [(score, is_tp)]; ties and order are resolved by the
    caller. Standard all-point interpolation: at each recall step, precision
    is the maximum achieved at that recall or beyond.
    """
    if n_gt == 0:
        return 0.0
    if not scored_matches:
        return 0.0
    tps = np.array([m[1] for m in scored_matches], dtype=np.float64)
    cum_tp = np.cumsum(tps)
    cum_fp = np.cumsum(1.0 - tps)
    recall = cum_tp / n_gt
    precision = cum_tp / (cum_tp + cum_fp)
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, env):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def map_score(records: Sequence, thresholds: Sequence = MAP_THRESHOLDS_M):
    """Mean AP over classes (with ground truth) and center-distance thresholds."""
    aps = []
    for cls in CLASS_NAMES:
        n_gt = sum(
            sum(1 for g in rec.ground_truths if g.class_name == cls) for rec in records
        )
        if n_gt == 0:
            continue
        # global score ordering; greedy nearest-unmatched-gt within each record
        entries = []
        for ri, rec in enumerate(records):
            for pi, p in enumerate(rec.predictions):
                if p.class_name == cls:
                    entries.append((ri, pi, p))
        entries.sort(key=lambda t: (-t[2].score, t[0], t[1]))
        for thr in thresholds:
            taken = {}
            scored = []
            for ri, pi, p in entries:
                gts = [g for g in records[ri].ground_truths if g.class_name == cls]
                used = taken.setdefault(ri, set())
                best_gi, best_d = -1, np.inf
                for gi, g in enumerate(gts):
                    if gi in used:
                        continue
                    d = float(np.linalg.norm(np.asarray(g.center[:2]) - np.asarray(p.center[:2])))
                    if d < best_d:
                        best_gi, best_d = gi, d
                if best_gi >= 0 and best_d <= thr:
                    used.add(best_gi)
                    scored.append((p.score, 1.0))
                else:
                    scored.append((p.score, 0.0))
            aps.append(average_precision(scored, n_gt))
    return float(np.mean(aps)) if aps else 0.0


def constant_velocity_trajectory(
    center_xy: np.ndarray, velocity: np.ndarray, horizon: int = HORIZON, dt: float = 0.5
) -> np.ndarray:
    """(1, horizon, 2) straight-line rollout from the current state."""
    steps = np.arange(1, horizon + 1)[:, None] * dt
    return (np.asarray(center_xy)[None] + steps * np.asarray(velocity)[None])[None]


METRIC_KEYS = ("minADE", "minFDE", "MR", "EPA", "FP_ratio", "Precision", "Recall", "mAP")


def metrics_document(
    records: Sequence,
    threshold: float = MATCH_THRESHOLD_M,
    epa_penalty: float = EPA_FP_PENALTY,
):
    """The flat metric document (exactly METRIC_KEYS) plus per-class EPA."""
    disp = displacement_metrics(records, threshold)
    epa_mean, per_class = epa(records, threshold, epa_penalty)
    precision, recall, fp_ratio = detection_prf(records, threshold)
    doc = {
        "minADE": disp.min_ade,
        "minFDE": disp.min_fde,
        "MR": disp.miss_rate,
        "EPA": epa_mean,
        "FP_ratio": fp_ratio,
        "Precision": precision,
        "Recall": recall,
        "mAP": map_score(records),
    }
    return doc, per_class
