"""Query-gated fusion of camera and LiDAR evidence, one decoder layer at a time.

Per layer and per query: sample every (camera, level) pair at the projected
reference point and aggregate with masked attention; sample the BEV map at
learned bounded offsets around the reference and aggregate with learned point
weights; gate the two normalized modality features with a query-conditioned
softmax pair; fuse, and apply the residual update with a positional code.

Cameras a query cannot see contribute nothing, structurally: their samples
are never taken, the masked softmax gives them exactly zero weight, and a
query visible nowhere produces a zero camera feature with finite gradients.
The gate head sees the query embedding through a stop-gradient, so no
gradient flows into the query along that path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import FfnParams, Value, as_value
from .geometry import bev_grid_coords, positional_code, project_to_cameras, sampling_coords_graph
from .pillars import BevMap
from .scenesim import FeaturePyramid


@dataclass
class FusionParams:
    """All weights of one fusion layer."""

    image_logits: FfnParams  # E -> N_cam * L attention logits
    image_out: FfnParams  # E -> E projection + norm
    offset_head: FfnParams  # E -> P * 2 BEV offsets
    point_weights: FfnParams  # E -> P
    lidar_out: FfnParams  # E -> E projection + norm
    gate_head: FfnParams  # 3E -> 2
    fuse_head: FfnParams  # 2E -> E
    pos_encoder: FfnParams  # 3 -> E
    offset_scale: float = 0.1  # bounded search radius in [-1,1] grid units
    dropout: float = 0.1
    n_points: int = 4

    @staticmethod
    def create(
        rng: np.random.Generator,
        embed_dim: int,
        n_cameras: int,
        n_levels: int,
        n_points: int = 4,
        offset_scale: float = 0.1,
        dropout: float = 0.1,
        zero_gate: bool = True,
        dtype=np.float64,
    ) -> "FusionParams":
        e = embed_dim
        return FusionParams(
            image_logits=FfnParams.create(
                (e, n_cameras * n_levels), rng, activation=None, dtype=dtype
            ),
            image_out=FfnParams.create((e, e), rng, activation=None, norm=True, dtype=dtype),
            offset_head=FfnParams.create(
                (e, n_points * 2), rng, activation=None, zero=True, dtype=dtype
            ),
            point_weights=FfnParams.create((e, n_points), rng, activation=None, dtype=dtype),
            lidar_out=FfnParams.create((e, e), rng, activation=None, norm=True, dtype=dtype),
            gate_head=FfnParams.create(
                (3 * e, 2), rng, activation=None, zero=zero_gate, dtype=dtype
            ),
            fuse_head=FfnParams.create((2 * e, e), rng, activation=None, dtype=dtype),
            pos_encoder=FfnParams.create((3, e, e), rng, dtype=dtype),
            offset_scale=offset_scale,
            dropout=dropout,
            n_points=n_points,
        )

    def parameters(self, prefix: str = "fusion") -> dict:
        out = {}
        out.update(self.image_logits.parameters(f"{prefix}.img_logits"))
        out.update(self.image_out.parameters(f"{prefix}.img_out"))
        out.update(self.offset_head.parameters(f"{prefix}.offsets"))
        out.update(self.point_weights.parameters(f"{prefix}.pt_weights"))
        out.update(self.lidar_out.parameters(f"{prefix}.lidar_out"))
        out.update(self.gate_head.parameters(f"{prefix}.gate"))
        out.update(self.fuse_head.parameters(f"{prefix}.fuse"))
        out.update(self.pos_encoder.parameters(f"{prefix}.pos"))
        return out


def camera_branch(queries: Value, refs: Value, pyramid: FeaturePyramid, params: FusionParams) -> Value:
    """Aggregate image evidence across cameras and pyramid levels.

    Samples only the (camera, level) pairs whose projection mask is 1; the
    rest stay exact zero constants. Queries with no valid pair anywhere come
    out as zero vectors.
    """
    n_cam = pyramid.n_cameras
    if n_cam == 0:
        raise ValueError("camera branch needs at least one camera")
    n_lvl = pyramid.n_levels
    n = queries.data.shape[0]
    _, _, mask = project_to_cameras(refs.data, pyramid.rig)  # (N, n_cam)

    samples = []  # n_cam * n_lvl entries of (N, E)
    for ci in range(n_cam):
        valid = mask[:, ci]
        rows = np.flatnonzero(valid)
        coords = None
        if len(rows):
            coords_full = sampling_coords_graph(refs, pyramid.rig[ci], valid)
            coords = coords_full[rows]
        for lv in range(n_lvl):
            if coords is None:
                samples.append(Value(np.zeros((n, queries.data.shape[1]))))
            else:
                fmap = as_value(pyramid.features[ci][lv])
                picked = ad.bilinear_sample(fmap, coords, padding="border")
                samples.append(ad.scatter_rows(picked, rows, n))

    stacked = ad.stack(samples, axis=1)  # (N, n_cam*n_lvl, E)
    logits = ad.ffn_apply(queries, params.image_logits)  # (N, n_cam*n_lvl)
    pair_mask = np.repeat(mask, n_lvl, axis=1)  # expand across levels
    weights = ad.masked_softmax(logits, pair_mask, axis=-1)
    pooled = (stacked * ad.reshape(weights, (n, n_cam * n_lvl, 1))).sum(axis=1)
    out = ad.ffn_apply(pooled, params.image_out)
    visible = mask.any(axis=1).astype(np.float64)
    return out * visible[:, None]


def lidar_branch(queries: Value, refs: Value, bev: Optional[BevMap], params: FusionParams) -> Value:
    """Aggregate BEV evidence at learned bounded offsets around the reference.

    With no BEV map available the LiDAR feature is identically zero.
    """
    n, e = queries.data.shape
    if bev is None or not bev.present:
        return Value(np.zeros((n, e)))
    p = params.n_points
    base = bev_grid_coords(refs[:, 0:2])  # (N, 2) in [-1, 1]
    offsets = ad.ffn_apply(queries, params.offset_head).reshape((n, p, 2))
    grid = ad.clip(
        base.reshape((n, 1, 2)) + ad.tanh(offsets) * params.offset_scale, -1.0, 1.0
    )
    picked = ad.bilinear_sample(bev.features, grid.reshape((n * p, 2)), padding="border")
    picked = picked.reshape((n, p, e))
    weights = ad.softmax(ad.ffn_apply(queries, params.point_weights), axis=-1)  # (N, P)
    pooled = (picked * weights.reshape((n, p, 1))).sum(axis=1)
    return ad.ffn_apply(pooled, params.lidar_out)


def gated_fuse(
    q_img: Value,
    q_lidar: Value,
    queries: Value,
    params: FusionParams,
    gate_query_snapshot=None,
):
    """Soft per-query gate over the two modalities, then fuse back to E.

    Returns (fused, gates) with gates (N, 2) summing to 1 per query; column 1
    is the LiDAR weight. The gate input sees the query through stop-gradient;
    perturbation harnesses can pin that detached input to a captured snapshot
    (identical forward at the capture point) so finite differences agree with
    the analytic gradient, which never flows through this path.
    """
    detached = (
        queries.detach() if gate_query_snapshot is None else as_value(gate_query_snapshot)
    )
    gate_in = ad.concat([q_img, q_lidar, detached], axis=1)
    gates = ad.softmax(ad.ffn_apply(gate_in, params.gate_head), axis=-1)
    gated = ad.concat([q_img * gates[:, 0:1], q_lidar * gates[:, 1:2]], axis=1)
    fused = ad.ffn_apply(gated, params.fuse_head)
    return fused, gates


def residual_update(
    fused: Value,
    queries: Value,
    refs: Value,
    params: FusionParams,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Value:
    """Residual query update with dropout (training only) and positional code."""
    branch = fused
    if training and params.dropout > 0.0:
        if rng is None:
            raise ValueError("training-mode residual update needs an rng")
        branch = ad.dropout(branch, params.dropout, rng)
    return branch + queries + positional_code(refs, params.pos_encoder)


def fusion_layer(
    queries: Value,
    refs: Value,
    pyramid: FeaturePyramid,
    bev: Optional[BevMap],
    params: FusionParams,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    gate_query_snapshot=None,
):
    """One full refinement layer; returns (updated queries, gates (N, 2))."""
    q_img = camera_branch(queries, refs, pyramid, params)
    q_lidar = lidar_branch(queries, refs, bev, params)
    fused, gates = gated_fuse(q_img, q_lidar, queries, params, gate_query_snapshot)
    return residual_update(fused, queries, refs, params, training, rng), gates
