"""End-to-end engine: model parameters, per-frame pipeline, training, eval.

Per frame: pillars -> fusion layers -> per-query bank attention -> decoding.
During training the decoded queries are matched to ground truth (persistent
assignments excluded), the joint loss is accumulated over a short window of
consecutive frames, and plain momentum gradient descent updates every
parameter. Gradients are truncated at frame boundaries: carried track
embeddings and bank states are detached snapshots.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import heads as hd
from . import tracking as tr
from .autodiff import FfnParams, Value
from .config import RunConfig
from .fusion import FusionParams, fusion_layer
from .geometry import VOLUME_HI, VOLUME_LO
from .metrics import EvalRecord, GtEntry, PredEntry
from .pillars import BevMap, encode_pillars_to_bev, pillarize
from .scenesim import (
    PredictionRecord,
    SceneRecord,
    SimConfig,
    agent_future,
    read_scene,
    synth_frame_features,
)


class TrainingDiverged(RuntimeError):
    def __init__(self, term: str, step: int, value: float):
        super().__init__(
            f"training diverged at step {step}: loss term '{term}' is {value}"
        )
        self.term = term
        self.step = step


class _NonFiniteDecode(RuntimeError):
    def __init__(self, term: str):
        super().__init__(f"non-finite values in decoded '{term}'")
        self.term = term


@dataclass
class Model:
    """All learnable parameters plus the dimensions they were built for."""

    run_config: RunConfig
    query_embed: Value
    query_ref_logits: Value
    pillar_encoder: FfnParams
    bev_lift: FfnParams
    layers: list
    temporal: FfnParams
    heads: hd.HeadParams

    @staticmethod
    def create(run_config: RunConfig, rng: np.random.Generator) -> "Model":
        mc = run_config.model
        sc = run_config.sim
        dtype = np.dtype(mc.dtype)
        e = mc.embed_dim
        query_embed = Value(
            rng.normal(0.0, 0.5, (mc.n_queries, e)).astype(dtype), requires_grad=True
        )
        # spread the pool over the BEV plane (anchor lattice), jittered; z near
        # typical agent-center height
        side = int(np.ceil(np.sqrt(mc.n_queries)))
        lattice = (np.stack(
            np.meshgrid(np.arange(side), np.arange(side)), -1
        ).reshape(-1, 2)[: mc.n_queries] + 0.5) / side
        xy = np.clip(lattice + rng.normal(0.0, 0.02, lattice.shape), 0.05, 0.95)
        ref_logits = np.column_stack(
            [
                np.log(xy[:, 0] / (1.0 - xy[:, 0])),
                np.log(xy[:, 1] / (1.0 - xy[:, 1])),
                rng.normal(1.0, 0.2, mc.n_queries),
            ]
        ).astype(dtype)
        layers = [
            FusionParams.create(
                rng,
                e,
                sc.n_cameras,
                sc.n_levels,
                n_points=mc.n_points,
                offset_scale=mc.offset_scale,
                dropout=mc.dropout,
                dtype=dtype,
            )
            for _ in range(mc.depth)
        ]
        return Model(
            run_config=run_config,
            query_embed=query_embed,
            query_ref_logits=Value(ref_logits, requires_grad=True),
            pillar_encoder=FfnParams.create(
                (10, 64), rng, norm=True, final_activation=True, dtype=dtype
            ),
            bev_lift=FfnParams.create((64, e), rng, activation=None, norm=True, dtype=dtype),
            layers=layers,
            temporal=FfnParams.create((e, e, e), rng, dtype=dtype),
            heads=hd.HeadParams.create(rng, e, mc.box_hidden, mc.traj_hidden, dtype=dtype),
        )

    def parameters(self) -> dict:
        out = {"queries.embed": self.query_embed, "queries.ref": self.query_ref_logits}
        out.update(self.pillar_encoder.parameters("pillar.enc"))
        out.update(self.bev_lift.parameters("pillar.lift"))
        for i, layer in enumerate(self.layers):
            out.update(layer.parameters(f"layer{i}"))
        out.update(self.temporal.parameters("temporal"))
        out.update(self.heads.parameters("heads"))
        return out

    def save(self, path):
        arrays = {name: p.data for name, p in self.parameters().items()}
        arrays["__config__"] = np.frombuffer(
            json.dumps(self.run_config.to_dict(), sort_keys=True).encode(), dtype=np.uint8
        )
        np.savez(path, **arrays)

    @staticmethod
    def load(path, run_config: Optional[RunConfig] = None) -> "Model":
        with np.load(path) as data:
            stored_cfg = RunConfig.from_dict(
                json.loads(bytes(data["__config__"].tobytes()).decode())
            )
            cfg = run_config or stored_cfg
            model = Model.create(cfg, np.random.default_rng(0))
            for name, p in model.parameters().items():
                if name not in data:
                    raise ValueError(f"checkpoint is missing parameter '{name}'")
                if data[name].shape != p.data.shape:
                    raise ValueError(
                        f"checkpoint/config dimension mismatch for '{name}': "
                        f"{data[name].shape} vs {p.data.shape}"
                    )
                p.data = data[name].astype(p.data.dtype)
        return model


class MomentumOptimizer:
    """Plain momentum gradient descent with optional global-norm clipping."""

    def __init__(self, params: dict, lr: float, momentum: float = 0.9, grad_clip: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.grad_clip = grad_clip
        self.buffers = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        scale = 1.0
        if self.grad_clip > 0.0:
            sq = 0.0
            for p in self.params.values():
                if p.grad is not None:
                    sq += float((p.grad * p.grad).sum())
            norm = np.sqrt(sq)
            if norm > self.grad_clip:
                scale = self.grad_clip / norm
        for k, p in self.params.items():
            if p.grad is None:
                continue
            buf = self.buffers[k]
            buf *= self.momentum
            buf += scale * p.grad
            p.data = p.data - self.lr * buf


@dataclass
class TrackState:
    uid: int
    track_id: int
    embedding: np.ndarray  # detached
    ref: np.ndarray  # normalized, detached
    score: float = 0.0


@dataclass
class FrameResult:
    losses: Optional[dict]
    predictions: list
    gate_mean: float
    n_queries: int
    gates: np.ndarray  # (N,) mean lidar gate per query over layers


class SceneRunner:
    """Frame-sequential state for one scene: tracks, bank, id counters."""

    def __init__(self, model: Model, scene: SceneRecord, training: bool = False,
                 rng: Optional[np.random.Generator] = None,
                 no_lidar: bool = False, camera_noise: float = 1.0):
        self.model = model
        self.scene = scene
        self.cfg = model.run_config
        self.sim_cfg = SimConfig.from_dict(scene.config)
        if self.sim_cfg.channels != self.cfg.model.embed_dim:
            raise ValueError(
                f"scene feature channels ({self.sim_cfg.channels}) != "
                f"model embed dim ({self.cfg.model.embed_dim})"
            )
        self.training = training
        self.rng = rng
        self.no_lidar = no_lidar
        self.camera_noise = camera_noise
        self.tracks: list = []
        self.bank = tr.TrackBank(depth=self.cfg.model.bank_depth)
        self._next_uid = 0
        self._next_track_id = 0
        self.dtype = np.dtype(self.cfg.model.dtype)

    def _new_uid(self) -> int:
        self._next_uid += 1
        return self._next_uid - 1

    def _build_bev(self, points: np.ndarray, drop_lidar: bool) -> BevMap:
        if self.no_lidar or drop_lidar:
            return BevMap.absent()
        pillars = pillarize(points, self.cfg.pillar_config)
        return encode_pillars_to_bev(
            pillars, self.model.pillar_encoder, self.model.bev_lift, self.cfg.pillar_config
        )

    def step(self, frame_idx: int, with_gt: bool = False,
             noise_scale: Optional[float] = None, drop_lidar: bool = False) -> FrameResult:
        model = self.model
        mc = self.cfg.model
        frame = self.scene.frames[frame_idx]
        pyramid, points = synth_frame_features(
            self.scene, frame_idx, self.sim_cfg,
            noise_scale=self.camera_noise if noise_scale is None else noise_scale,
        )
        pyramid.features = [
            [lvl.astype(self.dtype) for lvl in cam] for cam in pyramid.features
        ]
        bev = self._build_bev(points.astype(self.dtype), drop_lidar)

        # assemble the query set: carried tracks, then the fresh pool
        uids = [t.uid for t in self.tracks] + [self._new_uid() for _ in range(mc.n_queries)]
        track_ids = {t.uid: t.track_id for t in self.tracks}
        pool_refs = ad.sigmoid(model.query_ref_logits)
        if self.tracks:
            carried_emb = Value(np.stack([t.embedding for t in self.tracks]))
            carried_ref = Value(np.stack([t.ref for t in self.tracks]))
            queries = ad.concat([carried_emb, model.query_embed], axis=0)
            refs = ad.concat([carried_ref, pool_refs], axis=0)
        else:
            queries = model.query_embed
            refs = pool_refs
        n = len(uids)

        gate_layers = []
        for layer in model.layers:
            queries, gates = fusion_layer(
                queries, refs, pyramid, bev, layer,
                training=self.training, rng=self.rng,
            )
            gate_layers.append(gates.data[:, 1])
        gate_per_query = np.mean(np.stack(gate_layers, axis=0), axis=0)

        refreshed = ad.stack(
            [
                tr.bank_attend(queries[i], self.bank.history_of(uids[i]), model.temporal)
                for i in range(n)
            ],
            axis=0,
        )
        probs, boxes = hd.decode_detection(refreshed, refs, model.heads)
        trajs = hd.decode_trajectories(refreshed, boxes[:, 0:2], model.heads)
        argmax = probs.data.argmax(axis=1)
        scores = np.max(probs.data[:, : hd.EMPTY_CLASS], axis=1)

        losses = None
        if with_gt:
            losses = self._supervise(frame, uids, probs, boxes, trajs, argmax, frame_idx)
            alive = [i for i in range(n) if uids[i] in self.bank.assigned]
        else:
            alive = [i for i in range(n) if argmax[i] != hd.EMPTY_CLASS]

        for i in alive:  # new tracks get their stable id before emission
            if uids[i] not in track_ids:
                track_ids[uids[i]] = self._next_track_id
                self._next_track_id += 1

        predictions = self._emit_predictions(
            frame_idx, uids, track_ids, argmax, scores, probs, boxes, trajs,
            gate_per_query, points,
        )

        self._advance_tracks(alive, uids, track_ids, refreshed, boxes, scores)
        return FrameResult(
            losses=losses,
            predictions=predictions,
            gate_mean=float(gate_per_query.mean()),
            n_queries=n,
            gates=gate_per_query,
        )

    def _supervise(self, frame, uids, probs, boxes, trajs, argmax, frame_idx):
        for term, tensor in (("cls", probs), ("coord", boxes), ("trajectory", trajs)):
            if not np.all(np.isfinite(tensor.data)):
                raise _NonFiniteDecode(term)
        gt_ids = [a.agent_id for a in frame.agents]
        gt_classes = [hd.CLASS_NAMES.index(a.class_name) for a in frame.agents]
        gt_boxes = np.stack(
            [hd.gt_box_vector(a.center, a.size, a.yaw) for a in frame.agents]
        ) if frame.agents else np.zeros((0, hd.BOX_DIM))

        released = tr.lifecycle_update(self.bank, uids, argmax, set(gt_ids))
        free_rows = [
            i for i, uid in enumerate(uids)
            if uid not in self.bank.assigned and uid not in released
        ]
        taken_gts = self.bank.assigned_gt_ids()
        free_gt_idx = [j for j, gid in enumerate(gt_ids) if gid not in taken_gts]
        if free_rows and free_gt_idx:
            cost = tr.cost_matrix(
                probs.data[free_rows],
                boxes.data[free_rows],
                [gt_classes[j] for j in free_gt_idx],
                gt_boxes[free_gt_idx],
            )
            for r, c in tr.assign(cost).pairs:
                self.bank.assign_gt(uids[free_rows[r]], gt_ids[free_gt_idx[c]])

        gt_by_id = {a.agent_id: (j, a) for j, a in enumerate(frame.agents)}
        class_ids = np.full(len(uids), hd.EMPTY_CLASS, dtype=int)
        matched_rows, m_boxes, m_futures, m_valid = [], [], [], []
        for i, uid in enumerate(uids):
            gid = self.bank.assigned.get(uid)
            if gid is None or gid not in gt_by_id:
                continue
            j, agent = gt_by_id[gid]
            class_ids[i] = gt_classes[j]
            future, valid = agent_future(self.scene, frame_idx, gid)
            matched_rows.append(i)
            m_boxes.append(gt_boxes[j])
            m_futures.append(future)
            m_valid.append(valid if valid.any() else np.zeros(hd.HORIZON, bool))
        # agents with no future at all cannot supervise the trajectory head
        keep = [k for k in range(len(matched_rows)) if m_valid[k].any()]
        targets = hd.FrameTargets(
            class_ids=class_ids,
            matched_rows=np.array([matched_rows[k] for k in keep], dtype=int),
            gt_boxes=np.stack([m_boxes[k] for k in keep]) if keep else np.zeros((0, hd.BOX_DIM)),
            gt_futures=[m_futures[k] for k in keep],
            future_valid=[m_valid[k] for k in keep],
        )
        losses = hd.compute_losses(probs, boxes, trajs, targets)
        # box supervision for matched agents without futures still applies
        skipped = [k for k in range(len(matched_rows)) if not m_valid[k].any()]
        if skipped:
            rows = np.array([matched_rows[k] for k in skipped], dtype=int)
            extra = ad.absolute(boxes[rows] - np.stack([m_boxes[k] for k in skipped])).sum()
            losses["coord"] = losses["coord"] + extra
            losses["total"] = losses["total"] + extra
        return losses

    def _emit_predictions(self, frame_idx, uids, track_ids, argmax, scores,
                          probs, boxes, trajs, gates, points):
        out = []
        for i, uid in enumerate(uids):
            if argmax[i] == hd.EMPTY_CLASS:
                continue
            box = boxes.data[i]
            out.append(
                PredictionRecord(
                    scene_id=self.scene.scene_id,
                    frame=frame_idx,
                    track_id=track_ids.get(uid, -1),
                    class_name=hd.CLASS_NAMES[argmax[i]],
                    score=float(scores[i]),
                    center=box[:3].copy(),
                    trajectory=trajs.data[i].copy(),
                    gate_lidar=float(gates[i]),
                    lidar_points=count_points_in_box(points, box),
                )
            )
        return out

    def _advance_tracks(self, alive, uids, track_ids, refreshed, boxes, scores):
        new_tracks = []
        alive_set = set()
        for i in alive:
            uid = uids[i]
            alive_set.add(uid)
            tid = track_ids[uid]
            center = boxes.data[i, :3]
            ref = np.clip((center - VOLUME_LO) / (VOLUME_HI - VOLUME_LO), 0.01, 0.99)
            self.bank.push(uid, refreshed.data[i])
            new_tracks.append(
                TrackState(uid, tid, refreshed.data[i].copy(), ref.astype(self.dtype),
                           float(scores[i]))
            )
        for uid in uids:
            if uid not in alive_set:
                self.bank.drop(uid)
        if len(new_tracks) > self.cfg.model.max_tracks:
            new_tracks.sort(key=lambda t: -t.score)
            for t in new_tracks[self.cfg.model.max_tracks:]:
                self.bank.drop(t.uid)
            new_tracks = new_tracks[: self.cfg.model.max_tracks]
        self.tracks = new_tracks


def count_points_in_box(points: np.ndarray, box: np.ndarray, margin: float = 0.1) -> int:
    """Multi-sweep points inside the decoded box footprint (BEV)."""
    if not len(points):
        return 0
    yaw = np.arctan2(box[6], box[7])
    c, s = np.cos(yaw), np.sin(yaw)
    rel = points[:, :2] - box[:2]
    local_x = c * rel[:, 0] + s * rel[:, 1]
    local_y = -s * rel[:, 0] + c * rel[:, 1]
    inside = (np.abs(local_x) <= box[3] / 2 + margin) & (np.abs(local_y) <= box[4] / 2 + margin)
    return int(inside.sum())


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: Model
    trace: list  # per-step dicts: step, cls, coord, trajectory, total


def load_scenes(paths_or_records) -> list:
    scenes = []
    for item in paths_or_records:
        scenes.append(item if isinstance(item, SceneRecord) else read_scene(item))
    return scenes


def train_loop(run_config: RunConfig, scenes, progress=None, no_lidar: bool = False) -> TrainResult:
    """Optimize the full pipeline end to end on synthetic scenes.

    One step trains on a window of consecutive frames from one scene; sensor
    corruption (camera-noise scaling, LiDAR dropout) is sampled per window so
    the gate head sees modality-quality variance. Deterministic for a fixed
    (config, scene set).
    """
    scenes = load_scenes(scenes)
    if not scenes:
        raise ValueError("train_loop needs at least one scene")
    tc = run_config.train
    rng = np.random.default_rng(run_config.seed)
    model = Model.create(run_config, rng)
    opt = MomentumOptimizer(
        model.parameters(), tc.lr, tc.momentum, grad_clip=tc.grad_clip
    )
    trace = []
    for step in range(tc.steps):
        scene = scenes[int(rng.integers(len(scenes)))]
        start = int(rng.integers(0, max(0, len(scene.frames) - tc.window) + 1))
        noise_scale = 1.0
        if rng.random() < tc.camera_noise_prob:
            noise_scale = float(rng.uniform(1.0, tc.camera_noise_max))
        drop_lidar = bool(rng.random() < tc.lidar_drop_prob)

        runner = SceneRunner(model, scene, training=True, rng=rng, no_lidar=no_lidar)
        opt.zero_grad()
        sums = {"cls": 0.0, "coord": 0.0, "trajectory": 0.0, "total": 0.0}
        for frame_idx in range(start, min(start + tc.window, len(scene.frames))):
            try:
                result = runner.step(
                    frame_idx, with_gt=True, noise_scale=noise_scale, drop_lidar=drop_lidar
                )
            except _NonFiniteDecode as exc:
                raise TrainingDiverged(exc.term, step, float("nan")) from exc
            for term, value in result.losses.items():
                v = value.item()
                if not np.isfinite(v):
                    raise TrainingDiverged(term, step, v)
                sums[term] += v
            result.losses["total"].backward()
        opt.step()
        entry = {"step": step}
        entry.update({k: v / tc.window for k, v in sums.items()})
        trace.append(entry)
        if progress is not None:
            progress(entry)
    return TrainResult(model, trace)


def write_trace(path, trace):
    with open(path, "w") as f:
        f.write("step,cls,coord,trajectory,total\n")
        for e in trace:
            f.write(
                f"{e['step']},{e['cls']:.6f},{e['coord']:.6f},"
                f"{e['trajectory']:.6f},{e['total']:.6f}\n"
            )


def read_trace(path):
    with open(path) as f:
        lines = f.read().splitlines()
    out = []
    for line in lines[1:]:
        step, cls, coord, traj, total = line.split(",")
        out.append(
            {
                "step": int(step),
                "cls": float(cls),
                "coord": float(coord),
                "trajectory": float(traj),
                "total": float(total),
            }
        )
    return out


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalOutput:
    records: list  # EvalRecord, one per (scene, frame) with full futures
    predictions: list  # PredictionRecord, aligned with the records
    mean_gate: Optional[float]  # over emitted predictions
    mean_gate_all_queries: float


def evaluate_scenes(
    model: Model,
    scenes,
    no_lidar: bool = False,
    camera_noise: float = 1.0,
) -> EvalOutput:
    """Run the full pipeline over scenes and collect evaluation records.

    Only frames with a complete forecast horizon produce records; ground
    truths are the agents present through the whole horizon. Bit-reproducible
    for a fixed checkpoint and scene set.
    """
    scenes = load_scenes(scenes)
    records, predictions = [], []
    gate_values, gate_all = [], []
    for scene in scenes:
        runner = SceneRunner(
            model, scene, training=False, no_lidar=no_lidar, camera_noise=camera_noise
        )
        last_eval = len(scene.frames) - hd.HORIZON - 1
        for frame_idx in range(last_eval + 1):
            result = runner.step(frame_idx, with_gt=False)
            gate_all.append(result.gate_mean)
            gts = []
            for agent in scene.frames[frame_idx].agents:
                future, valid = agent_future(scene, frame_idx, agent.agent_id)
                if valid.all():
                    gts.append(GtEntry(agent.class_name, agent.center.copy(), future))
            preds = [
                PredEntry(p.class_name, p.score, p.center, p.trajectory, p.track_id)
                for p in result.predictions
            ]
            records.append(
                EvalRecord(scene.scene_id, frame_idx, preds, gts)
            )
            predictions.extend(result.predictions)
            gate_values.extend(p.gate_lidar for p in result.predictions)
    mean_gate = float(np.mean(gate_values)) if gate_values else None
    return EvalOutput(
        records,
        predictions,
        mean_gate,
        float(np.mean(gate_all)) if gate_all else 0.0,
    )


GATE_BIN_EDGES = (5, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100)


def gate_bins(predictions) -> list:
    """Bin predictions by LiDAR point support; returns rows of
    (label, count, mean gate)."""
    edges = GATE_BIN_EDGES
    labels = ["<5"] + [f"{a}-{b}" for a, b in zip(edges[:-1], edges[1:])] + [">100"]
    bins = [[] for _ in labels]
    for p in predictions:
        n = p.lidar_points
        if n < edges[0]:
            bins[0].append(p.gate_lidar)
        elif n >= edges[-1]:
            bins[-1].append(p.gate_lidar)
        else:
            for k, (a, b) in enumerate(zip(edges[:-1], edges[1:])):
                if a <= n < b:
                    bins[k + 1].append(p.gate_lidar)
                    break
    return [
        (label, len(vals), float(np.mean(vals)) if vals else None)
        for label, vals in zip(labels, bins)
    ]
