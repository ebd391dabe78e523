"""Deterministic synthetic driving scenes: agents, cameras, LiDAR, features.

A scene is 40 frames at 2 Hz (20 s). Agents follow constant-velocity or
constant-turn-rate kinematics with class-dependent speed priors; vehicles
spawn in lane bands, pedestrians on sidewalk bands. Each frame carries a
5-sweep LiDAR cloud (dt in {0, -0.1, ..., -0.4} s, points sampled on agent
box faces plus ground clutter). Camera features are synthesized on demand:
per-class channel signatures plus a velocity component rendered as Gaussian
blobs at each agent's projected location, over background noise. Everything
is a pure function of (config, seed).

Scene (.scn) and prediction (.pred) files are JSON lines with a version-1
header record; see the README for the exact field layout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from functools import lru_cache
from typing import Optional

import numpy as np

from .geometry import CameraCalib, make_camera_ring, normalize_point, project_to_cameras
from .heads import CLASS_NAMES, HORIZON

SCENE_FORMAT_VERSION = 1
PRED_FORMAT_VERSION = 1

# class -> (length, width, height), mean speed, speed spread, lidar intensity
CLASS_SIZE = {
    "car": (4.5, 1.9, 1.6),
    "truck": (7.5, 2.5, 2.8),
    "bus": (11.0, 2.9, 3.2),
    "trailer": (10.0, 2.6, 3.5),
    "motorcycle": (2.1, 0.8, 1.4),
    "bicycle": (1.8, 0.6, 1.3),
    "pedestrian": (0.6, 0.6, 1.75),
}
CLASS_SPEED = {
    "car": (8.0, 2.0),
    "truck": (7.0, 1.5),
    "bus": (7.0, 1.5),
    "trailer": (6.0, 1.5),
    "motorcycle": (9.0, 2.0),
    "bicycle": (4.0, 1.0),
    "pedestrian": (1.4, 0.3),
}
CLASS_INTENSITY = {
    "car": 0.55,
    "truck": 0.65,
    "bus": 0.7,
    "trailer": 0.6,
    "motorcycle": 0.45,
    "bicycle": 0.35,
    "pedestrian": 0.25,
}


class FileFormatError(ValueError):
    """Raised for version mismatches and corrupt/truncated records."""


@dataclass
class SimConfig:
    """Knobs for scene generation and feature synthesis."""

    min_agents: int = 3
    max_agents: int = 6
    class_weights: dict = field(
        default_factory=lambda: {
            "car": 0.30,
            "truck": 0.10,
            "bus": 0.07,
            "trailer": 0.05,
            "motorcycle": 0.10,
            "bicycle": 0.12,
            "pedestrian": 0.26,
        }
    )
    turn_prob: float = 0.5
    turn_rate_range: tuple = (0.08, 0.22)  # rad/s, sign chosen at random
    heading_jitter: float = 0.15
    n_frames: int = 40
    frame_dt: float = 0.5
    spawn_extent: float = 45.0
    keep_extent: float = 50.0  # agents beyond this leave the scene
    # camera rig
    n_cameras: int = 6
    image_width: int = 160
    image_height: int = 96
    focal: float = 110.0
    camera_height: float = 1.6
    # feature pyramid
    n_levels: int = 2
    level0_rows: int = 24
    level0_cols: int = 40
    channels: int = 32
    noise_sigma: float = 0.08
    blob_amp: float = 1.5
    blob_sigma_m: float = 4.0  # apparent size follows 1/depth, like a real object
    signature_noise: float = 0.15
    velocity_gain: float = 0.15
    position_gain: float = 1.2
    # lidar
    agent_points_per_sweep: int = 8
    clutter_per_sweep: int = 20
    n_sweeps: int = 5
    sweep_dt: float = 0.1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["turn_rate_range"] = list(d["turn_rate_range"])  # json-canonical
        return d

    @staticmethod
    def from_dict(d: dict) -> "SimConfig":
        cfg = SimConfig(**{k: v for k, v in d.items()})
        cfg.turn_rate_range = tuple(cfg.turn_rate_range)
        return cfg


@dataclass
class AgentState:
    agent_id: int
    class_name: str
    center: np.ndarray  # (3,)
    size: np.ndarray  # (3,) l, w, h
    yaw: float
    velocity: np.ndarray  # (2,)


@dataclass
class FrameRecord:
    index: int
    t: float
    agents: list
    points: np.ndarray  # (N, 5): x, y, z, intensity, dt


@dataclass
class SceneRecord:
    scene_id: int
    seed: int
    config: dict
    rig: list
    frames: list


@dataclass
class FeaturePyramid:
    """Per-camera multi-level feature grids plus the rig calibration."""

    rig: list
    features: list  # [camera][level] -> (E, H_l, W_l)

    @property
    def n_cameras(self) -> int:
        return len(self.rig)

    @property
    def n_levels(self) -> int:
        return len(self.features[0])


@dataclass
class PredictionRecord:
    scene_id: int
    frame: int
    track_id: int
    class_name: str
    score: float
    center: np.ndarray  # (3,)
    trajectory: np.ndarray  # (K, T, 2)
    gate_lidar: float
    lidar_points: int


# ---------------------------------------------------------------------------
# kinematics and generation
# ---------------------------------------------------------------------------


@dataclass
class _Kinematics:
    agent_id: int
    class_name: str
    size: np.ndarray
    p0: np.ndarray  # (2,)
    yaw0: float
    speed: float
    turn_rate: float

    def state_at(self, t: float) -> AgentState:
        w = self.turn_rate
        if abs(w) < 1e-9:
            yaw = self.yaw0
            pos = self.p0 + self.speed * t * np.array([np.cos(yaw), np.sin(yaw)])
        else:
            yaw = self.yaw0 + w * t
            pos = self.p0 + (self.speed / w) * np.array(
                [np.sin(yaw) - np.sin(self.yaw0), np.cos(self.yaw0) - np.cos(yaw)]
            )
        vel = self.speed * np.array([np.cos(yaw), np.sin(yaw)])
        center = np.array([pos[0], pos[1], self.size[2] / 2.0])
        return AgentState(self.agent_id, self.class_name, center, self.size.copy(), yaw, vel)


def _box_perimeter_points(state: AgentState, n: int, rng: np.random.Generator) -> np.ndarray:
    """Points on the vertical faces of an agent's box, world frame."""
    length, width, height = state.size
    u = rng.uniform(0.0, 1.0, n)
    peri = 2.0 * (length + width)
    d = u * peri
    local = np.zeros((n, 2))
    for i, di in enumerate(d):
        if di < length:
            local[i] = (di - length / 2.0, -width / 2.0)
        elif di < length + width:
            local[i] = (length / 2.0, di - length - width / 2.0)
        elif di < 2 * length + width:
            local[i] = (length / 2.0 - (di - length - width), width / 2.0)
        else:
            local[i] = (-length / 2.0, width / 2.0 - (di - 2 * length - width))
    c, s = np.cos(state.yaw), np.sin(state.yaw)
    rot = np.array([[c, -s], [s, c]])
    xy = local @ rot.T + state.center[:2]
    z = rng.uniform(0.0, height, n)
    return np.column_stack([xy, z])


def generate_scene(config: SimConfig, seed: int, scene_id: int = 0) -> SceneRecord:
    """Generate one deterministic scene; identical (config, seed) gives
    byte-identical serialization."""
    weights = np.array([config.class_weights.get(c, 0.0) for c in CLASS_NAMES])
    if weights.sum() <= 0:
        raise ValueError("infeasible sim config: no classes enabled")
    weights = weights / weights.sum()
    rng = np.random.default_rng(seed)
    rig = make_camera_ring(
        config.n_cameras,
        config.image_width,
        config.image_height,
        config.focal,
        config.camera_height,
    )

    n_agents = int(rng.integers(config.min_agents, config.max_agents + 1))
    lanes = np.arange(-40.0, 41.0, 10.0)
    agents = []
    for aid in range(n_agents):
        cls = CLASS_NAMES[rng.choice(len(CLASS_NAMES), p=weights)]
        base_size = np.array(CLASS_SIZE[cls])
        size = np.round(base_size * rng.uniform(0.9, 1.1, 3), 3)
        mean_v, spread = CLASS_SPEED[cls]
        speed = max(0.2, rng.normal(mean_v, spread))
        if cls == "pedestrian":
            y = rng.choice(lanes) + 5.0 + rng.uniform(-1.0, 1.0)
            yaw = rng.uniform(0.0, 2.0 * np.pi)
            turn = 0.0
        else:
            y = rng.choice(lanes) + rng.uniform(-1.5, 1.5)
            yaw = rng.choice([0.0, np.pi]) + rng.uniform(
                -config.heading_jitter, config.heading_jitter
            )
            turn = 0.0
            if rng.random() < config.turn_prob:
                turn = rng.choice([-1.0, 1.0]) * rng.uniform(*config.turn_rate_range)
        x = rng.uniform(-config.spawn_extent, config.spawn_extent)
        agents.append(_Kinematics(aid, cls, size, np.array([x, y]), yaw, speed, turn))

    frames = []
    for k in range(config.n_frames):
        t = k * config.frame_dt
        states = []
        for kin in agents:
            st = kin.state_at(t)
            if abs(st.center[0]) > config.keep_extent or abs(st.center[1]) > config.keep_extent:
                continue
            st.center = np.round(st.center, 4)
            st.velocity = np.round(st.velocity, 4)
            st.yaw = round(float(st.yaw), 4)
            states.append(st)

        sweeps = []
        for s in range(config.n_sweeps):
            dt = -config.sweep_dt * s
            for kin in agents:
                st = kin.state_at(t + dt)
                if abs(st.center[0]) > config.keep_extent or abs(st.center[1]) > config.keep_extent:
                    continue
                pts = _box_perimeter_points(st, config.agent_points_per_sweep, rng)
                inten = np.clip(
                    CLASS_INTENSITY[kin.class_name]
                    + rng.uniform(-0.1, 0.1, len(pts)),
                    0.0,
                    1.0,
                )
                sweeps.append(
                    np.column_stack([pts, inten, np.full(len(pts), dt)])
                )
            clutter_xy = rng.uniform(-51.0, 51.0, (config.clutter_per_sweep, 2))
            clutter_z = rng.uniform(-0.2, 0.3, config.clutter_per_sweep)
            clutter_i = rng.uniform(0.0, 1.0, config.clutter_per_sweep)
            sweeps.append(
                np.column_stack(
                    [clutter_xy, clutter_z, clutter_i, np.full(config.clutter_per_sweep, dt)]
                )
            )
        points = np.concatenate(sweeps, axis=0) if sweeps else np.zeros((0, 5))
        if len(points):
            inside = (
                (np.abs(points[:, 0]) < 51.2)
                & (np.abs(points[:, 1]) < 51.2)
                & (points[:, 2] >= -5.0)
                & (points[:, 2] <= 3.0)
            )
            points = points[inside]
        points[:, :4] = np.round(points[:, :4], 2)
        points[:, 4] = np.round(points[:, 4], 1)
        frames.append(FrameRecord(k, round(t, 2), states, points))

    return SceneRecord(scene_id, seed, config.to_dict(), rig, frames)


def agent_future(scene: SceneRecord, frame_idx: int, agent_id: int, horizon: int = HORIZON):
    """(positions (horizon, 2), valid (horizon,)) from the stored frames."""
    pos = np.zeros((horizon, 2))
    valid = np.zeros(horizon, dtype=bool)
    for k in range(horizon):
        fi = frame_idx + 1 + k
        if fi >= len(scene.frames):
            break
        for st in scene.frames[fi].agents:
            if st.agent_id == agent_id:
                pos[k] = st.center[:2]
                valid[k] = True
                break
    return pos, valid


# ---------------------------------------------------------------------------
# feature synthesis
# ---------------------------------------------------------------------------


@lru_cache(maxsize=8)
def signature_codes(channels: int):
    """Fixed per-class and velocity channel codes (unit vectors)."""
    rng = np.random.default_rng(90210)
    def unit(n):
        v = rng.normal(size=(n, channels))
        return v / np.linalg.norm(v, axis=1, keepdims=True)
    return unit(len(CLASS_NAMES)), unit(2)


def synth_frame_features(
    scene: SceneRecord,
    frame_idx: int,
    config: Optional[SimConfig] = None,
    noise_scale: float = 1.0,
):
    """Render the camera feature pyramid for one frame.

    Returns (FeaturePyramid, points). Deterministic given the scene seed and
    frame index; ``noise_scale`` multiplies the background noise (camera
    degradation knob).
    """
    if config is None:
        config = SimConfig.from_dict(scene.config)
    frame = scene.frames[frame_idx]
    rng = np.random.default_rng([scene.seed, 104729, frame_idx])
    class_codes, vel_codes = signature_codes(config.channels)

    shapes = [
        (config.channels, config.level0_rows >> lv, config.level0_cols >> lv)
        for lv in range(config.n_levels)
    ]
    feats = [
        [rng.normal(0.0, config.noise_sigma * noise_scale, sh) for sh in shapes]
        for _ in range(len(scene.rig))
    ]

    if frame.agents:
        centers = np.stack([st.center for st in frame.agents])
        r = normalize_point(centers)
        _, samples, mask = project_to_cameras(r, scene.rig)
        for ai, st in enumerate(frame.agents):
            cls_idx = CLASS_NAMES.index(st.class_name)
            sig = config.blob_amp * class_codes[cls_idx]
            sig = sig + config.velocity_gain * (
                st.velocity[0] * vel_codes[0] + st.velocity[1] * vel_codes[1]
            )
            sig = sig + config.signature_noise * rng.normal(size=config.channels)
            for ci in range(len(scene.rig)):
                if not mask[ai, ci]:
                    continue
                u, v = samples[ai, ci]
                for lv, (e, h, w) in enumerate(shapes):
                    x = (u + 1.0) / 2.0 * (w - 1)
                    y = (v + 1.0) / 2.0 * (h - 1)
                    sigma = max(config.blob_sigma / (2**lv), 0.8)
                    half = int(np.ceil(3.0 * sigma))
                    x0, x1 = max(0, int(x) - half), min(w, int(x) + half + 1)
                    y0, y1 = max(0, int(y) - half), min(h, int(y) + half + 1)
                    if x0 >= x1 or y0 >= y1:
                        continue
                    gx = np.arange(x0, x1) - x
                    gy = np.arange(y0, y1) - y
                    g = np.exp(-(gy[:, None] ** 2 + gx[None, :] ** 2) / (2.0 * sigma**2))
                    feats[ci][lv][:, y0:y1, x0:x1] += sig[:, None, None] * g
    return FeaturePyramid(scene.rig, feats), frame.points


# ---------------------------------------------------------------------------
# scene / prediction file io
# ---------------------------------------------------------------------------


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def scene_to_lines(scene: SceneRecord) -> list:
    header = {
        "format": "scene",
        "version": SCENE_FORMAT_VERSION,
        "scene_id": scene.scene_id,
        "seed": scene.seed,
        "n_frames": len(scene.frames),
        "config": scene.config,
        "rig": [
            {"matrix": cam.matrix.tolist(), "width": cam.width, "height": cam.height}
            for cam in scene.rig
        ],
    }
    lines = [_dumps(header)]
    for fr in scene.frames:
        lines.append(
            _dumps(
                {
                    "frame": fr.index,
                    "t": fr.t,
                    "agents": [
                        {
                            "id": st.agent_id,
                            "cls": st.class_name,
                            "center": st.center.tolist(),
                            "size": st.size.tolist(),
                            "yaw": st.yaw,
                            "vel": st.velocity.tolist(),
                        }
                        for st in fr.agents
                    ],
                    "points": fr.points.tolist(),
                }
            )
        )
    return lines


def write_scene(path, scene: SceneRecord):
    with open(path, "w") as f:
        f.write("\n".join(scene_to_lines(scene)) + "\n")


def read_scene(path) -> SceneRecord:
    with open(path) as f:
        lines = [ln for ln in f.read().splitlines() if ln.strip()]
    if not lines:
        raise FileFormatError(f"{path}: empty scene file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"{path}: corrupt header: {exc}") from exc
    if header.get("format") != "scene" or header.get("version") != SCENE_FORMAT_VERSION:
        raise FileFormatError(
            f"{path}: unsupported scene format/version "
            f"{header.get('format')!r}/{header.get('version')!r}"
        )
    rig = [
        CameraCalib(np.array(c["matrix"]), c["width"], c["height"]) for c in header["rig"]
    ]
    frames = []
    for i, line in enumerate(lines[1:]):
        try:
            rec = json.loads(line)
            agents = [
                AgentState(
                    a["id"],
                    a["cls"],
                    np.array(a["center"]),
                    np.array(a["size"]),
                    a["yaw"],
                    np.array(a["vel"]),
                )
                for a in rec["agents"]
            ]
            pts = np.array(rec["points"], dtype=np.float64).reshape(-1, 5)
            frames.append(FrameRecord(rec["frame"], rec["t"], agents, pts))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FileFormatError(f"{path}: corrupt record {i}: {exc}") from exc
    if len(frames) != header["n_frames"]:
        raise FileFormatError(
            f"{path}: truncated: header says {header['n_frames']} frames, found {len(frames)}"
        )
    return SceneRecord(header["scene_id"], header["seed"], header["config"], rig, frames)


def write_predictions(path, records: list, meta: Optional[dict] = None):
    header = {"format": "predictions", "version": PRED_FORMAT_VERSION}
    header.update(meta or {})
    with open(path, "w") as f:
        f.write(_dumps(header) + "\n")
        for r in records:
            f.write(
                _dumps(
                    {
                        "scene": r.scene_id,
                        "frame": r.frame,
                        "track": r.track_id,
                        "cls": r.class_name,
                        "score": round(float(r.score), 6),
                        "center": np.round(r.center, 4).tolist(),
                        "traj": np.round(r.trajectory, 4).tolist(),
                        "gate_lidar": round(float(r.gate_lidar), 6),
                        "lidar_points": int(r.lidar_points),
                    }
                )
                + "\n"
            )


def read_predictions(path):
    with open(path) as f:
        lines = [ln for ln in f.read().splitlines() if ln.strip()]
    if not lines:
        raise FileFormatError(f"{path}: empty prediction file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"{path}: corrupt header: {exc}") from exc
    if header.get("format") != "predictions" or header.get("version") != PRED_FORMAT_VERSION:
        raise FileFormatError(
            f"{path}: unsupported prediction format/version "
            f"{header.get('format')!r}/{header.get('version')!r}"
        )
    records = []
    for i, line in enumerate(lines[1:]):
        try:
            rec = json.loads(line)
            records.append(
                PredictionRecord(
                    rec["scene"],
                    rec["frame"],
                    rec["track"],
                    rec["cls"],
                    rec["score"],
                    np.array(rec["center"]),
                    np.array(rec["traj"]),
                    rec["gate_lidar"],
                    rec["lidar_points"],
                )
            )
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FileFormatError(f"{path}: corrupt record {i}: {exc}") from exc
    return records, header
