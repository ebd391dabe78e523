"""Camera projection, BEV coordinate transforms and the positional encoder.

Reference points live in [0,1]^3 normalized against the fixed perception
volume (+-51.2 m in x/y, [-5, 3] m in z). Projection produces per-camera
normalized sampling coordinates plus a validity mask: a point is valid for a
camera iff it lies in front of it and inside the image bounds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import FfnParams, Value, as_value

X_RANGE = (-51.2, 51.2)
Y_RANGE = (-51.2, 51.2)
Z_RANGE = (-5.0, 3.0)
VOLUME_LO = np.array([X_RANGE[0], Y_RANGE[0], Z_RANGE[0]])
VOLUME_HI = np.array([X_RANGE[1], Y_RANGE[1], Z_RANGE[1]])
DEPTH_EPS = 1e-6  # strict "in front of the camera", with a grazing margin


@dataclass
class CameraCalib:
    """Composed 3x4 world-to-image projection plus pixel dimensions."""

    matrix: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.shape != (3, 4):
            raise ValueError("calibration matrix must be 3x4")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")


def denormalize_ref(r):
    """[0,1]^3 -> metric world coordinates inside the perception volume."""
    if isinstance(r, Value):
        return r * (VOLUME_HI - VOLUME_LO) + VOLUME_LO
    return np.asarray(r) * (VOLUME_HI - VOLUME_LO) + VOLUME_LO


def normalize_point(p):
    """Metric world coordinates -> [0,1]^3 (not clipped)."""
    return (np.asarray(p) - VOLUME_LO) / (VOLUME_HI - VOLUME_LO)


def pixel_to_sample(uv: np.ndarray, width: int, height: int) -> np.ndarray:
    """Pixel coordinates -> corner-aligned [-1,1] sampling coordinates."""
    uv = np.asarray(uv, dtype=np.float64)
    out = np.empty_like(uv)
    out[..., 0] = 2.0 * uv[..., 0] / (width - 1) - 1.0
    out[..., 1] = 2.0 * uv[..., 1] / (height - 1) - 1.0
    return out


def project_points(points: np.ndarray, calib: CameraCalib):
    """Project world points (N, 3); returns (uv pixels, depth, valid mask).

    Invalid points (behind the camera, outside bounds, or numerically
    degenerate) get zeroed pixel coordinates.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    hom = np.concatenate([points, np.ones((len(points), 1))], axis=1)
    proj = hom @ calib.matrix.T  # (N, 3)
    depth = proj[:, 2]
    safe = np.where(np.abs(depth) > DEPTH_EPS, depth, 1.0)
    uv = proj[:, :2] / safe[:, None]
    valid = (
        (depth > DEPTH_EPS)
        & (uv[:, 0] >= 0.0)
        & (uv[:, 0] < calib.width)
        & (uv[:, 1] >= 0.0)
        & (uv[:, 1] < calib.height)
    )
    uv = np.where(valid[:, None], uv, 0.0)
    return uv, depth, valid


def project_to_cameras(r, rig: list):
    """Project normalized reference points into every camera of a rig.

    Returns (pixel coords (N, N_cam, 2), sampling coords (N, N_cam, 2) in
    [-1,1], mask (N, N_cam)). Pure numpy; use :func:`sampling_coords_graph`
    when gradients to ``r`` are needed.
    """
    if not rig:
        raise ValueError("camera rig is empty")
    r = np.atleast_2d(np.asarray(r, dtype=np.float64))
    world = denormalize_ref(r)
    n = len(r)
    pixels = np.zeros((n, len(rig), 2))
    samples = np.zeros((n, len(rig), 2))
    mask = np.zeros((n, len(rig)), dtype=bool)
    for ci, calib in enumerate(rig):
        uv, _, valid = project_points(world, calib)
        pixels[:, ci] = uv
        samples[:, ci] = np.where(
            valid[:, None], pixel_to_sample(uv, calib.width, calib.height), 0.0
        )
        mask[:, ci] = valid
    return pixels, samples, mask


def sampling_coords_graph(r: Value, calib: CameraCalib, valid: np.ndarray) -> Value:
    """Differentiable [-1,1] sampling coordinates for one camera.

    ``valid`` is the (constant) mask from :func:`project_to_cameras`; invalid
    rows come out as exact zeros with no gradient path into ``r``.
    """
    world = denormalize_ref(r)
    n = world.data.shape[0]
    hom = ad.concat([world, Value(np.ones((n, 1)))], axis=1)
    proj = ad.matmul(hom, calib.matrix.T)
    depth = proj[:, 2:3]
    # park invalid rows at depth 1 so the divide stays finite; they are zeroed below
    depth_safe = ad.where(valid[:, None], depth, Value(np.ones((n, 1))))
    uv = proj[:, 0:2] / depth_safe
    su = uv[:, 0:1] * (2.0 / (calib.width - 1)) - 1.0
    sv = uv[:, 1:2] * (2.0 / (calib.height - 1)) - 1.0
    coords = ad.concat([su, sv], axis=1)
    return coords * valid[:, None].astype(np.float64)


def bev_grid_coords(r_xy):
    """[0,1]^2 BEV reference -> [-1,1]^2 grid sampling coordinates."""
    if isinstance(r_xy, Value):
        return r_xy * 2.0 - 1.0
    return np.asarray(r_xy) * 2.0 - 1.0


def positional_code(r, encoder: FfnParams) -> Value:
    """Encode reference points through logit space: phi(inverse_sigmoid(r))."""
    return ad.ffn_apply(ad.inverse_sigmoid(as_value(r)), encoder)


def make_camera_ring(
    n_cameras: int = 6,
    width: int = 160,
    height: int = 96,
    focal: float = 110.0,
    cam_height: float = 1.6,
) -> list:
    """Outward-facing pinhole ring at even yaw increments around the origin."""
    rig = []
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    k = np.array([[focal, 0.0, cx], [0.0, focal, cy], [0.0, 0.0, 1.0]])
    center = np.array([0.0, 0.0, cam_height])
    for i in range(n_cameras):
        yaw = 2.0 * np.pi * i / n_cameras
        fwd = np.array([np.cos(yaw), np.sin(yaw), 0.0])
        down = np.array([0.0, 0.0, -1.0])
        right = np.cross(down, fwd)
        rot = np.stack([right, down, fwd])  # world -> camera axes
        ext = np.concatenate([rot, (-rot @ center)[:, None]], axis=1)
        rig.append(CameraCalib(k @ ext, width, height))
    return rig
