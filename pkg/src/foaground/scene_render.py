"""Raycast depth renderer for shoebox rooms with axis-aligned loudspeaker boxes.

Rays leave the camera through each pixel under the same pinhole sign
conventions as ``spatial_frame.backproject``; recorded depth is the pinhole z
of the nearest hit (room wall or box, slab method), so back-projecting a
rendered frame reproduces the hit points exactly. The instance mask stores
the id of the hit box, 0 for background.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, GeometryError, ShapeError
from .spatial_frame import Box3D, CameraIntrinsics, DepthFrame, yaw_matrix

#: Visibility rule: 500 pixels at a 1920x1080 render, scaled by area.
VISIBILITY_BASE_PIXELS = 500
VISIBILITY_BASE_AREA = 1920 * 1080


@dataclass(frozen=True)
class Loudspeaker:
    """World-axis-aligned loudspeaker box."""

    instance_id: int
    center: tuple[float, float, float]
    extents: tuple[float, float, float]


@dataclass(frozen=True)
class CameraPose:
    position: tuple[float, float, float]
    yaw_deg: float


@dataclass(eq=False)
class VisualScene:
    """Room, inserted loudspeakers, and the observing camera."""

    room_dims: tuple[float, float, float]
    loudspeakers: list[Loudspeaker]
    camera: CameraPose
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        if not 1 <= len(self.loudspeakers) <= 3:
            raise GeometryError("scenes carry between 1 and 3 loudspeakers")
        ids = [s.instance_id for s in self.loudspeakers]
        if len(set(ids)) != len(ids) or min(ids) < 1:
            raise GeometryError("instance ids must be unique and >= 1")
        dims = np.asarray(self.room_dims)
        for spk in self.loudspeakers:
            lo = np.asarray(spk.center) - np.asarray(spk.extents) / 2.0
            hi = np.asarray(spk.center) + np.asarray(spk.extents) / 2.0
            if np.any(lo < 0) or np.any(hi > dims):
                raise GeometryError(f"loudspeaker {spk.instance_id} pokes out of the room")

    def speaker(self, instance_id: int) -> Loudspeaker:
        for spk in self.loudspeakers:
            if spk.instance_id == instance_id:
                return spk
        raise KeyError(f"no loudspeaker with id {instance_id}")


@dataclass(eq=False)
class InstanceMask:
    """Per-pixel instance ids, 0 = background."""

    ids: np.ndarray  # (h, w) uint16

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.uint16)
        if self.ids.ndim != 2:
            raise ShapeError("instance mask must be 2-D")


def visibility_threshold(width: int, height: int) -> int:
    """Minimum visible pixels for an instance at the given render size."""
    return int(VISIBILITY_BASE_PIXELS * (width * height) / VISIBILITY_BASE_AREA)


def _ray_grid(intr: CameraIntrinsics, yaw_deg: float) -> np.ndarray:
    """World-frame ray directions through every pixel, pinhole z = 1."""
    u = np.arange(intr.width, dtype=np.float64)
    v = np.arange(intr.height, dtype=np.float64)
    px = (u[None, :] - intr.cx) / intr.fx
    py = (v[:, None] - intr.cy) / intr.fy
    d_cam = np.empty((intr.height, intr.width, 3))
    d_cam[..., 0] = px
    d_cam[..., 1] = -py
    d_cam[..., 2] = -1.0
    return d_cam @ yaw_matrix(yaw_deg).T


def render_depth(scene: VisualScene) -> tuple[DepthFrame, InstanceMask]:
    """Depth and instance mask of a scene via per-pixel raycasting."""
    origin = np.asarray(scene.camera.position, dtype=np.float64)
    dims = np.asarray(scene.room_dims, dtype=np.float64)
    if np.any(origin <= 0) or np.any(origin >= dims):
        raise GeometryError(f"camera {origin} is not strictly inside the room")
    dirs = _ray_grid(scene.intrinsics, scene.camera.yaw_deg)
    safe = np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    inv = 1.0 / safe

    # Room walls: a ray from inside exits at the smallest positive boundary t.
    t_wall = np.maximum((0.0 - origin) * inv, (dims - origin) * inv).min(axis=-1)
    t_best = t_wall
    hit_id = np.zeros(t_wall.shape, dtype=np.uint16)

    for spk in scene.loudspeakers:
        lo = np.asarray(spk.center) - np.asarray(spk.extents) / 2.0
        hi = np.asarray(spk.center) + np.asarray(spk.extents) / 2.0
        t1 = (lo - origin) * inv
        t2 = (hi - origin) * inv
        t_near = np.minimum(t1, t2).max(axis=-1)
        t_far = np.maximum(t1, t2).min(axis=-1)
        hit = (t_near <= t_far) & (t_near > 1e-9) & (t_near < t_best)
        t_best = np.where(hit, t_near, t_best)
        hit_id = np.where(hit, np.uint16(spk.instance_id), hit_id)

    # Rays are parameterized with pinhole z = 1, so depth equals t.
    depth = DepthFrame(t_best, scene.intrinsics)
    return depth, InstanceMask(hit_id)


def visible_pixels(mask: InstanceMask, instance_id: int) -> int:
    """Number of mask pixels carrying ``instance_id``."""
    return int(np.count_nonzero(mask.ids == instance_id))


def gt_box_camera(scene: VisualScene, instance_id: int) -> Box3D:
    """Exact camera-frame ground-truth box for one loudspeaker.

    The world box's 8 corners are expressed in the yawed camera frame and
    wrapped in their axis-aligned bounding box.
    """
    spk = scene.speaker(instance_id)
    half = np.asarray(spk.extents) / 2.0
    signs = np.array(
        [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
        dtype=np.float64,
    )
    corners = np.asarray(spk.center) + signs * half
    rel = corners - np.asarray(scene.camera.position)
    cam = rel @ yaw_matrix(scene.camera.yaw_deg)  # row-vector form of R^T @ v
    lo, hi = cam.min(axis=0), cam.max(axis=0)
    return Box3D(category="speaker", center=(lo + hi) / 2.0, extents=hi - lo)


def default_speaker_extents(rng: np.random.Generator | None = None) -> tuple:
    """Loudspeaker extents: (0.35, 0.9, 0.35) m with +-15% uniform jitter."""
    base = np.array([0.35, 0.9, 0.35])
    if rng is None:
        return tuple(base)
    return tuple(base * rng.uniform(0.85, 1.15, size=3))


# InstanceMask file format: raw unsigned 16-bit little-endian raster plus a
# JSON sidecar {width, height, ids}.

def write_mask(mask: InstanceMask, bin_path) -> None:
    bin_path = Path(bin_path)
    mask.ids.astype("<u2").tofile(bin_path)
    ids = sorted(int(i) for i in np.unique(mask.ids) if i != 0)
    sidecar = {"width": mask.ids.shape[1], "height": mask.ids.shape[0], "ids": ids}
    bin_path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True))


def read_mask(bin_path) -> InstanceMask:
    bin_path = Path(bin_path)
    meta = json.loads(bin_path.with_suffix(".json").read_text())
    raw = np.fromfile(bin_path, dtype="<u2")
    if raw.size != meta["width"] * meta["height"]:
        raise FormatError(
            f"{bin_path}: mask holds {raw.size} values, expected "
            f"{meta['width'] * meta['height']}"
        )
    return InstanceMask(raw.reshape(meta["height"], meta["width"]))
