"""Camera-frame geometry: angles, back-projection, positional encoding, 3D boxes.

Conventions used throughout the toolkit (right-handed):

* camera frame: x points right, y up, z backward; forward is -z
* azimuth: 0 degrees straight ahead, positive turns left, range [-180, 180]
* elevation: 0 degrees on the horizon, positive up, range [-90, 90]
* at the poles (|elevation| = 90) azimuth is reported as 0
* pixel rasters are row-major with the origin at the top-left; image y grows
  downward, so the pinhole frame (x right, y down, z forward) maps to the
  camera frame through (x, -y, -z)

All angles cross the public API in degrees and are converted to radians only
inside trigonometric kernels.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateInputError,
    ConfigurationError,
    ProjectionError,
    RangeError,
    ShapeError,
)


@dataclass(frozen=True)
class DoA:
    """Direction of arrival as azimuth/elevation degrees."""

    azimuth_deg: float
    elevation_deg: float

    def __post_init__(self):
        if not (-180.0 <= self.azimuth_deg <= 180.0):
            raise RangeError(f"azimuth {self.azimuth_deg} outside [-180, 180]")
        if not (-90.0 <= self.elevation_deg <= 90.0):
            raise RangeError(f"elevation {self.elevation_deg} outside [-90, 90]")


@dataclass(frozen=True)
class Direction:
    """Unit direction vector in the camera frame."""

    x: float
    y: float
    z: float

    def __post_init__(self):
        norm = math.sqrt(self.x**2 + self.y**2 + self.z**2)
        if abs(norm - 1.0) > 1e-9:
            raise DegenerateInputError(f"direction norm {norm} is not 1")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)


def dir_from_angles(doa: DoA) -> Direction:
    """Unit vector for a DoA: (az, el) -> (-cos el sin az, sin el, -cos el cos az)."""
    az = math.radians(doa.azimuth_deg)
    el = math.radians(doa.elevation_deg)
    v = np.array(
        [-math.cos(el) * math.sin(az), math.sin(el), -math.cos(el) * math.cos(az)]
    )
    v /= np.linalg.norm(v)
    return Direction(float(v[0]), float(v[1]), float(v[2]))


def angles_from_dir(d) -> DoA:
    """Azimuth/elevation degrees of a direction vector.

    Accepts a ``Direction`` or any 3-vector; the input is normalized first.
    Raises ``DegenerateInputError`` on a (near) zero vector. At the poles the
    azimuth is 0 by convention.
    """
    v = d.as_array() if isinstance(d, Direction) else np.asarray(d, dtype=np.float64)
    if v.shape != (3,):
        raise ShapeError(f"expected a 3-vector, got shape {v.shape}")
    norm = np.linalg.norm(v)
    if norm < 1e-12:
        raise DegenerateInputError("zero vector has no direction")
    x, y, z = v / norm
    if math.hypot(x, z) < 1e-12:
        return DoA(0.0, 90.0 if y > 0 else -90.0)
    az = math.degrees(math.atan2(-x, -z))
    el = math.degrees(math.asin(min(1.0, max(-1.0, y))))
    return DoA(az, el)


def angular_error(a: DoA, b: DoA) -> float:
    """Great-circle angle in degrees between two DoAs."""
    dot = float(np.dot(dir_from_angles(a).as_array(), dir_from_angles(b).as_array()))
    return math.degrees(math.acos(min(1.0, max(-1.0, dot))))


def yaw_matrix(yaw_deg: float) -> np.ndarray:
    """Rotation about the world up-axis (+y); positive yaw turns left."""
    t = math.radians(yaw_deg)
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def world_to_camera(v: np.ndarray, yaw_deg: float) -> np.ndarray:
    """Express a world vector in the frame of a camera yawed by ``yaw_deg``."""
    return yaw_matrix(yaw_deg).T @ np.asarray(v, dtype=np.float64)


def camera_to_world(v: np.ndarray, yaw_deg: float) -> np.ndarray:
    return yaw_matrix(yaw_deg) @ np.asarray(v, dtype=np.float64)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise RangeError("focal lengths must be positive")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise RangeError("principal point outside the image")
        if self.width <= 0 or self.height <= 0:
            raise RangeError("image dimensions must be positive")


@dataclass(eq=False)
class DepthFrame:
    """Metric depth raster (meters) with intrinsics; depth 0 marks invalid pixels."""

    depth: np.ndarray
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.depth.ndim != 2:
            raise ShapeError("depth raster must be 2-D")
        h, w = self.depth.shape
        if (h, w) != (self.intrinsics.height, self.intrinsics.width):
            raise ShapeError(
                f"raster {h}x{w} does not match intrinsics "
                f"{self.intrinsics.height}x{self.intrinsics.width}"
            )
        if not np.all(np.isfinite(self.depth)) or np.any(self.depth < 0):
            raise RangeError("depths must be finite and >= 0")


@dataclass(eq=False)
class PointCloud:
    """Per-pixel camera-frame points with a validity mask.

    Invalid pixels hold zeros; consumers must honor ``valid`` instead of
    relying on sentinel coordinates.
    """

    points: np.ndarray  # (h, w, 3)
    valid: np.ndarray  # (h, w) bool


def backproject(frame: DepthFrame) -> PointCloud:
    """Lift a depth raster to camera-frame points.

    Pixel (u, v) with depth d maps to d * K^-1 (u, v, 1)^T in the pinhole
    frame, then to the camera frame via (x, -y, -z). Zero-depth pixels are
    masked invalid.
    """
    intr = frame.intrinsics
    d = frame.depth
    u = np.arange(intr.width, dtype=np.float64)
    v = np.arange(intr.height, dtype=np.float64)
    x_pin = (u[None, :] - intr.cx) / intr.fx * d
    y_pin = (v[:, None] - intr.cy) / intr.fy * d
    points = np.stack([x_pin, -y_pin, -d], axis=-1)
    valid = d > 0
    points[~valid] = 0.0
    return PointCloud(points=points, valid=valid)


def project(point, intrinsics: CameraIntrinsics) -> tuple[float, float]:
    """Pixel (u, v) of a camera-frame point; exact inverse of ``backproject``.

    The point must lie strictly in front of the camera (z < 0).
    """
    p = np.asarray(point, dtype=np.float64)
    if p.shape != (3,):
        raise ShapeError(f"expected a 3-vector, got shape {p.shape}")
    depth = -p[2]
    if depth <= 0:
        raise ProjectionError(f"point with z={p[2]} is not in front of the camera")
    u = intrinsics.cx + intrinsics.fx * p[0] / depth
    v = intrinsics.cy - intrinsics.fy * p[1] / depth
    return float(u), float(v)


def pool_coords(cloud: PointCloud, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Adaptive average pooling of a point cloud to an h x w grid.

    Window rows for output cell i span floor(i*H/h) .. ceil((i+1)*H/h), and
    likewise for columns. Each cell is the mean over valid points in its
    window; cells with no valid points are masked out.

    Returns:
        (means, valid) with shapes (h, w, 3) and (h, w).
    """
    H, W = cloud.valid.shape
    if h <= 0 or w <= 0:
        raise RangeError("pooled dimensions must be positive")
    if h > H or w > W:
        raise RangeError(f"pooled grid {h}x{w} exceeds raster {H}x{W}")
    means = np.zeros((h, w, 3))
    valid = np.zeros((h, w), dtype=bool)
    pts = np.where(cloud.valid[..., None], cloud.points, 0.0)
    for i in range(h):
        r0, r1 = (i * H) // h, -(-((i + 1) * H) // h)
        for j in range(w):
            c0, c1 = (j * W) // w, -(-((j + 1) * W) // w)
            m = cloud.valid[r0:r1, c0:c1]
            n = int(m.sum())
            if n == 0:
                continue
            means[i, j] = pts[r0:r1, c0:c1].sum(axis=(0, 1)) / n
            valid[i, j] = True
    return means, valid


@dataclass(eq=False)
class FeatureGrid:
    """Dense h x w x c feature raster."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ShapeError("feature grid must be h x w x c")


def sinusoidal_pe(coords: np.ndarray, c: int) -> FeatureGrid:
    """Sinusoidal encoding of metric coordinates into c channels.

    Each axis of the (h, w, 3) coordinate grid receives c/3 channels laid out
    as alternating sin/cos pairs: channel 2j holds sin(a / 10000^(2j/(c/3)))
    and channel 2j+1 the matching cos, for j = 0 .. c/6 - 1. Axis blocks are
    concatenated in x, y, z order, so c must be divisible by 6.
    """
    if c % 6 != 0 or c <= 0:
        raise ConfigurationError(f"channel count {c} is not a positive multiple of 6")
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 3 or coords.shape[2] != 3:
        raise ShapeError("coords must have shape (h, w, 3)")
    per_axis = c // 3
    j = np.arange(per_axis // 2, dtype=np.float64)
    inv_freq = 10000.0 ** (-2.0 * j / per_axis)  # (c/6,)
    out = np.empty(coords.shape[:2] + (c,))
    for axis in range(3):
        phase = coords[..., axis, None] * inv_freq  # (h, w, c/6)
        base = axis * per_axis
        out[..., base : base + per_axis : 2] = np.sin(phase)
        out[..., base + 1 : base + per_axis : 2] = np.cos(phase)
    return FeatureGrid(out)


def fuse(visual: FeatureGrid, pe: FeatureGrid) -> FeatureGrid:
    """Element-wise sum of a visual feature grid and its positional encoding."""
    if visual.values.shape != pe.values.shape:
        raise ShapeError(
            f"shape mismatch {visual.values.shape} vs {pe.values.shape}"
        )
    return FeatureGrid(visual.values + pe.values)


@dataclass(eq=False)
class Box3D:
    """Axis-aligned 3D box in the camera frame: label, center, extents (meters)."""

    category: str
    center: np.ndarray
    extents: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.extents = np.asarray(self.extents, dtype=np.float64)
        if self.center.shape != (3,) or self.extents.shape != (3,):
            raise ShapeError("center and extents must be 3-vectors")
        if np.any(self.extents <= 0):
            raise RangeError(f"extents must be positive, got {self.extents}")

    @property
    def min_corner(self) -> np.ndarray:
        return self.center - self.extents / 2.0

    @property
    def max_corner(self) -> np.ndarray:
        return self.center + self.extents / 2.0

    def volume(self) -> float:
        return float(np.prod(self.extents))


def iou3d(a: Box3D, b: Box3D) -> float:
    """Volumetric intersection over union of two axis-aligned boxes."""
    lo = np.maximum(a.min_corner, b.min_corner)
    hi = np.minimum(a.max_corner, b.max_corner)
    inter = float(np.prod(np.maximum(hi - lo, 0.0)))
    # Volumes from the same corner arithmetic keep iou(a, a) exactly 1.
    va = float(np.prod(a.max_corner - a.min_corner))
    vb = float(np.prod(b.max_corner - b.min_corner))
    union = va + vb - inter
    return inter / union


def center_offset(a: Box3D, b: Box3D) -> float:
    """Euclidean distance in meters between two box centers."""
    return float(np.linalg.norm(a.center - b.center))


# Depth file format: raw float32 little-endian raster (row-major, top-left
# origin) next to a JSON sidecar {width, height, fx, fy, cx, cy}.

def write_depth(frame: DepthFrame, bin_path) -> None:
    bin_path = Path(bin_path)
    intr = frame.intrinsics
    frame.depth.astype("<f4").tofile(bin_path)
    sidecar = {
        "width": intr.width,
        "height": intr.height,
        "fx": intr.fx,
        "fy": intr.fy,
        "cx": intr.cx,
        "cy": intr.cy,
    }
    bin_path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True))


def read_depth(bin_path) -> DepthFrame:
    bin_path = Path(bin_path)
    meta = json.loads(bin_path.with_suffix(".json").read_text())
    intr = CameraIntrinsics(
        fx=meta["fx"], fy=meta["fy"], cx=meta["cx"], cy=meta["cy"],
        width=meta["width"], height=meta["height"],
    )
    raster = np.fromfile(bin_path, dtype="<f4")
    if raster.size != intr.width * intr.height:
        raise ShapeError(
            f"raster holds {raster.size} values, expected {intr.width * intr.height}"
        )
    return DepthFrame(raster.reshape(intr.height, intr.width).astype(np.float64), intr)
