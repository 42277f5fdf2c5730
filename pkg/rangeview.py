#!/usr/bin/env python3
"""
Range-View Geometry
-------------------
Deterministic LiDAR geometry shared by every other module:

- Spherical projection of point clouds into panoramic range images
- Ray recovery (the inverse projection at unit depth, at pixel centers)
- Unprojection of range images back into point clouds
- LiDAR-to-camera pinhole projection with validity flags

Conventions:
- LiDAR frame: x forward, y left, z up; azimuth 0 looks along +x
- Column 0 and column w-1 are azimuth neighbours (the panorama wraps)
- `fov_up` and `fov_down` are stored as positive magnitudes; the lowest
  beam has elevation -fov_down
- Depth 0 encodes "no return"; range images never hold NaN
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

NO_LABEL = -1


class GeometryError(ValueError):
    """Raised for invalid sensor specs, clouds, calibrations or pixel indices."""


# ==================== Domain Types ====================

@dataclass(frozen=True)
class SensorSpec:
    h: int
    w: int
    fov_up: float
    fov_down: float
    d_min: float
    d_max: float

    def __post_init__(self):
        if self.h < 2 or self.w < 4:
            raise GeometryError(f"Range image must be at least 2x4, got {self.h}x{self.w}")
        if not self.fov_up + self.fov_down > 0:
            raise GeometryError("Empty vertical field of view (fov_up + fov_down <= 0)")
        if not 0 < self.d_min < self.d_max:
            raise GeometryError(f"Need 0 < d_min < d_max, got {self.d_min}, {self.d_max}")

    @property
    def fov(self) -> float:
        return abs(self.fov_up) + abs(self.fov_down)

    @property
    def pixel_angle(self) -> float:
        """Largest angular extent of one pixel (radians)"""
        return max(self.fov / self.h, 2.0 * math.pi / self.w)

    def to_metadata(self) -> dict:
        return {
            "h": self.h, "w": self.w,
            "fov_up": self.fov_up, "fov_down": self.fov_down,
            "d_min": self.d_min, "d_max": self.d_max,
        }

    @classmethod
    def from_metadata(cls, meta: dict) -> "SensorSpec":
        return cls(int(meta["h"]), int(meta["w"]), float(meta["fov_up"]),
                   float(meta["fov_down"]), float(meta["d_min"]), float(meta["d_max"]))


@dataclass
class PointCloud:
    """N points (float64, meters) with reflectance in [0, 1] and optional class ids."""
    points: np.ndarray
    intensity: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.intensity = np.asarray(self.intensity, dtype=np.float32).reshape(-1)
        if len(self.intensity) != len(self.points):
            raise GeometryError("points and intensity lengths differ")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int16).reshape(-1)
            if len(self.labels) != len(self.points):
                raise GeometryError("points and labels lengths differ")

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, mask: np.ndarray) -> "PointCloud":
        labels = None if self.labels is None else self.labels[mask]
        return PointCloud(self.points[mask], self.intensity[mask], labels)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0, dtype=np.float32))


@dataclass
class RangeImage:
    """h x w depth (float32 meters, 0 = no return) and intensity, plus optional labels."""
    depth: np.ndarray
    intensity: np.ndarray
    sensor: SensorSpec
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        shape = (self.sensor.h, self.sensor.w)
        self.depth = np.asarray(self.depth, dtype=np.float32)
        self.intensity = np.asarray(self.intensity, dtype=np.float32)
        if self.depth.shape != shape or self.intensity.shape != shape:
            raise GeometryError(f"Range image channels must be {shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int16)

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0

    def stacked(self) -> np.ndarray:
        """[2, h, w] (depth, intensity) array, the persisted layout"""
        return np.stack([self.depth, self.intensity])

    def __eq__(self, other) -> bool:
        if not isinstance(other, RangeImage):
            return NotImplemented
        return (self.sensor == other.sensor
                and np.array_equal(self.depth, other.depth)
                and np.array_equal(self.intensity, other.intensity))


@dataclass
class CameraView:
    image: np.ndarray
    K: np.ndarray
    T: np.ndarray
    name: str = "front"

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.K = np.asarray(self.K, dtype=np.float64)
        self.T = np.asarray(self.T, dtype=np.float64)
        validate_calibration(self.K, self.T)
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise GeometryError(f"Camera image must be HxWx3, got {self.image.shape}")

    @property
    def size(self) -> Tuple[int, int]:
        return self.image.shape[0], self.image.shape[1]


def validate_calibration(K: np.ndarray, T: np.ndarray) -> None:
    if K.shape != (3, 4):
        raise GeometryError(f"K must be 3x4, got {K.shape}")
    if T.shape != (4, 4):
        raise GeometryError(f"T must be 4x4, got {T.shape}")
    if not (K[0, 0] > 0 and K[1, 1] > 0):
        raise GeometryError("K must have positive focal entries")
    if not np.array_equal(T[3], np.array([0.0, 0.0, 0.0, 1.0])):
        raise GeometryError("Bottom row of T must be (0, 0, 0, 1)")
    if abs(np.linalg.det(T[:3, :3])) < 1e-12:
        raise GeometryError("T is singular")


# ==================== Spherical Projection ====================

def pixel_coordinates(points: np.ndarray, sensor: SensorSpec) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Continuous (u, v) range-image coordinates and depth d = ||p||."""
    depth = np.linalg.norm(points, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        azimuth = np.arctan2(points[:, 1], points[:, 0])
        elevation = np.arcsin(np.clip(points[:, 2] / depth, -1.0, 1.0))
    u = 0.5 * (1.0 - azimuth / math.pi) * sensor.w
    # fov_down is a magnitude, so it is added as written
    v = (1.0 - (elevation + sensor.fov_down) / sensor.fov) * sensor.h
    return u, v, depth


def project_points(cloud: PointCloud, sensor: SensorSpec) -> RangeImage:
    """Spherical projection; the nearest point wins each pixel."""
    if not np.all(np.isfinite(cloud.points)):
        raise GeometryError("Point cloud contains non-finite coordinates")

    depth_img = np.zeros((sensor.h, sensor.w), dtype=np.float32)
    intensity_img = np.zeros((sensor.h, sensor.w), dtype=np.float32)
    label_img = None
    if cloud.labels is not None:
        label_img = np.full((sensor.h, sensor.w), NO_LABEL, dtype=np.int16)

    if len(cloud) == 0:
        return RangeImage(depth_img, intensity_img, sensor, label_img)

    u, v, depth = pixel_coordinates(cloud.points, sensor)
    elevation = np.arcsin(np.clip(cloud.points[:, 2] / np.maximum(depth, 1e-300), -1.0, 1.0))
    keep = (
        (depth >= sensor.d_min) & (depth <= sensor.d_max)
        & (elevation >= -sensor.fov_down) & (elevation <= sensor.fov_up)
    )
    dropped = int(len(cloud) - keep.sum())
    if dropped:
        logger.debug("Dropped %d points outside range or field of view", dropped)

    cols = np.clip(np.floor(u[keep]), 0, sensor.w - 1).astype(np.int64)
    rows = np.clip(np.floor(v[keep]), 0, sensor.h - 1).astype(np.int64)
    depth = depth[keep]
    intensity = cloud.intensity[keep]

    # farthest first, so the nearest assignment lands last
    order = np.argsort(-depth, kind="stable")
    rows, cols = rows[order], cols[order]
    depth_img[rows, cols] = depth[order]
    intensity_img[rows, cols] = intensity[order]
    if label_img is not None:
        label_img[rows, cols] = cloud.labels[keep][order]

    return RangeImage(depth_img, intensity_img, sensor, label_img)


def _ray_angles(u: np.ndarray, v: np.ndarray, sensor: SensorSpec) -> Tuple[np.ndarray, np.ndarray]:
    azimuth = math.pi * (1.0 - 2.0 * (u + 0.5) / sensor.w)
    inclination = sensor.fov * (1.0 - (v + 0.5) / sensor.h) - sensor.fov_down
    return azimuth, inclination


def ray_direction(u: int, v: int, sensor: SensorSpec) -> np.ndarray:
    """Unit ray through the center of column `u`, row `v`."""
    if not (0 <= u < sensor.w and 0 <= v < sensor.h):
        raise GeometryError(f"Pixel (u={u}, v={v}) outside {sensor.w}x{sensor.h}")
    azimuth, inclination = _ray_angles(np.float64(u), np.float64(v), sensor)
    return np.array([
        math.cos(inclination) * math.cos(azimuth),
        math.cos(inclination) * math.sin(azimuth),
        math.sin(inclination),
    ])


def ray_grid(sensor: SensorSpec, stride: int = 1) -> np.ndarray:
    """[h / stride, w / stride, 3] unit rays through the centers of a (possibly coarser) grid"""
    if sensor.h % stride or sensor.w % stride:
        raise GeometryError(f"{sensor.h}x{sensor.w} is not divisible by stride {stride}")
    rows = (np.arange(sensor.h // stride, dtype=np.float64) + 0.5) * stride - 0.5
    cols = (np.arange(sensor.w // stride, dtype=np.float64) + 0.5) * stride - 0.5
    v, u = np.meshgrid(rows, cols, indexing="ij")
    azimuth, inclination = _ray_angles(u, v, sensor)
    return np.stack([
        np.cos(inclination) * np.cos(azimuth),
        np.cos(inclination) * np.sin(azimuth),
        np.sin(inclination),
    ], axis=-1)


def unproject(range_image: RangeImage) -> PointCloud:
    """One point per nonzero pixel: p = depth(u, v) * Ray(u, v)."""
    rows, cols = np.nonzero(range_image.depth > 0)
    rays = ray_grid(range_image.sensor)[rows, cols]
    points = rays * range_image.depth[rows, cols].astype(np.float64)[:, None]
    labels = None
    if range_image.labels is not None:
        labels = range_image.labels[rows, cols]
    return PointCloud(points, range_image.intensity[rows, cols], labels)


# ==================== Camera Projection ====================

@dataclass
class CameraProjection:
    u: np.ndarray
    v: np.ndarray
    z_cam: np.ndarray
    valid: np.ndarray = field(repr=False)


def pinhole_project(points: np.ndarray, K: np.ndarray, T: np.ndarray,
                    image_size: Tuple[int, int]) -> CameraProjection:
    """Pinhole projection of LiDAR-frame points: [u', v', 1] ~ K T p.

    The divisor is the camera-frame depth (third row of T p), not the
    LiDAR-frame z.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    height, width = image_size
    homog = np.concatenate([points, np.ones((len(points), 1))], axis=1)
    cam = homog @ T.T
    pix = cam @ K.T
    z_cam = cam[:, 2]

    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(z_cam > 0, pix[:, 0] / z_cam, np.nan)
        v = np.where(z_cam > 0, pix[:, 1] / z_cam, np.nan)
    valid = (z_cam > 0) & (u >= 0) & (u < width) & (v >= 0) & (v < height)
    return CameraProjection(u, v, z_cam, valid)


def lidar_to_camera(cloud: PointCloud, view: CameraView) -> CameraProjection:
    """Project a cloud into one calibrated view (pixel coords, camera depth, validity)."""
    return pinhole_project(cloud.points, view.K, view.T, view.size)


def lookup_depth(depth_map: np.ndarray, u: np.ndarray, v: np.ndarray,
                 edge_tol: float = 0.25) -> Tuple[np.ndarray, np.ndarray]:
    """Reference depth at continuous pixel positions.

    Inverse depth is bilinearly interpolated between the four surrounding
    pixel centers (exact on planar surfaces). Positions whose neighbourhood
    spans a depth discontinuity (relative inverse-depth spread above
    `edge_tol`) or an empty pixel are reported as not ok.
    """
    height, width = depth_map.shape
    x = np.clip(u - 0.5, 0.0, width - 1.0)
    y = np.clip(v - 0.5, 0.0, height - 1.0)
    x0 = np.clip(np.floor(x).astype(np.int64), 0, max(width - 2, 0))
    y0 = np.clip(np.floor(y).astype(np.int64), 0, max(height - 2, 0))
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    fx = x - x0
    fy = y - y0

    corners = np.stack([depth_map[y0, x0], depth_map[y0, x1],
                        depth_map[y1, x0], depth_map[y1, x1]]).astype(np.float64)
    finite = np.all(np.isfinite(corners) & (corners > 0), axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(finite, 1.0 / corners, 0.0)
        spread = (inv.max(axis=0) - inv.min(axis=0)) / np.maximum(inv.max(axis=0), 1e-300)
        weights = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy])
        depth = 1.0 / (weights * inv).sum(axis=0)
    ok = finite & (spread <= edge_tol)
    return np.where(ok, depth, np.nan), ok
