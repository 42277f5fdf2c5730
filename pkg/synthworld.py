#!/usr/bin/env python3
"""
Synthetic Paired World
----------------------
Procedural (RGB, LiDAR, semantics, depth) tuples from seeded scenes of
oriented boxes and vertical walls standing on a ground plane.

Features:
- Rejection-sampled scenes (no box interpenetration, separating-axis test)
- Closed-form ray intersections shared by the LiDAR raycaster and the
  camera rasterizer, so both agree on every surface
- Ground-truth semantic and camera-depth maps from the same z-buffer
- Weather: night/fog/snow camera appearance, fog/snow LiDAR corruption

Every stochastic draw comes from a generator seeded by (scene seed, stream),
so (seed, config) fully determines a sample.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from config import RunConfig, SceneConfig, WeatherConfig, WEATHERS
from rangeview import (NO_LABEL, CameraView, PointCloud, RangeImage, SensorSpec,
                       pixel_coordinates, project_points, ray_grid)

logger = logging.getLogger(__name__)

CLASS_NAMES = ("ground", "car", "wall", "clutter")
GROUND, CAR, WALL, CLUTTER = range(len(CLASS_NAMES))
SKY = 255

GROUND_ALBEDO = (0.32, 0.32, 0.30)
SKY_COLOR = np.array([0.62, 0.74, 0.90], dtype=np.float32)
SUN = np.array([0.3, 0.2, 0.93]) / np.linalg.norm([0.3, 0.2, 0.93])
AIRLIGHT = 0.8

_EPS = 1e-9
_BOX_MARGIN = 0.2

# generator streams
_SCENE, _CAMERA, _LIDAR_WEATHER, _WEATHER_CHOICE = range(4)


class SceneError(ValueError):
    """Raised when a scene cannot be built or a weather does not apply."""


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *stream])


def luminance(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    return rgb[..., 0] * 0.299 + rgb[..., 1] * 0.587 + rgb[..., 2] * 0.114


# ==================== Scene Description ====================

@dataclass(frozen=True)
class Box:
    center: Tuple[float, float, float]
    size: Tuple[float, float, float]
    yaw: float
    cls: int
    albedo: Tuple[float, float, float]

    def footprint(self) -> np.ndarray:
        """[4, 2] ground-plane corners"""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hx, hy = self.size[0] / 2.0, self.size[1] / 2.0
        local = np.array([[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array(self.center[:2])


@dataclass(frozen=True)
class Wall:
    """Finite vertical rectangle; `yaw` is the direction along the wall."""
    center: Tuple[float, float]
    yaw: float
    length: float
    height: float
    albedo: Tuple[float, float, float]


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    ground_z: float
    boxes: Tuple[Box, ...]
    walls: Tuple[Wall, ...]
    sensor_height: float


def _separated(a: np.ndarray, b: np.ndarray, margin: float) -> bool:
    """Separating-axis test for two convex footprints"""
    for poly in (a, b):
        edges = np.roll(poly, -1, axis=0) - poly
        for edge in edges:
            axis = np.array([-edge[1], edge[0]])
            axis /= np.linalg.norm(axis)
            pa, pb = a @ axis, b @ axis
            if pa.max() + margin < pb.min() or pb.max() + margin < pa.min():
                return True
    return False


def boxes_overlap(a: Box, b: Box, margin: float = 0.0) -> bool:
    return not _separated(a.footprint(), b.footprint(), margin)


def _draw_box(rng: np.random.Generator, knobs: SceneConfig, ground_z: float) -> Box:
    radius = rng.uniform(*knobs.box_radius)
    azimuth = rng.uniform(-math.pi, math.pi)
    if rng.random() < 0.6:
        cls = CAR
        size = (rng.uniform(3.8, 4.8), rng.uniform(1.6, 2.0), rng.uniform(1.4, 1.7))
        albedo = tuple(rng.uniform(0.1, 0.9, size=3))
    else:
        cls = CLUTTER
        size = (rng.uniform(0.4, 1.2), rng.uniform(0.4, 1.2), rng.uniform(0.5, 2.0))
        grey = rng.uniform(0.2, 0.5)
        albedo = (grey, grey + 0.15, grey)
    center = (radius * math.cos(azimuth), radius * math.sin(azimuth), ground_z + size[2] / 2.0)
    return Box(center, size, float(rng.uniform(-math.pi, math.pi)), cls,
               tuple(float(x) for x in albedo))


def sample_scene(seed: int, knobs: SceneConfig = SceneConfig(),
                 max_attempts: int = 1000) -> SceneSpec:
    """Deterministic scene: boxes resting on the ground, walls further out."""
    if not 0 <= knobs.min_boxes <= knobs.max_boxes:
        raise SceneError(f"Invalid box count range [{knobs.min_boxes}, {knobs.max_boxes}]")

    rng = _rng(seed, _SCENE)
    ground_z = -knobs.sensor_height
    n_boxes = int(rng.integers(knobs.min_boxes, knobs.max_boxes + 1))
    n_walls = int(rng.integers(0, knobs.max_walls + 1))

    boxes: List[Box] = []
    attempts = 0
    while len(boxes) < n_boxes:
        attempts += 1
        if attempts > max_attempts:
            if len(boxes) >= knobs.min_boxes:
                break
            raise SceneError(f"seed {seed}: could not place {knobs.min_boxes} boxes")
        candidate = _draw_box(rng, knobs, ground_z)
        if all(not boxes_overlap(candidate, other, _BOX_MARGIN) for other in boxes):
            boxes.append(candidate)

    walls = []
    for _ in range(n_walls):
        distance = rng.uniform(*knobs.wall_distance)
        azimuth = rng.uniform(-math.pi, math.pi)
        # facing the sensor: the wall runs perpendicular to its bearing
        walls.append(Wall(
            center=(distance * math.cos(azimuth), distance * math.sin(azimuth)),
            yaw=azimuth + math.pi / 2.0,
            length=float(rng.uniform(8.0, 25.0)),
            height=float(rng.uniform(2.5, 6.0)),
            albedo=tuple(float(x) for x in rng.uniform(0.4, 0.8, size=3)),
        ))

    logger.debug("scene %d: %d boxes, %d walls (%d placement attempts)", seed, len(boxes), len(walls), attempts)
    return SceneSpec(int(seed), ground_z, tuple(boxes), tuple(walls), knobs.sensor_height)


# ==================== Ray Intersection ====================

@dataclass
class SurfaceHits:
    distance: np.ndarray  # [N], inf where nothing is hit
    labels: np.ndarray    # [N] int16 class ids, NO_LABEL where nothing is hit
    albedo: np.ndarray    # [N, 3]
    normal: np.ndarray    # [N, 3]


def _hit_ground(scene: SceneSpec, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (scene.ground_z - origins[:, 2]) / dirs[:, 2]
    ok = (dirs[:, 2] < 0) & (origins[:, 2] > scene.ground_z) & (t > _EPS)
    return np.where(ok, t, np.inf)


def _hit_boxes(boxes: Sequence[Box], origins: np.ndarray, dirs: np.ndarray):
    n = len(origins)
    if not boxes:
        return np.full(n, np.inf), np.zeros(n, dtype=np.int64), np.zeros((n, 3))

    centers = np.array([b.center for b in boxes])
    half = np.array([b.size for b in boxes]) / 2.0
    yaw = np.array([b.yaw for b in boxes])
    c, s = np.cos(yaw), np.sin(yaw)

    # into each box frame (rotation by -yaw about z)
    rel = origins[:, None, :] - centers[None]
    lo = np.stack([c * rel[..., 0] + s * rel[..., 1],
                   -s * rel[..., 0] + c * rel[..., 1],
                   rel[..., 2]], axis=-1)
    ld = np.stack([c * dirs[:, None, 0] + s * dirs[:, None, 1],
                   -s * dirs[:, None, 0] + c * dirs[:, None, 1],
                   np.broadcast_to(dirs[:, None, 2], (n, len(boxes)))], axis=-1)

    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - lo) / ld
        t2 = (half - lo) / ld
    tmin = np.fmin(t1, t2)
    tmax = np.fmax(t1, t2)
    t_near = np.nanmax(tmin, axis=2)
    t_far = np.nanmin(tmax, axis=2)
    hit = (t_near <= t_far) & (t_near > _EPS)
    t = np.where(hit, t_near, np.inf)

    best = np.argmin(t, axis=1)
    rows = np.arange(n)
    t_best = t[rows, best]

    face = np.argmax(np.nan_to_num(tmin[rows, best], nan=-np.inf), axis=1)
    sign = -np.sign(ld[rows, best, face])
    local_normal = np.zeros((n, 3))
    local_normal[rows, face] = sign
    cb, sb = c[best], s[best]
    normal = np.stack([cb * local_normal[:, 0] - sb * local_normal[:, 1],
                       sb * local_normal[:, 0] + cb * local_normal[:, 1],
                       local_normal[:, 2]], axis=1)
    return t_best, best, normal


def _hit_walls(scene: SceneSpec, origins: np.ndarray, dirs: np.ndarray):
    n = len(origins)
    if not scene.walls:
        return np.full(n, np.inf), np.zeros(n, dtype=np.int64), np.zeros((n, 3))

    yaw = np.array([w.yaw for w in scene.walls])
    tangent = np.stack([np.cos(yaw), np.sin(yaw), np.zeros_like(yaw)], axis=1)
    normal = np.stack([-np.sin(yaw), np.cos(yaw), np.zeros_like(yaw)], axis=1)
    centers = np.array([[w.center[0], w.center[1], scene.ground_z] for w in scene.walls])
    half_length = np.array([w.length for w in scene.walls]) / 2.0
    top = scene.ground_z + np.array([w.height for w in scene.walls])

    denom = dirs @ normal.T
    with np.errstate(divide="ignore", invalid="ignore"):
        t = ((centers[None] - origins[:, None, :]) * normal[None]).sum(-1) / denom
    hit_points = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    along = ((hit_points - centers[None]) * tangent[None]).sum(-1)
    z = hit_points[..., 2]
    hit = ((np.abs(denom) > 1e-12) & (t > _EPS) & (np.abs(along) <= half_length)
           & (z >= scene.ground_z) & (z <= top))
    t = np.where(hit, t, np.inf)

    best = np.argmin(t, axis=1)
    rows = np.arange(n)
    return t[rows, best], best, normal[best]


def intersect_rays(scene: SceneSpec, origins: np.ndarray, dirs: np.ndarray) -> SurfaceHits:
    """First hit of unit rays `origins + t * dirs` against every primitive"""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = len(dirs)

    t_ground = _hit_ground(scene, origins, dirs)
    t_box, box_idx, box_normal = _hit_boxes(scene.boxes, origins, dirs)
    t_wall, wall_idx, wall_normal = _hit_walls(scene, origins, dirs)

    candidates = np.stack([t_ground, t_box, t_wall], axis=1)
    kind = np.argmin(candidates, axis=1)
    distance = candidates[np.arange(n), kind]
    missed = ~np.isfinite(distance)

    labels = np.full(n, GROUND, dtype=np.int16)
    albedo = np.tile(np.array(GROUND_ALBEDO), (n, 1))
    normal = np.tile(np.array([0.0, 0.0, 1.0]), (n, 1))

    if scene.boxes:
        on_box = kind == 1
        box_cls = np.array([b.cls for b in scene.boxes], dtype=np.int16)
        box_albedo = np.array([b.albedo for b in scene.boxes])
        labels[on_box] = box_cls[box_idx[on_box]]
        albedo[on_box] = box_albedo[box_idx[on_box]]
        normal[on_box] = box_normal[on_box]
    if scene.walls:
        on_wall = kind == 2
        wall_albedo = np.array([w.albedo for w in scene.walls])
        labels[on_wall] = WALL
        albedo[on_wall] = wall_albedo[wall_idx[on_wall]]
        normal[on_wall] = wall_normal[on_wall]

    labels[missed] = NO_LABEL
    albedo[missed] = 0.0
    return SurfaceHits(distance, labels, albedo, normal)


# ==================== LiDAR ====================

def raycast_lidar(scene: SceneSpec, sensor: SensorSpec) -> Tuple[PointCloud, RangeImage]:
    """One ray per range pixel; first hit within [d_min, d_max]."""
    rays = ray_grid(sensor).reshape(-1, 3)
    hits = intersect_rays(scene, np.zeros_like(rays), rays)
    ok = (hits.distance >= sensor.d_min) & (hits.distance <= sensor.d_max)

    cos_incidence = np.abs((hits.normal * rays).sum(axis=1))
    intensity = np.clip(luminance(hits.albedo) * cos_incidence, 0.0, 1.0)

    cloud = PointCloud(rays[ok] * hits.distance[ok, None], intensity[ok], hits.labels[ok])
    return cloud, project_points(cloud, sensor)


def label_points(scene: SceneSpec, points: np.ndarray, radius: float = 0.5) -> np.ndarray:
    """Class of the nearest scene surface within `radius`, else NO_LABEL."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    distances = [np.abs(points[:, 2] - scene.ground_z)]
    classes = [GROUND]

    for box in scene.boxes:
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        rel = points - np.array(box.center)
        local = np.stack([c * rel[:, 0] + s * rel[:, 1], -s * rel[:, 0] + c * rel[:, 1], rel[:, 2]], axis=1)
        q = np.abs(local) - np.array(box.size) / 2.0
        sdf = np.linalg.norm(np.maximum(q, 0.0), axis=1) + np.minimum(q.max(axis=1), 0.0)
        distances.append(np.abs(sdf))
        classes.append(box.cls)

    for wall in scene.walls:
        tangent = np.array([math.cos(wall.yaw), math.sin(wall.yaw), 0.0])
        rel = points - np.array([wall.center[0], wall.center[1], scene.ground_z])
        along = np.clip(rel @ tangent, -wall.length / 2.0, wall.length / 2.0)
        up = np.clip(rel[:, 2], 0.0, wall.height)
        nearest = along[:, None] * tangent + np.stack([np.zeros_like(up)] * 2 + [up], axis=1)
        distances.append(np.linalg.norm(rel - nearest, axis=1))
        classes.append(WALL)

    distances = np.stack(distances, axis=1)
    best = np.argmin(distances, axis=1)
    labels = np.array(classes, dtype=np.int16)[best]
    labels[distances[np.arange(len(points)), best] > radius] = NO_LABEL
    return labels


# ==================== Camera ====================

def camera_rays(K: np.ndarray, T: np.ndarray, image_size: Tuple[int, int]):
    """Per-pixel unit rays (LiDAR frame) through pixel centers, the camera center,
    and the camera-frame z component of each unit ray."""
    height, width = image_size
    v, u = np.meshgrid(np.arange(height) + 0.5, np.arange(width) + 0.5, indexing="ij")
    pix = np.stack([u.ravel(), v.ravel(), np.ones(u.size)], axis=1)
    d_cam = pix @ np.linalg.inv(K[:, :3]).T
    d_cam /= np.linalg.norm(d_cam, axis=1, keepdims=True)

    R, t = T[:3, :3], T[:3, 3]
    R_inv = np.linalg.inv(R)
    origin = -R_inv @ t
    dirs = d_cam @ R_inv.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return dirs, origin, d_cam[:, 2]


def rasterize_view(scene: SceneSpec, K: np.ndarray, T: np.ndarray, image_size: Tuple[int, int],
                   weather: str = "clean", weather_config: WeatherConfig = WeatherConfig(),
                   seed: Optional[int] = None, name: str = "front",
                   ) -> Tuple[CameraView, np.ndarray, np.ndarray]:
    """Z-buffered render -> (view, sem_map, depth_map).

    sem_map (uint8, SKY where nothing is hit) and depth_map (camera-frame z,
    inf for sky) come from the same hits as the image and never depend on
    the weather.
    """
    if weather not in WEATHERS:
        raise SceneError(f"Unknown weather {weather!r}")
    K = np.asarray(K, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    height, width = image_size

    dirs, origin, z_scale = camera_rays(K, T, image_size)
    hits = intersect_rays(scene, np.broadcast_to(origin, dirs.shape), dirs)
    missed = ~np.isfinite(hits.distance)

    shade = 0.45 + 0.55 * np.abs(hits.normal @ SUN)
    image = hits.albedo * shade[:, None]
    image[missed] = SKY_COLOR

    sem_map = np.where(missed, SKY, hits.labels).astype(np.uint8).reshape(height, width)
    depth_map = np.where(missed, np.inf, hits.distance * z_scale).astype(np.float32).reshape(height, width)

    image = _apply_camera_weather(image, hits.distance, weather, weather_config,
                                  _rng(scene.seed if seed is None else seed, _CAMERA, _name_stream(name)))
    image = np.clip(image, 0.0, 1.0).reshape(height, width, 3).astype(np.float32)
    return CameraView(image, K, T, name), sem_map, depth_map


def _name_stream(name: str) -> int:
    return sum((i + 1) * ord(ch) for i, ch in enumerate(name))


def _apply_camera_weather(image: np.ndarray, distance: np.ndarray, weather: str,
                          cfg: WeatherConfig, rng: np.random.Generator) -> np.ndarray:
    if weather == "night":
        return image * cfg.night_gain + rng.normal(0.0, cfg.night_noise, size=image.shape)
    if weather == "fog":
        # Koschmieder: blend toward airlight with the LiDAR fog coefficient
        transmission = np.exp(-cfg.fog_beta * distance)
        return image * transmission[:, None] + AIRLIGHT * (1.0 - transmission[:, None])
    if weather == "snow":
        flakes = rng.random(len(image)) < cfg.snow_rate * 4
        image = image.copy()
        image[flakes] = rng.uniform(0.85, 1.0, size=(int(flakes.sum()), 1))
        return image
    return image


# ==================== Weather Corruption ====================

def fog_survival(depth: np.ndarray, beta: float, rng: np.random.Generator) -> np.ndarray:
    """Beer-Lambert dropout: a return at depth d survives with probability exp(-beta d)"""
    return rng.random(np.shape(depth)) < np.exp(-beta * np.asarray(depth))


@dataclass
class PairedSample:
    cloud: PointCloud
    range_image: RangeImage
    views: List[CameraView]
    sem_maps: List[np.ndarray]
    depth_maps: List[np.ndarray]
    weather: str = "clean"
    seed: int = 0


def _directions(points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    depth = np.linalg.norm(points, axis=1)
    return points / np.maximum(depth, 1e-300)[:, None], depth


def corrupt_lidar(sample: PairedSample, weather: str,
                  weather_config: WeatherConfig = WeatherConfig(),
                  seed: Optional[int] = None) -> PairedSample:
    """LiDAR-side weather; camera views and reference maps pass through untouched."""
    if weather not in ("fog", "snow"):
        raise SceneError(f"corrupt_lidar applies to fog or snow, not {weather!r}")

    cfg = weather_config
    sensor = sample.range_image.sensor
    rng = _rng(sample.seed if seed is None else seed, _LIDAR_WEATHER)
    cloud = sample.cloud
    labels = cloud.labels if cloud.labels is not None else np.full(len(cloud), NO_LABEL, np.int16)

    if weather == "fog":
        dirs, depth = _directions(cloud.points)
        keep = fog_survival(depth, cfg.fog_beta, rng)
        attenuation = np.exp(-cfg.fog_beta * depth[keep]).astype(np.float32)

        dropped = np.flatnonzero(~keep)
        scatter = dropped[rng.random(len(dropped)) < cfg.fog_scatter_fraction]
        scatter_depth = rng.uniform(sensor.d_min, min(cfg.fog_scatter_max, sensor.d_max), size=len(scatter))

        points = np.concatenate([cloud.points[keep], dirs[scatter] * scatter_depth[:, None]])
        intensity = np.concatenate([cloud.intensity[keep] * attenuation,
                                    rng.uniform(0.0, 0.1, size=len(scatter)).astype(np.float32)])
        new_labels = np.concatenate([labels[keep], np.full(len(scatter), NO_LABEL, np.int16)])
    else:
        flakes = rng.random((sensor.h, sensor.w)) < cfg.snow_rate
        u, v, _ = pixel_coordinates(cloud.points, sensor)
        cols = np.clip(np.floor(u), 0, sensor.w - 1).astype(np.int64)
        rows = np.clip(np.floor(v), 0, sensor.h - 1).astype(np.int64)
        keep = ~flakes[rows, cols]

        flake_rows, flake_cols = np.nonzero(flakes)
        flake_depth = rng.uniform(sensor.d_min, min(cfg.snow_max, sensor.d_max), size=len(flake_rows))
        flake_points = ray_grid(sensor)[flake_rows, flake_cols] * flake_depth[:, None]

        points = np.concatenate([cloud.points[keep], flake_points])
        intensity = np.concatenate([cloud.intensity[keep],
                                    rng.uniform(0.5, 1.0, size=len(flake_rows)).astype(np.float32)])
        new_labels = np.concatenate([labels[keep], np.full(len(flake_rows), CLUTTER, np.int16)])

    corrupted = PointCloud(points, intensity, new_labels if cloud.labels is not None else None)
    return replace(sample, cloud=corrupted, range_image=project_points(corrupted, sensor), weather=weather)


# ==================== Paired Samples ====================

def choose_weather(seed: int, mix: dict) -> str:
    tags = sorted(mix)
    probs = np.array([mix[t] for t in tags], dtype=np.float64)
    return tags[int(_rng(seed, _WEATHER_CHOICE).choice(len(tags), p=probs / probs.sum()))]


def generate_sample(seed: int, config: RunConfig = RunConfig(),
                    weather: Optional[str] = None) -> PairedSample:
    """Scene -> LiDAR scan + one rendered view per rig camera (+ weather)."""
    if weather is None:
        weather = choose_weather(seed, config.weather.mix)
    scene = sample_scene(seed, config.scene)
    cloud, range_image = raycast_lidar(scene, config.sensor)

    views, sem_maps, depth_maps = [], [], []
    for cam in config.cameras:
        view, sem, depth = rasterize_view(scene, cam.K_matrix, cam.T_matrix, (cam.height, cam.width),
                                          weather, config.weather, seed, cam.name)
        views.append(view)
        sem_maps.append(sem)
        depth_maps.append(depth)

    sample = PairedSample(cloud, range_image, views, sem_maps, depth_maps, "clean", int(seed))
    if weather in ("fog", "snow"):
        sample = corrupt_lidar(sample, weather, config.weather)
    return replace(sample, weather=weather)
