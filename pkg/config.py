#!/usr/bin/env python3

"""
Run configuration
-----------------
Every command reads one RunConfig. Sections are frozen dataclasses that
round-trip through JSON bit-exactly; `config_hash` identifies a resolved
config in manifests, checkpoints and reports.

Set VEILA_DETERMINISTIC=1 to enforce the determinism contract
(deterministic kernels, one thread, float64 training).
"""

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union, get_args, get_origin, get_type_hints

import numpy as np

from rangeview import SensorSpec

DETERMINISTIC_ENV = "VEILA_DETERMINISTIC"

CONDITIONING_MODES = ("cacm", "semantic", "depth", "concat")
WEATHERS = ("clean", "night", "fog", "snow")


def camera_extrinsic(yaw: float = 0.0, forward: float = 0.27, drop: float = 0.08) -> np.ndarray:
    """LiDAR->camera transform for a camera looking along azimuth `yaw`.

    The camera sits `forward` meters ahead of and `drop` meters below the
    LiDAR origin; camera axes are x right, y down, z forward.
    """
    c, s = math.cos(yaw), math.sin(yaw)
    # rows: camera x (right), y (down), z (forward) expressed in LiDAR axes
    R = np.array([
        [s, -c, 0.0],
        [0.0, 0.0, -1.0],
        [c, s, 0.0],
    ])
    center = np.array([forward * c, forward * s, -drop])
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = -R @ center
    return T


def flat_matrix(matrix: np.ndarray) -> Tuple[float, ...]:
    return tuple(float(x) for x in np.asarray(matrix, dtype=np.float64).ravel())


def pinhole_intrinsic(focal: float, width: int, height: int) -> np.ndarray:
    return np.array([
        [focal, 0.0, width / 2.0, 0.0],
        [0.0, focal, height / 2.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
    ])


@dataclass(frozen=True)
class CameraSpec:
    name: str = "front"
    height: int = 96
    width: int = 320
    K: Tuple[float, ...] = flat_matrix(pinhole_intrinsic(160.0, 320, 96))
    T: Tuple[float, ...] = flat_matrix(camera_extrinsic(0.0))

    def __post_init__(self):
        # plain floats keep the config JSON- and weights_only-safe
        object.__setattr__(self, "K", flat_matrix(self.K))
        object.__setattr__(self, "T", flat_matrix(self.T))

    @property
    def K_matrix(self) -> np.ndarray:
        return np.array(self.K, dtype=np.float64).reshape(3, 4)

    @property
    def T_matrix(self) -> np.ndarray:
        return np.array(self.T, dtype=np.float64).reshape(4, 4)


def three_camera_rig() -> Tuple[CameraSpec, ...]:
    """Front, front-left and front-right cameras (55 degrees apart)"""
    yaw = math.radians(55.0)
    return (
        CameraSpec(name="front"),
        CameraSpec(name="front_left", T=flat_matrix(camera_extrinsic(yaw))),
        CameraSpec(name="front_right", T=flat_matrix(camera_extrinsic(-yaw))),
    )


@dataclass(frozen=True)
class SceneConfig:
    min_boxes: int = 2
    max_boxes: int = 12
    max_walls: int = 3
    box_radius: Tuple[float, float] = (4.0, 18.0)
    wall_distance: Tuple[float, float] = (22.0, 32.0)
    sensor_height: float = 1.7


@dataclass(frozen=True)
class WeatherConfig:
    mix: Dict[str, float] = field(default_factory=lambda: {"clean": 1.0})
    fog_beta: float = 0.02
    fog_scatter_fraction: float = 0.02
    fog_scatter_max: float = 15.0
    snow_rate: float = 0.01
    snow_max: float = 8.0
    night_gain: float = 0.25
    night_noise: float = 0.02

    def __post_init__(self):
        unknown = set(self.mix) - set(WEATHERS)
        if unknown:
            raise ValueError(f"Unknown weather tags in mix: {sorted(unknown)}")
        if not math.isclose(sum(self.mix.values()), 1.0, abs_tol=1e-9):
            raise ValueError(f"Weather mix must sum to 1, got {sum(self.mix.values())}")


@dataclass(frozen=True)
class EncoderConfig:
    semantic_widths: Tuple[int, ...] = (32, 64, 96, 128)
    depth_widths: Tuple[int, ...] = (16, 32, 64, 96)
    semantic_seed: int = 11
    depth_seed: int = 23


@dataclass(frozen=True)
class DenoiserConfig:
    base_width: int = 32
    channel_mult: Tuple[int, ...] = (1, 2, 2, 4)
    pfc: bool = True
    pfc_heads: int = 4
    gcma_scales: Tuple[int, ...] = (0, 1, 2, 3)
    conditioning: str = "cacm"
    norm_groups: int = 8
    depth_norm: str = "log"
    intensity_range: Tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if len(self.channel_mult) != 4:
            raise ValueError("The denoiser has exactly 4 scales")
        if any(s not in (0, 1, 2, 3) for s in self.gcma_scales):
            raise ValueError(f"GCMA scales must be in 0..3, got {self.gcma_scales}")
        if self.conditioning not in CONDITIONING_MODES:
            raise ValueError(f"conditioning must be one of {CONDITIONING_MODES}")
        if self.depth_norm not in ("log", "linear"):
            raise ValueError("depth_norm must be 'log' or 'linear'")

    @property
    def widths(self) -> Tuple[int, ...]:
        return tuple(self.base_width * m for m in self.channel_mult)


@dataclass(frozen=True)
class AlignmentParams:
    tau: float = 20.0
    num_samples: int = 16
    fourier_bands: int = 6
    heads: int = 2
    head_dim: Optional[int] = None
    include_input: bool = True
    query_depth: float = 1.0
    depth_bias: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")
        if self.fourier_bands < 1:
            raise ValueError("fourier_bands must be >= 1")
        if self.heads < 1:
            raise ValueError("heads must be >= 1")

    def heads_for(self, width: int) -> int:
        """Head count at a feature width (fixed head_dim wins over fixed heads)"""
        if self.head_dim is not None:
            if width % self.head_dim:
                raise ValueError(f"width {width} is not divisible by head_dim {self.head_dim}")
            return width // self.head_dim
        if width % self.heads:
            raise ValueError(f"width {width} is not divisible by {self.heads} heads")
        return self.heads


@dataclass(frozen=True)
class ScheduleConfig:
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass(frozen=True)
class TrainingConfig:
    steps: int = 20000
    batch_size: int = 8
    lr: float = 2e-4
    grad_clip: float = 1.0
    log_interval: int = 50
    checkpoint_every: int = 1000
    seed: int = 0
    float64: bool = False


@dataclass(frozen=True)
class SamplingConfig:
    steps: Optional[int] = None
    no_return_threshold: float = -0.95
    batch_size: int = 8


@dataclass(frozen=True)
class MetricConfig:
    bev_bins: int = 100
    bev_extent: float = 40.0
    mmd_bandwidth: Optional[float] = None
    mmd_estimator: str = "unbiased"
    frd_seed: int = 7
    fpd_seed: int = 13
    feature_dim: int = 64
    cm_dc_alignment: str = "median"
    cm_sc_erosion: int = 1
    depth_edge_tol: float = 0.25
    occlusion_tol: float = 0.1
    label_radius: float = 0.5
    regions: Tuple[str, ...] = ("full", "front", "rear")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    sensor: SensorSpec = SensorSpec(32, 256, math.radians(10.0), math.radians(30.0), 1.0, 40.0)
    cameras: Tuple[CameraSpec, ...] = (CameraSpec(),)
    scene: SceneConfig = SceneConfig()
    weather: WeatherConfig = WeatherConfig()
    encoders: EncoderConfig = EncoderConfig()
    denoiser: DenoiserConfig = DenoiserConfig()
    alignment: AlignmentParams = AlignmentParams()
    schedule: ScheduleConfig = ScheduleConfig()
    training: TrainingConfig = TrainingConfig()
    sampling: SamplingConfig = SamplingConfig()
    metrics: MetricConfig = MetricConfig()

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        return _build(cls, data)

    def with_overrides(self, **sections: Dict[str, Any]) -> "RunConfig":
        """Copy with selected fields of named sections replaced"""
        updates = {}
        for name, values in sections.items():
            current = getattr(self, name)
            updates[name] = replace(current, **values) if is_dataclass(current) else values
        return replace(self, **updates)


# ==================== Serialization ====================

def _coerce(tp, value):
    if value is None:
        return None
    if is_dataclass(tp):
        return _build(tp, value)

    origin = get_origin(tp)
    args = get_args(tp)
    if origin is Union:
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value)
    if origin is tuple:
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v) for v in value)
        return tuple(_coerce(a, v) for a, v in zip(args, value))
    if origin is dict:
        return {k: _coerce(args[1], v) for k, v in value.items()}
    if tp is float:
        return float(value)
    if tp is int:
        return int(value)
    return value


def _build(cls, data: Dict[str, Any]):
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"Unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**{name: _coerce(hints[name], value) for name, value in data.items()})


def config_to_json(config: RunConfig) -> str:
    return json.dumps(config.to_dict(), sort_keys=True, indent=2)


def config_hash(config: RunConfig) -> str:
    """Generate a content hash of a resolved config"""
    config_str = json.dumps(config.to_dict(), sort_keys=True)
    return hashlib.md5(config_str.encode()).hexdigest()


# Run length and logging cadence may change when a run is extended
RESUMABLE_FIELDS = ("steps", "log_interval", "checkpoint_every")


def resume_hash(config: RunConfig) -> str:
    """Hash of everything a resumed run must share with its checkpoint"""
    data = config.to_dict()
    for name in RESUMABLE_FIELDS:
        data["training"].pop(name)
    return hashlib.md5(json.dumps(data, sort_keys=True).encode()).hexdigest()


def load_config(path: Optional[Path]) -> RunConfig:
    """Read a JSON config; missing keys fall back to defaults"""
    if path is None:
        return RunConfig()
    return RunConfig.from_dict(json.loads(Path(path).read_text()))


def save_config(config: RunConfig, path: Path) -> str:
    """Write the resolved config and return its hash"""
    Path(path).write_text(config_to_json(config) + "\n")
    return config_hash(config)


def deterministic_requested() -> bool:
    return os.environ.get(DETERMINISTIC_ENV, "0") == "1"
