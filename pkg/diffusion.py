#!/usr/bin/env python3
"""
Conditional DDPM Process
------------------------
Schedule, range-image normalization, forward noising, checkpoints and
ancestral sampling for the panoramic denoiser.

Conventions:
- Timesteps run over t = 1..T; alpha_bar(0) = 1
- Depth is normalized as log(1 + d) / log(1 + d_max) mapped to [-1, 1];
  no-return pixels are trained as -1 and decoded below a threshold (-0.95)
- Sampling with fewer steps than T respaces the trained schedule
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from config import RunConfig, ScheduleConfig, config_hash, config_to_json
from denoiser import Conditioning, VeilaModel
from rangeview import CameraView, RangeImage, SensorSpec
from tensor_io import ContainerError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "veila-checkpoint"
CHECKPOINT_VERSION = 1


# ==================== Noise Schedule ====================

class DiffusionSchedule:
    """Gaussian diffusion coefficients (float64) for timesteps 1..T."""

    def __init__(self, betas: Sequence[float], strict: bool = True):
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or len(betas) < 1:
            raise ValueError("betas must be a non-empty 1-D sequence")
        if not (np.all(betas > 0) and np.all(betas < 1)):
            raise ValueError("betas must lie in (0, 1)")
        if strict and np.any(np.diff(betas) < 0):
            raise ValueError("betas must be non-decreasing")

        self.betas = betas
        self.timesteps = len(betas)
        self.alphas = 1.0 - betas
        self.alpha_bars = np.cumprod(self.alphas)
        self.alpha_bars_prev = np.append(1.0, self.alpha_bars[:-1])
        if strict and self.alpha_bars[-1] >= 0.01:
            logger.warning("alpha_bar_T = %.4f; samples will not start from near-pure noise", self.alpha_bars[-1])

        self.sqrt_alpha_bars = np.sqrt(self.alpha_bars)
        self.sqrt_one_minus_alpha_bars = np.sqrt(1.0 - self.alpha_bars)
        self.sqrt_recip_alpha_bars = np.sqrt(1.0 / self.alpha_bars)
        self.sqrt_recipm1_alpha_bars = np.sqrt(1.0 / self.alpha_bars - 1.0)

        # posterior q(x_{t-1} | x_t, x_0)
        self.posterior_variance = betas * (1.0 - self.alpha_bars_prev) / (1.0 - self.alpha_bars)
        self.posterior_mean_coef1 = betas * np.sqrt(self.alpha_bars_prev) / (1.0 - self.alpha_bars)
        self.posterior_mean_coef2 = (1.0 - self.alpha_bars_prev) * np.sqrt(self.alphas) / (1.0 - self.alpha_bars)

    @classmethod
    def linear(cls, timesteps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> "DiffusionSchedule":
        return cls(np.linspace(beta_start, beta_end, timesteps, dtype=np.float64))

    @classmethod
    def from_config(cls, config: ScheduleConfig) -> "DiffusionSchedule":
        return cls.linear(config.timesteps, config.beta_start, config.beta_end)

    def alpha_bar(self, t: int) -> float:
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def respaced(self, steps: int) -> Tuple["DiffusionSchedule", np.ndarray]:
        """Schedule over `steps` evenly spaced trained timesteps.

        Returns (schedule, timesteps); step i of the new schedule corresponds
        to trained timestep timesteps[i].
        """
        if not 1 <= steps <= self.timesteps:
            raise ValueError(f"steps must be in [1, {self.timesteps}], got {steps}")
        if steps == self.timesteps:
            return self, np.arange(1, self.timesteps + 1)
        kept = np.unique(np.round(np.linspace(1, self.timesteps, steps)).astype(np.int64))
        bars = self.alpha_bars[kept - 1]
        prev = np.append(1.0, bars[:-1])
        # rounding can make the respaced betas locally non-monotone
        return DiffusionSchedule(1.0 - bars / prev, strict=False), kept

    def extract(self, values: np.ndarray, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        """values[t - 1] per batch item, shaped [B, 1, 1, 1] like `like`"""
        out = torch.as_tensor(values, dtype=like.dtype, device=like.device)[t.long() - 1]
        return out.reshape(-1, *([1] * (like.dim() - 1)))


def forward_noise(schedule: DiffusionSchedule, x0: torch.Tensor, t: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    """X_t = sqrt(alpha_bar_t) X_0 + sqrt(1 - alpha_bar_t) eps"""
    t = torch.as_tensor(t, device=x0.device).reshape(-1)
    if t.numel() and (int(t.min()) < 1 or int(t.max()) > schedule.timesteps):
        raise ValueError(f"t must be in [1, {schedule.timesteps}]")
    return (schedule.extract(schedule.sqrt_alpha_bars, t, x0) * x0
            + schedule.extract(schedule.sqrt_one_minus_alpha_bars, t, x0) * noise)


# ==================== Normalization ====================

class RangeNormalizer:
    """(depth, intensity) <-> [-1, 1] channels"""

    def __init__(self, sensor: SensorSpec, depth_norm: str = "log",
                 intensity_range: Tuple[float, float] = (0.0, 1.0), threshold: float = -0.95):
        if depth_norm not in ("log", "linear"):
            raise ValueError(f"Unknown depth normalization {depth_norm!r}")
        self.sensor = sensor
        self.depth_norm = depth_norm
        self.intensity_range = intensity_range
        self.threshold = threshold

    def _depth_to_unit(self, depth: np.ndarray) -> np.ndarray:
        if self.depth_norm == "log":
            return np.log1p(depth) / np.log1p(self.sensor.d_max)
        return depth / self.sensor.d_max

    def _unit_to_depth(self, unit: np.ndarray) -> np.ndarray:
        if self.depth_norm == "log":
            return np.expm1(unit * np.log1p(self.sensor.d_max))
        return unit * self.sensor.d_max

    def encode(self, range_image: RangeImage) -> np.ndarray:
        """[2, h, w] float32; no-return pixels map to -1 in both channels"""
        valid = range_image.depth > 0
        depth = np.where(valid, self._depth_to_unit(range_image.depth.astype(np.float64)) * 2.0 - 1.0, -1.0)
        lo, hi = self.intensity_range
        intensity = np.where(valid, (range_image.intensity - lo) / (hi - lo) * 2.0 - 1.0, -1.0)
        return np.stack([depth, intensity]).astype(np.float32)

    def decode(self, x: Union[np.ndarray, torch.Tensor]) -> RangeImage:
        if isinstance(x, torch.Tensor):
            x = x.detach().cpu().numpy()
        x = np.nan_to_num(np.asarray(x, dtype=np.float64), nan=-1.0)
        unit = (np.clip(x[0], -1.0, 1.0) + 1.0) / 2.0
        depth = np.clip(self._unit_to_depth(unit), 0.0, self.sensor.d_max)
        returned = (x[0] > self.threshold) & (depth >= self.sensor.d_min)
        depth = np.where(returned, depth, 0.0)

        lo, hi = self.intensity_range
        intensity = lo + (np.clip(x[1], -1.0, 1.0) + 1.0) / 2.0 * (hi - lo)
        intensity = np.where(returned, intensity, 0.0)
        return RangeImage(depth.astype(np.float32), intensity.astype(np.float32), self.sensor)


# ==================== Checkpoints ====================

@dataclass
class Checkpoint:
    config: RunConfig
    model: VeilaModel
    schedule: DiffusionSchedule
    step: int
    dataset_hash: str
    optimizer_state: Optional[Dict[str, Any]] = None
    rng_state: Optional[torch.Tensor] = None

    @property
    def normalizer(self) -> RangeNormalizer:
        den = self.config.denoiser
        return RangeNormalizer(self.config.sensor, den.depth_norm, den.intensity_range,
                               self.config.sampling.no_return_threshold)


def build_model(config: RunConfig, float64: bool = False) -> VeilaModel:
    model = VeilaModel(config.sensor, config.denoiser, config.alignment, config.encoders,
                       rig=[cam.name for cam in config.cameras])
    return model.double() if float64 else model


def save_checkpoint(path: Path, config: RunConfig, model: VeilaModel, schedule: DiffusionSchedule,
                    step: int, dataset_hash: str, optimizer_state: Optional[Dict[str, Any]] = None,
                    rng_state: Optional[torch.Tensor] = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": json.loads(config_to_json(config)),
        "config_hash": config_hash(config),
        "dataset_hash": dataset_hash,
        "step": int(step),
        "betas": schedule.betas.tolist(),
        "float64": next(model.parameters()).dtype == torch.float64,
        "model": model.state_dict(),
        "optimizer": optimizer_state,
        "rng_state": rng_state,
    }
    tmp = Path(path).with_suffix(".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: Path, device: str = "cpu") -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    payload = torch.load(path, map_location=device, weights_only=True)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ContainerError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ContainerError(f"{path}: unsupported checkpoint version {payload.get('version')}")

    config = RunConfig.from_dict(payload["config"])
    model = build_model(config, payload["float64"]).to(device)
    model.load_state_dict(payload["model"])
    return Checkpoint(config, model, DiffusionSchedule(payload["betas"]), payload["step"],
                      payload["dataset_hash"], payload["optimizer"], payload["rng_state"])


# ==================== Ancestral Sampling ====================

@torch.no_grad()
def ancestral_sample(model: VeilaModel, schedule: DiffusionSchedule, shape: Tuple[int, ...],
                     conditioning: Optional[Conditioning], seed: int, steps: Optional[int] = None) -> torch.Tensor:
    """DDPM ancestral sampling from standard normal noise; x_0 estimates clipped to [-1, 1]."""
    param = next(model.parameters())
    generator = torch.Generator().manual_seed(int(seed))
    sched, times = schedule.respaced(steps or schedule.timesteps)

    x = torch.randn(shape, generator=generator, dtype=torch.float64).to(device=param.device, dtype=param.dtype)
    for i in reversed(range(len(times))):
        t_model = torch.full((shape[0],), int(times[i]), dtype=torch.long, device=param.device)
        t_sched = torch.full((shape[0],), i + 1, dtype=torch.long, device=param.device)
        eps = model(x, t_model, conditioning)

        x0 = (sched.extract(sched.sqrt_recip_alpha_bars, t_sched, x) * x
              - sched.extract(sched.sqrt_recipm1_alpha_bars, t_sched, x) * eps).clamp(-1.0, 1.0)
        mean = (sched.extract(sched.posterior_mean_coef1, t_sched, x) * x0
                + sched.extract(sched.posterior_mean_coef2, t_sched, x) * x)
        if i > 0:
            noise = torch.randn(shape, generator=generator, dtype=torch.float64).to(x)
            x = mean + sched.extract(np.sqrt(sched.posterior_variance), t_sched, x) * noise
        else:
            x = mean
    return x


def sample(checkpoint: Union[Checkpoint, Path], views: Sequence[Sequence[CameraView]],
           steps: Optional[int] = None, seed: int = 0, count: Optional[int] = None) -> List[RangeImage]:
    """Generate one range image per conditioning item (or `count` unconditional ones)."""
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = load_checkpoint(checkpoint)
    model = checkpoint.model.eval()
    sensor = checkpoint.config.sensor

    if steps is not None and steps > checkpoint.schedule.timesteps:
        raise ValueError(f"steps ({steps}) exceeds the trained schedule ({checkpoint.schedule.timesteps})")
    if model.conditional:
        model.check_views(views)
    batch = len(views) if views else (count or 1)

    conditioning = model.condition(views) if model.conditional else None
    x = ancestral_sample(model, checkpoint.schedule, (batch, 2, sensor.h, sensor.w), conditioning, seed, steps)
    normalizer = checkpoint.normalizer
    return [normalizer.decode(item) for item in x]
