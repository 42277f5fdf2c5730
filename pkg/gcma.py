#!/usr/bin/env python3
"""
Geometric Cross-Modal Alignment
-------------------------------
Brings camera features onto the panoramic range grid:

- Every range pixel's ray is sampled at K log-uniform depths and each
  sample is projected into every conditioning view
- Camera features are read bilinearly at the projections (one token per
  valid sample per view) with depth weights w_k = exp(-d_k / tau) * m_k
- A Fourier-encoded ray query attends over the tokens (keys = values); the
  log depth weights bias the logits, so a zero query returns the
  depth-weighted average of the tokens
- The result enters the denoiser through a zero-initialized 1x1 conv

Rays with no valid sample in any view produce a zero feature and are
flagged as unconditioned.
"""

import functools
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from config import AlignmentParams
from encoders import ConditioningError
from rangeview import CameraView, SensorSpec, pinhole_project, ray_direction, ray_grid


def zero_module(module: nn.Module) -> nn.Module:
    """Zero out the parameters of a module and return it."""
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


def zero_conv(width: int) -> nn.Conv2d:
    return zero_module(nn.Conv2d(width, width, kernel_size=1))


# ==================== Ray Sampling ====================

@dataclass
class RaySamples:
    depths: np.ndarray  # [K] meters, increasing
    points: np.ndarray  # [K, 3] = depths * Ray(u, v)
    proj: np.ndarray    # [K, 2] image pixels (NaN behind the camera)
    mask: np.ndarray    # [K] bool


def depth_bins(sensor: SensorSpec, num_samples: int) -> np.ndarray:
    """Log-uniform bin centers over [d_min, d_max]; K=1 gives sqrt(d_min d_max)."""
    k = np.arange(num_samples, dtype=np.float64)
    return sensor.d_min * (sensor.d_max / sensor.d_min) ** ((k + 0.5) / num_samples)


def sample_ray(u: int, v: int, sensor: SensorSpec, params: AlignmentParams, view: CameraView) -> RaySamples:
    depths = depth_bins(sensor, params.num_samples)
    points = depths[:, None] * ray_direction(u, v, sensor)[None]
    projection = pinhole_project(points, view.K, view.T, view.size)
    return RaySamples(depths, points, np.stack([projection.u, projection.v], axis=1), projection.valid)


@dataclass
class SampleGrid:
    """All ray samples of one range scale projected into one view"""
    proj: np.ndarray   # [K, h, w, 2] image pixels, 0 where invalid
    mask: np.ndarray   # [K, h, w] bool


@functools.lru_cache(maxsize=64)
def _sample_grid(sensor: SensorSpec, stride: int, num_samples: int,
                 K_bytes: bytes, T_bytes: bytes, image_size: Tuple[int, int]) -> SampleGrid:
    K = np.frombuffer(K_bytes, dtype=np.float64).reshape(3, 4)
    T = np.frombuffer(T_bytes, dtype=np.float64).reshape(4, 4)
    rays = ray_grid(sensor, stride)
    depths = depth_bins(sensor, num_samples)
    points = depths[:, None, None, None] * rays[None]
    projection = pinhole_project(points.reshape(-1, 3), K, T, image_size)

    shape = (num_samples,) + rays.shape[:2]
    mask = projection.valid.reshape(shape)
    proj = np.stack([projection.u, projection.v], axis=1).reshape(shape + (2,))
    proj = np.where(mask[..., None], proj, 0.0)
    proj.setflags(write=False)
    mask.setflags(write=False)
    return SampleGrid(proj, mask)


def sample_grid(sensor: SensorSpec, view: CameraView, params: AlignmentParams, stride: int = 1) -> SampleGrid:
    return _sample_grid(sensor, stride, params.num_samples,
                        np.ascontiguousarray(view.K).tobytes(), np.ascontiguousarray(view.T).tobytes(),
                        tuple(view.size))


def depth_weights(depths: np.ndarray, mask: np.ndarray, tau: float) -> np.ndarray:
    """w_k = exp(-d_k / tau) * m_k"""
    return np.exp(-np.asarray(depths) / tau) * np.asarray(mask, dtype=np.float64)


def log_depth_weights(depths: np.ndarray, mask: np.ndarray, tau: float) -> np.ndarray:
    """log w_k, -inf for masked samples; broadcasts depths over the mask's trailing dims"""
    depths = np.asarray(depths, dtype=np.float64).reshape((-1,) + (1,) * (np.ndim(mask) - 1))
    return np.where(mask, -depths / tau, -np.inf)


# ==================== Feature Aggregation ====================

def sample_features(level: torch.Tensor, proj: torch.Tensor, image_size: Tuple[int, int]) -> torch.Tensor:
    """Bilinear read of [B, C, Hf, Wf] features at image-pixel positions [B, N, h, w, 2] -> [B, C, N, h, w]"""
    height, width = image_size
    b, n, h, w, _ = proj.shape
    grid = torch.stack([2.0 * proj[..., 0] / width - 1.0, 2.0 * proj[..., 1] / height - 1.0], dim=-1)
    grid = grid.to(level.dtype).reshape(b, n * h, w, 2)
    sampled = F.grid_sample(level, grid, mode="bilinear", padding_mode="border", align_corners=False)
    return sampled.reshape(b, level.shape[1], n, h, w)


def aggregate_value(samples: RaySamples, feature: torch.Tensor, params: AlignmentParams,
                    image_size: Tuple[int, int]) -> Tuple[torch.Tensor, bool]:
    """Depth-weighted average of a [C, Hf, Wf] feature map along one ray.

    Returns (V, conditioned); a ray with no valid sample gives V = 0 and
    conditioned = False.
    """
    weights = torch.as_tensor(depth_weights(samples.depths, samples.mask, params.tau), dtype=feature.dtype)
    if float(weights.sum()) == 0.0:
        return torch.zeros(feature.shape[0], dtype=feature.dtype), False

    proj = np.where(samples.mask[:, None], samples.proj, 0.0)
    proj = torch.as_tensor(proj, dtype=feature.dtype).reshape(1, -1, 1, 1, 2)
    values = sample_features(feature[None], proj, image_size)[0, :, :, 0, 0]  # [C, K]
    return (values * weights).sum(dim=1) / weights.sum(), True


# ==================== Queries ====================

def fourier_dim(params: AlignmentParams) -> int:
    return 6 * params.fourier_bands + (3 if params.include_input else 0)


def fourier_encode(p: Union[torch.Tensor, np.ndarray], bands: int, include_input: bool = True) -> torch.Tensor:
    """Per coordinate: (sin 2^0 pi p, cos 2^0 pi p, ..., sin 2^(L-1) pi p, cos 2^(L-1) pi p)"""
    p = torch.as_tensor(p)
    if not p.is_floating_point():
        p = p.to(torch.float64)
    freqs = (2.0 ** torch.arange(bands, dtype=p.dtype, device=p.device)) * math.pi
    scaled = p[..., :, None] * freqs
    encoded = torch.stack([torch.sin(scaled), torch.cos(scaled)], dim=-1).flatten(-3)
    if include_input:
        encoded = torch.cat([p, encoded], dim=-1)
    return encoded


class QueryEncoder(nn.Module):
    """Q = R + MLP(gamma(r)); the last MLP layer starts at zero."""

    def __init__(self, width: int, params: AlignmentParams):
        super().__init__()
        self.bands = params.fourier_bands
        self.include_input = params.include_input
        self.mlp = nn.Sequential(
            nn.Linear(fourier_dim(params), width),
            nn.GELU(),
            zero_module(nn.Linear(width, width)),
        )

    def forward(self, level: torch.Tensor, ray_points: torch.Tensor) -> torch.Tensor:
        encoded = fourier_encode(ray_points.to(level.dtype), self.bands, self.include_input)
        return level + self.mlp(encoded).permute(2, 0, 1)[None]


def build_query(level: torch.Tensor, ray_points: torch.Tensor, encoder: QueryEncoder) -> torch.Tensor:
    return encoder(level, ray_points)


# ==================== Cross-Attention and Injection ====================

def cross_attend(query: torch.Tensor, values: torch.Tensor, log_weights: torch.Tensor,
                 heads: int = 1, depth_bias: bool = True) -> Tuple[torch.Tensor, torch.Tensor]:
    """Per-pixel multi-head attention with keys = values.

    query [B, C, h, w], values [B, C, N, h, w], log_weights [B, N, h, w]
    (-inf marks masked tokens). Returns ([B, C, h, w] features,
    [B, h, w] conditioned flags).
    """
    b, c, n, h, w = values.shape
    if c % heads:
        raise ConditioningError(f"{c} channels cannot be split into {heads} heads")
    head_dim = c // heads

    valid = torch.isfinite(log_weights)
    conditioned = valid.any(dim=1)
    bias = log_weights if depth_bias else torch.where(valid, torch.zeros_like(log_weights), log_weights)

    q = query.reshape(b, heads, head_dim, h, w)
    v = values.reshape(b, heads, head_dim, n, h, w)
    logits = torch.einsum("bgdhw,bgdnhw->bgnhw", q, v) / math.sqrt(head_dim) + bias[:, None].to(q.dtype)
    # unconditioned pixels get finite logits; their output is zeroed below
    logits = logits.masked_fill(~conditioned[:, None, None], 0.0)

    acc_dtype = torch.promote_types(logits.dtype, torch.float32)
    attn = torch.softmax(logits.to(acc_dtype), dim=2).to(v.dtype)
    out = torch.einsum("bgnhw,bgdnhw->bgdhw", attn, v).reshape(b, c, h, w)
    return out * conditioned[:, None].to(out.dtype), conditioned


def inject(level: torch.Tensor, aligned: torch.Tensor, conv: nn.Conv2d) -> torch.Tensor:
    return level + conv(aligned)


@dataclass
class ScaleTokens:
    """Camera tokens for one range scale, concatenated over views"""
    values: torch.Tensor       # [B, C, V*K, h, w]
    log_weights: torch.Tensor  # [B, V*K, h, w]

    @property
    def conditioned(self) -> torch.Tensor:
        return torch.isfinite(self.log_weights).any(dim=1)


def gather_tokens(levels: Sequence[torch.Tensor], grids: Sequence[Sequence[SampleGrid]],
                  image_sizes: Sequence[Tuple[int, int]], sensor: SensorSpec,
                  params: AlignmentParams) -> ScaleTokens:
    """levels[v]: [B, C, Hf, Wf] features of view v; grids[b][v]: sample grid of item b, view v."""
    depths = depth_bins(sensor, params.num_samples)
    values, log_weights = [], []
    for v, level in enumerate(levels):
        proj = torch.as_tensor(np.stack([g[v].proj for g in grids]), dtype=level.dtype, device=level.device)
        mask = np.stack([g[v].mask for g in grids])
        values.append(sample_features(level, proj, image_sizes[v]))
        log_w = np.stack([log_depth_weights(depths, m, params.tau) for m in mask])
        log_weights.append(torch.as_tensor(log_w, dtype=level.dtype, device=level.device))
    return ScaleTokens(torch.cat(values, dim=2), torch.cat(log_weights, dim=1))


class GCMABlock(nn.Module):
    """Alignment at one UNet scale: query, attention over camera tokens, zero-conv residual."""

    def __init__(self, width: int, sensor: SensorSpec, stride: int, params: AlignmentParams):
        super().__init__()
        self.heads = params.heads_for(width)
        self.depth_bias = params.depth_bias
        self.query = QueryEncoder(width, params)
        self.zero_conv = zero_conv(width)

        # the ray point at `query_depth` meters, normalized by d_max
        rays = ray_grid(sensor, stride) * (params.query_depth / sensor.d_max)
        self.register_buffer("ray_points", torch.from_numpy(rays).float(), persistent=False)

    def forward(self, level: torch.Tensor, tokens: Optional[ScaleTokens] = None) -> torch.Tensor:
        if tokens is None:
            # no views at all: every pixel is unconditioned
            return inject(level, torch.zeros_like(level), self.zero_conv)
        query = build_query(level, self.ray_points, self.query)
        aligned, _ = cross_attend(query, tokens.values, tokens.log_weights, self.heads, self.depth_bias)
        return inject(level, aligned, self.zero_conv)


def view_grids(sensor: SensorSpec, views: Sequence[Sequence[CameraView]], params: AlignmentParams,
               stride: int) -> List[List[SampleGrid]]:
    """Sample grids per batch item and view; every item must carry the same view names."""
    names = [tuple(v.name for v in item) for item in views]
    if len(set(names)) != 1:
        raise ConditioningError(f"Batch items carry different camera rigs: {sorted(set(names))}")
    return [[sample_grid(sensor, view, params, stride) for view in item] for item in views]
