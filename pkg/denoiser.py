#!/usr/bin/env python3
"""
Panoramic Conditional Denoiser
------------------------------
The noise-prediction network eps(X_t, views, t):

- 4-scale UNet whose convolutions wrap around in azimuth (column 0 and
  column w-1 are neighbours) and zero-pad in elevation
- Sinusoidal time embedding added in every residual block
- Global self-attention at the bottleneck (panoramic feature coherence),
  output projection zero-initialized
- Camera conditioning: frozen encoders -> CACM fusion -> GCMA injection at
  the configured scales (scale i pairs with pyramid level i)

With no GCMA scales the model carries no conditioning modules at all, so
its trainable parameters are exactly those of the plain backbone.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import torch
from torch import nn
from torch.nn import functional as F

from cacm import CACM
from config import AlignmentParams, DenoiserConfig, EncoderConfig
from encoders import ConditioningError, FeaturePyramid, build_encoders, images_to_tensor
from gcma import GCMABlock, ScaleTokens, gather_tokens, view_grids, zero_module
from rangeview import CameraView, SensorSpec

logger = logging.getLogger(__name__)

NUM_SCALES = 4
RANGE_CHANNELS = 2

InjectFn = Callable[[int, torch.Tensor], torch.Tensor]


def group_count(channels: int, groups: int = 8) -> int:
    return math.gcd(channels, groups)


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64, device=t.device) / max(half - 1, 1))
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


# ==================== Building Blocks ====================

class CircularConv2d(nn.Conv2d):
    """3x3 conv padded circularly along width and with zeros along height."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1):
        super().__init__(in_channels, out_channels, kernel_size, stride=stride, padding=0)
        self.pad = kernel_size // 2

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.pad:
            x = F.pad(x, (self.pad, self.pad, 0, 0), mode="circular")
            x = F.pad(x, (0, 0, self.pad, self.pad))
        return super().forward(x)


class TimeEmbedding(nn.Module):
    def __init__(self, base: int, dim: int):
        super().__init__()
        self.base = base
        self.linear_1 = nn.Linear(base, dim)
        self.linear_2 = nn.Linear(dim, dim)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        x = sinusoidal_embedding(t, self.base).to(self.linear_1.weight.dtype)
        return self.linear_2(F.silu(self.linear_1(x)))


class ResBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, time_dim: int, groups: int = 8):
        super().__init__()
        self.norm_1 = nn.GroupNorm(group_count(in_channels, groups), in_channels)
        self.conv_1 = CircularConv2d(in_channels, out_channels)
        self.time = nn.Linear(time_dim, out_channels)
        self.norm_2 = nn.GroupNorm(group_count(out_channels, groups), out_channels)
        self.conv_2 = CircularConv2d(out_channels, out_channels)
        if in_channels == out_channels:
            self.skip = nn.Identity()
        else:
            self.skip = nn.Conv2d(in_channels, out_channels, kernel_size=1)

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv_1(F.silu(self.norm_1(x)))
        h = h + self.time(F.silu(temb))[:, :, None, None]
        h = self.conv_2(F.silu(self.norm_2(h)))
        return h + self.skip(x)


class PanoramicCoherence(nn.Module):
    """Global multi-head self-attention over all bottleneck positions, residual.

    The output projection starts at zero, so the block is the identity at
    initialization.
    """

    def __init__(self, width: int, heads: int = 4, groups: int = 8):
        super().__init__()
        if width % heads:
            raise ValueError(f"width {width} is not divisible by {heads} heads")
        self.heads = heads
        self.norm = nn.GroupNorm(group_count(width, groups), width)
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = zero_module(nn.Linear(width, width))

    def attention(self, x: torch.Tensor):
        b, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)  # [B, hw, C]
        q, k, v = self.qkv(tokens).chunk(3, dim=-1)
        head_dim = c // self.heads
        q, k, v = (z.reshape(b, h * w, self.heads, head_dim).transpose(1, 2) for z in (q, k, v))
        weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(head_dim), dim=-1)
        return weights, v

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        weights, v = self.attention(x)
        out = (weights @ v).transpose(1, 2).reshape(b, h * w, c)
        return x + self.proj(out).transpose(1, 2).reshape(b, c, h, w)


def pfc_bottleneck(features: torch.Tensor, block: PanoramicCoherence) -> torch.Tensor:
    return block(features)


# ==================== Backbone ====================

class PanoramicUNet(nn.Module):
    """Circular 4-scale UNet; `inject(scale, features)` hooks into the encoder path."""

    def __init__(self, config: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        widths = config.widths
        groups = config.norm_groups
        time_dim = 4 * config.base_width
        self.widths = widths
        self.time_embedding = TimeEmbedding(config.base_width, time_dim)
        self.input = CircularConv2d(RANGE_CHANNELS, widths[0])

        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = widths[0]
        for i, width in enumerate(widths):
            self.down.append(ResBlock(prev, width, time_dim, groups))
            if i < NUM_SCALES - 1:
                self.downsample.append(CircularConv2d(width, width, stride=2))
            prev = width

        self.mid_1 = ResBlock(widths[-1], widths[-1], time_dim, groups)
        self.pfc = PanoramicCoherence(widths[-1], config.pfc_heads, groups) if config.pfc else None
        self.mid_2 = ResBlock(widths[-1], widths[-1], time_dim, groups)

        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i in reversed(range(NUM_SCALES)):
            self.up.append(ResBlock(2 * widths[i], widths[i], time_dim, groups))
            if i > 0:
                self.upsample.append(CircularConv2d(widths[i], widths[i - 1]))

        self.out_norm = nn.GroupNorm(group_count(widths[0], groups), widths[0])
        self.output = CircularConv2d(widths[0], RANGE_CHANNELS)

    def forward(self, x: torch.Tensor, t: torch.Tensor, inject: Optional[InjectFn] = None) -> torch.Tensor:
        stride = 2 ** (NUM_SCALES - 1)
        if x.shape[-2] % stride or x.shape[-1] % stride:
            raise ValueError(f"Range image {tuple(x.shape[-2:])} must be divisible by {stride}")
        temb = self.time_embedding(t)

        h = self.input(x)
        skips = []
        for i, block in enumerate(self.down):
            h = block(h, temb)
            if inject is not None:
                h = inject(i, h)
            skips.append(h)
            if i < NUM_SCALES - 1:
                h = self.downsample[i](h)

        h = self.mid_1(h, temb)
        if self.pfc is not None:
            h = pfc_bottleneck(h, self.pfc)
        h = self.mid_2(h, temb)

        for j, block in enumerate(self.up):
            h = block(torch.cat([h, skips.pop()], dim=1), temb)
            if j < NUM_SCALES - 1:
                h = self.upsample[j](F.interpolate(h, scale_factor=2, mode="nearest"))

        return self.output(F.silu(self.out_norm(h)))


# ==================== Conditional Model ====================

@dataclass
class Conditioning:
    """Per-scale camera tokens, computed once per batch of views"""
    tokens: Dict[int, ScaleTokens]

    def unconditioned_fraction(self, scale: int) -> float:
        return float((~self.tokens[scale].conditioned).float().mean())


class VeilaModel(nn.Module):
    def __init__(self, sensor: SensorSpec, config: DenoiserConfig = DenoiserConfig(),
                 alignment: AlignmentParams = AlignmentParams(),
                 encoders: EncoderConfig = EncoderConfig(),
                 rig: Optional[Sequence[str]] = None):
        super().__init__()
        self.sensor = sensor
        self.rig = None if rig is None else tuple(rig)
        self.config = config
        self.alignment = alignment
        self.unet = PanoramicUNet(config)
        widths = config.widths
        self.scales = tuple(sorted(set(config.gcma_scales)))

        self.gcma = nn.ModuleDict({
            str(i): GCMABlock(widths[i], sensor, 2 ** i, alignment) for i in self.scales
        })
        self.semantic_encoder = self.depth_encoder = self.cacm = None
        if self.scales:
            self.semantic_encoder, self.depth_encoder = build_encoders(encoders)
            self.cacm = CACM(encoders.semantic_widths, encoders.depth_widths, widths, config.conditioning)

    @property
    def conditional(self) -> bool:
        return bool(self.scales)

    def check_views(self, views: Sequence[Sequence[CameraView]]) -> None:
        """Every item must carry the trained rig's views, in order"""
        if self.rig is None:
            return
        for item in views:
            names = [v.name for v in item]
            if names != list(self.rig):
                raise ConditioningError(f"Conditioning views {names} do not match the trained rig {list(self.rig)}")

    def condition(self, views: Sequence[Sequence[CameraView]]) -> Optional[Conditioning]:
        """views[b] lists the calibrated views of batch item b."""
        if not self.conditional:
            return None
        if not views or not views[0]:
            raise ConditioningError("Conditioning needs at least one view per batch item")
        n_views = len(views[0])
        if any(len(item) != n_views for item in views):
            raise ConditioningError("Every batch item needs the same number of views")

        param = next(self.cacm.parameters())
        fused: List[FeaturePyramid] = []
        for v in range(n_views):
            images = images_to_tensor([item[v] for item in views]).to(device=param.device, dtype=param.dtype)
            pyr_s = FeaturePyramid(self.semantic_encoder(images), views[0][v].name)
            pyr_d = FeaturePyramid(self.depth_encoder(images), views[0][v].name)
            fused.append(self.cacm(pyr_s, pyr_d))

        image_sizes = [views[0][v].size for v in range(n_views)]
        tokens = {}
        for i in self.scales:
            grids = view_grids(self.sensor, views, self.alignment, 2 ** i)
            tokens[i] = gather_tokens([pyr.levels[i] for pyr in fused], grids, image_sizes,
                                      self.sensor, self.alignment)
        return Conditioning(tokens)

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, conditioning: Optional[Conditioning] = None) -> torch.Tensor:
        if not self.conditional:
            return self.unet(x_t, t)

        def inject(scale: int, h: torch.Tensor) -> torch.Tensor:
            key = str(scale)
            if key not in self.gcma:
                return h
            tokens = None if conditioning is None else conditioning.tokens[scale]
            return self.gcma[key](h, tokens)

        return self.unet(x_t, t, inject)

    def trainable_parameters(self) -> List[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]


def count_trainable(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def denoise_step_predict(model: VeilaModel, x_t: torch.Tensor, views: Sequence[Sequence[CameraView]],
                         t: torch.Tensor) -> torch.Tensor:
    """eps-hat for a batch of noisy range images and their conditioning views"""
    sensor = model.sensor
    if tuple(x_t.shape[-2:]) != (sensor.h, sensor.w):
        raise ConditioningError(f"Range image {tuple(x_t.shape[-2:])} does not match the sensor ({sensor.h}, {sensor.w})")
    if model.conditional:
        if len(views) != x_t.shape[0]:
            raise ConditioningError(f"{len(views)} view sets for a batch of {x_t.shape[0]}")
        model.check_views(views)
    return model(x_t, t, model.condition(views))
