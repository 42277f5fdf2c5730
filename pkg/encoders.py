#!/usr/bin/env python3
"""
Frozen Conditioning Encoders
----------------------------
Semantic (E_s) and depth (E_d) encoders turning each camera view into a
4-level feature pyramid at strides 4, 8, 16 and 32.

The built-in encoders are small GELU CNNs whose weights are fixed by a seed
and never receive gradients. `PyramidAdapter` wraps any external backbone
(e.g. a pretrained network returning multi-scale maps) behind the same
interface.
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from config import EncoderConfig
from rangeview import CameraView

logger = logging.getLogger(__name__)

PYRAMID_LEVELS = 4
MIN_IMAGE_SIZE = 32


class ConditioningError(ValueError):
    """Raised for malformed conditioning inputs (images, pyramids, calibrations)."""


def level_size(size: Tuple[int, int], level: int) -> Tuple[int, int]:
    """Spatial size of pyramid level `level` (0-based) for an H x W image"""
    stride = 2 ** (level + 2)
    return -(-size[0] // stride), -(-size[1] // stride)


@dataclass
class FeaturePyramid:
    """Four [B, D_i, H_i, W_i] maps; level i has stride 2^(i+2)."""
    levels: List[torch.Tensor]
    view: str = "front"

    def __post_init__(self):
        if len(self.levels) != PYRAMID_LEVELS:
            raise ConditioningError(f"A pyramid has exactly {PYRAMID_LEVELS} levels, got {len(self.levels)}")
        for i in range(1, PYRAMID_LEVELS):
            prev, cur = self.levels[i - 1].shape[-2:], self.levels[i].shape[-2:]
            if cur != (-(-prev[0] // 2), -(-prev[1] // 2)):
                raise ConditioningError(f"Level {i} size {tuple(cur)} does not halve {tuple(prev)}")

    @property
    def widths(self) -> Tuple[int, ...]:
        return tuple(level.shape[1] for level in self.levels)

    @property
    def sizes(self) -> List[Tuple[int, int]]:
        return [tuple(level.shape[-2:]) for level in self.levels]


def images_to_tensor(views: Sequence[CameraView]) -> torch.Tensor:
    """[B, 3, H, W] float32 batch from same-sized views"""
    sizes = {v.size for v in views}
    if len(sizes) != 1:
        raise ConditioningError(f"Views in one batch must share a size, got {sorted(sizes)}")
    return torch.from_numpy(np.stack([v.image for v in views])).permute(0, 3, 1, 2).contiguous()


def check_images(images: torch.Tensor) -> None:
    if images.dim() != 4 or images.shape[1] != 3:
        raise ConditioningError(f"Expected [B, 3, H, W] images, got {tuple(images.shape)}")
    height, width = images.shape[-2:]
    if height < MIN_IMAGE_SIZE or width < MIN_IMAGE_SIZE:
        raise ConditioningError(f"Images must be at least {MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE}, got {height}x{width}")


# ==================== Built-in Frozen Encoders ====================

def _conv(in_ch: int, out_ch: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1)


class FrozenPyramidEncoder(nn.Module):
    """Seeded random CNN pyramid; parameters are frozen at construction."""

    def __init__(self, widths: Sequence[int], seed: int):
        super().__init__()
        if len(widths) != PYRAMID_LEVELS:
            raise ConditioningError(f"Need {PYRAMID_LEVELS} widths, got {tuple(widths)}")
        self.widths = tuple(int(w) for w in widths)
        self.seed = int(seed)

        # private RNG stream so building an encoder never disturbs the caller's seed
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.seed)
            self.stem = nn.Sequential(
                _conv(3, self.widths[0], stride=2), nn.GELU(),
                _conv(self.widths[0], self.widths[0], stride=2), nn.GELU(),
                _conv(self.widths[0], self.widths[0]),
            )
            self.stages = nn.ModuleList(
                nn.Sequential(
                    nn.GELU(),
                    _conv(self.widths[i - 1], self.widths[i], stride=2), nn.GELU(),
                    _conv(self.widths[i], self.widths[i]),
                )
                for i in range(1, PYRAMID_LEVELS)
            )
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True) -> "FrozenPyramidEncoder":
        # frozen: always in inference mode
        return super().train(False)

    @torch.no_grad()
    def forward(self, images: torch.Tensor) -> List[torch.Tensor]:
        check_images(images)
        images = images.to(next(self.parameters()).dtype)
        x = self.stem(images)
        levels = [x]
        for stage in self.stages:
            x = stage(x)
            levels.append(x)
        return levels


class PyramidAdapter(nn.Module):
    """Frozen external backbone resampled onto the pyramid grid.

    `backbone` maps [B, 3, H, W] images to a list of feature maps; the last
    four are used, each bilinearly resized to the stride-4..32 sizes of the
    input image.
    """

    def __init__(self, backbone: Callable[[torch.Tensor], Sequence[torch.Tensor]], widths: Sequence[int]):
        super().__init__()
        self.backbone = backbone
        self.widths = tuple(int(w) for w in widths)
        if isinstance(backbone, nn.Module):
            backbone.requires_grad_(False)
            backbone.eval()

    def train(self, mode: bool = True) -> "PyramidAdapter":
        return super().train(False)

    @torch.no_grad()
    def forward(self, images: torch.Tensor) -> List[torch.Tensor]:
        check_images(images)
        features = list(self.backbone(images))[-PYRAMID_LEVELS:]
        if len(features) < PYRAMID_LEVELS:
            raise ConditioningError(f"Backbone returned {len(features)} maps, need {PYRAMID_LEVELS}")

        levels = []
        for i, (feat, width) in enumerate(zip(features, self.widths)):
            if feat.shape[1] != width:
                raise ConditioningError(f"Backbone level {i} has {feat.shape[1]} channels, expected {width}")
            target = level_size(tuple(images.shape[-2:]), i)
            if tuple(feat.shape[-2:]) != target:
                feat = F.interpolate(feat, size=target, mode="bilinear", align_corners=False)
            levels.append(feat)
        return levels


def build_encoders(config: EncoderConfig = EncoderConfig()) -> Tuple[FrozenPyramidEncoder, FrozenPyramidEncoder]:
    """(semantic, depth) encoders with independent seeds"""
    if config.semantic_seed == config.depth_seed:
        logger.warning("Semantic and depth encoders share seed %d", config.semantic_seed)
    return (FrozenPyramidEncoder(config.semantic_widths, config.semantic_seed),
            FrozenPyramidEncoder(config.depth_widths, config.depth_seed))


# ==================== Encoding Entry Points ====================

def _encode(view: CameraView, encoder: nn.Module) -> FeaturePyramid:
    if float(view.image.min(initial=0.0)) < 0.0 or float(view.image.max(initial=0.0)) > 1.0:
        raise ConditioningError(f"View {view.name!r}: image values must lie in [0, 1]")
    return FeaturePyramid(encoder(images_to_tensor([view])), view.name)


def encode_semantic(view: CameraView, encoder: nn.Module) -> FeaturePyramid:
    return _encode(view, encoder)


def encode_depth(view: CameraView, encoder: nn.Module) -> FeaturePyramid:
    return _encode(view, encoder)
