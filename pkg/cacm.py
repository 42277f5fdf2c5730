#!/usr/bin/env python3
"""
Confidence-Aware Conditioning
-----------------------------
Fuses the semantic and depth pyramids of one view into a single
conditioning pyramid:

1. Depth level resampled to the semantic level's size (bilinear,
   align_corners=False), then each branch 1x1-projected to a shared width
2. Per-branch confidence c = sigmoid(conv3x3(.)) per level
3. F = (c_s * F_s + c_d * F_d) / (c_s + c_d + delta)

Ablation modes replace step 2-3: semantic-only, depth-only, or plain
concatenation followed by a 1x1 projection.
"""

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import torch
from torch import nn
from torch.nn import functional as F

from config import CONDITIONING_MODES
from encoders import PYRAMID_LEVELS, ConditioningError, FeaturePyramid

DEFAULT_DELTA = 1e-6


@dataclass
class ConfidenceMaps:
    """Per-level [B, 1, H_i, W_i] sigmoid confidences"""
    c_s: List[torch.Tensor]
    c_d: List[torch.Tensor]


def resize_bilinear(x: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
    """Half-pixel (align_corners=False) bilinear resampling; identity at equal size"""
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def fuse_level(f_s: torch.Tensor, f_d: torch.Tensor, c_s: torch.Tensor, c_d: torch.Tensor,
               delta: float = DEFAULT_DELTA) -> torch.Tensor:
    """Normalized confidence weighting; single-channel confidences broadcast over channels."""
    if delta < 0:
        raise ConditioningError(f"delta must be non-negative, got {delta}")
    return (c_s * f_s + c_d * f_d) / (c_s + c_d + delta)


def fuse(shared_s: Sequence[torch.Tensor], shared_d: Sequence[torch.Tensor],
         conf: ConfidenceMaps, delta: float = DEFAULT_DELTA) -> List[torch.Tensor]:
    if len(shared_s) != len(shared_d):
        raise ConditioningError("Semantic and depth pyramids have different level counts")
    return [fuse_level(fs, fd, cs, cd, delta)
            for fs, fd, cs, cd in zip(shared_s, shared_d, conf.c_s, conf.c_d)]


class CACM(nn.Module):
    def __init__(self, semantic_widths: Sequence[int], depth_widths: Sequence[int],
                 shared_widths: Sequence[int], mode: str = "cacm", delta: float = DEFAULT_DELTA):
        super().__init__()
        if mode not in CONDITIONING_MODES:
            raise ConditioningError(f"Unknown conditioning mode {mode!r}")
        if not len(semantic_widths) == len(depth_widths) == len(shared_widths) == PYRAMID_LEVELS:
            raise ConditioningError("CACM needs widths for exactly 4 levels per branch")
        self.mode = mode
        self.delta = delta
        self.shared_widths = tuple(shared_widths)

        use_s = mode in ("cacm", "semantic", "concat")
        use_d = mode in ("cacm", "depth", "concat")
        self.proj_s = nn.ModuleList(nn.Conv2d(ds, d, 1) for ds, d in zip(semantic_widths, shared_widths)) if use_s else None
        self.proj_d = nn.ModuleList(nn.Conv2d(dd, d, 1) for dd, d in zip(depth_widths, shared_widths)) if use_d else None

        self.conf_s = self.conf_d = self.mix = None
        if mode == "cacm":
            self.conf_s = nn.ModuleList(nn.Conv2d(d, 1, 3, padding=1) for d in shared_widths)
            self.conf_d = nn.ModuleList(nn.Conv2d(d, 1, 3, padding=1) for d in shared_widths)
        elif mode == "concat":
            self.mix = nn.ModuleList(nn.Conv2d(2 * d, d, 1) for d in shared_widths)

    def project_to_shared(self, pyr_s: FeaturePyramid, pyr_d: FeaturePyramid
                          ) -> Tuple[List[torch.Tensor], List[torch.Tensor]]:
        """Depth levels resized to the semantic sizes, then both branches 1x1-projected."""
        if len(pyr_s.levels) != len(pyr_d.levels):
            raise ConditioningError("Semantic and depth pyramids have different level counts")
        shared_s, shared_d = [], []
        for i, (f_s, f_d) in enumerate(zip(pyr_s.levels, pyr_d.levels)):
            f_d = resize_bilinear(f_d, tuple(f_s.shape[-2:]))
            shared_s.append(self.proj_s[i](f_s) if self.proj_s is not None else None)
            shared_d.append(self.proj_d[i](f_d) if self.proj_d is not None else None)
        return shared_s, shared_d

    def estimate_confidence(self, shared_s: Sequence[torch.Tensor],
                            shared_d: Sequence[torch.Tensor]) -> ConfidenceMaps:
        if self.conf_s is None:
            raise ConditioningError(f"Mode {self.mode!r} has no confidence estimators")
        return ConfidenceMaps(
            [torch.sigmoid(conv(x)) for conv, x in zip(self.conf_s, shared_s)],
            [torch.sigmoid(conv(x)) for conv, x in zip(self.conf_d, shared_d)],
        )

    def forward(self, pyr_s: FeaturePyramid, pyr_d: FeaturePyramid) -> FeaturePyramid:
        shared_s, shared_d = self.project_to_shared(pyr_s, pyr_d)
        if self.mode == "cacm":
            levels = fuse(shared_s, shared_d, self.estimate_confidence(shared_s, shared_d), self.delta)
        elif self.mode == "concat":
            levels = [mix(torch.cat([fs, fd], dim=1)) for mix, fs, fd in zip(self.mix, shared_s, shared_d)]
        elif self.mode == "semantic":
            levels = shared_s
        else:
            levels = shared_d
        return FeaturePyramid(levels, pyr_s.view)
