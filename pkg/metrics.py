#!/usr/bin/env python3
"""
Generation Metrics
------------------
Distribution metrics between two sets of scans and cross-modal metrics
between a scan and its conditioning view.

- JSD: base-2 Jensen-Shannon divergence of the mean BEV occupancy histograms
- MMD: squared MMD with a Gaussian kernel over per-sample BEV histograms
  (unbiased or biased estimator; median-heuristic bandwidth by default)
- FRD / FPD: Frechet distance of Gaussian fits to range-image / point
  features from frozen, seeded extractors
- CM-SC: agreement of projected point labels with the view's segmentation
- CM-DC: scale-aligned AbsRel of projected point depths against the view's
  depth map
- Region protocol: front (p_x > 0) and rear (p_x <= 0) halves
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import polars as pl
import torch
from scipy.spatial.distance import cdist
from scipy.stats import entropy
from torch import nn

from rangeview import NO_LABEL, CameraView, PointCloud, RangeImage, lidar_to_camera, lookup_depth, ray_grid

logger = logging.getLogger(__name__)

MMD_SCALE = 1e4
PSD_TOLERANCE = 1e-8
ALIGNMENTS = ("none", "median", "lstsq")
REGIONS = ("full", "front", "rear")


class MetricError(ValueError):
    """Raised when a metric's preconditions do not hold."""


# ==================== Histograms ====================

@dataclass
class BEVHistogram:
    grid: np.ndarray
    extent: float
    bins: int
    empty: bool = False

    @property
    def mass(self) -> float:
        return float(self.grid.sum())


def bev_histogram(cloud: PointCloud, bins: int = 100, extent: float = 40.0) -> BEVHistogram:
    """Normalized (p_x, p_y) occupancy over [-extent, extent]^2; points outside are dropped."""
    if not extent > 0:
        raise MetricError(f"extent must be positive, got {extent}")
    if bins < 1:
        raise MetricError(f"bins must be positive, got {bins}")
    grid, _, _ = np.histogram2d(cloud.points[:, 0], cloud.points[:, 1], bins=bins,
                                range=[[-extent, extent], [-extent, extent]])
    total = grid.sum()
    if total == 0:
        return BEVHistogram(np.zeros((bins, bins)), extent, bins, empty=True)
    return BEVHistogram(grid / total, extent, bins)


def _histograms(clouds: Sequence[PointCloud], bins: int, extent: float) -> List[BEVHistogram]:
    if len(clouds) == 0:
        raise MetricError("Empty sample set")
    return [bev_histogram(c, bins, extent) for c in clouds]


def jensen_shannon(P: np.ndarray, Q: np.ndarray) -> float:
    """Base-2 JSD between two (unnormalized) distributions"""
    P = np.asarray(P, dtype=np.float64).ravel()
    Q = np.asarray(Q, dtype=np.float64).ravel()
    if np.any(P < 0) or np.any(Q < 0):
        raise MetricError("Negative mass in distribution")
    if P.sum() == 0 or Q.sum() == 0:
        raise MetricError("Distribution has zero total mass")
    P_ = P / P.sum()
    Q_ = Q / Q.sum()

    e1 = entropy(P_, base=2)
    e2 = entropy(Q_, base=2)
    e_sum = entropy((P_ + Q_) / 2.0, base=2)
    res = e_sum - ((e1 + e2) / 2.0)
    return float(min(max(res, 0.0), 1.0))


def jsd(set_a: Sequence[PointCloud], set_b: Sequence[PointCloud], bins: int = 100, extent: float = 40.0) -> float:
    hist_a = _histograms(set_a, bins, extent)
    hist_b = _histograms(set_b, bins, extent)
    if all(h.empty for h in hist_a) or all(h.empty for h in hist_b):
        raise MetricError("JSD is undefined when every cloud of a set is empty")
    return jensen_shannon(np.mean([h.grid for h in hist_a], axis=0),
                          np.mean([h.grid for h in hist_b], axis=0))


# ==================== MMD ====================

def median_bandwidth(X: np.ndarray, Y: np.ndarray) -> float:
    """Median pairwise distance over the pooled samples"""
    Z = np.concatenate([X, Y])
    d = cdist(Z, Z)
    off = d[np.triu_indices(len(Z), k=1)]
    positive = off[off > 0]
    if len(positive) == 0:
        return 1.0
    return float(np.median(positive))


def mmd_features(X: np.ndarray, Y: np.ndarray, bandwidth: Optional[float] = None,
                 estimator: str = "unbiased") -> float:
    """Squared MMD between feature rows with k(x, y) = exp(-|x - y|^2 / (2 sigma^2))"""
    X = np.asarray(X, dtype=np.float64).reshape(len(X), -1)
    Y = np.asarray(Y, dtype=np.float64).reshape(len(Y), -1)
    if len(X) < 2 or len(Y) < 2:
        raise MetricError(f"MMD needs at least 2 samples per set, got {len(X)} and {len(Y)}")
    if estimator not in ("unbiased", "biased"):
        raise MetricError(f"Unknown MMD estimator {estimator!r}")
    sigma = median_bandwidth(X, Y) if bandwidth is None else float(bandwidth)
    if not sigma > 0:
        raise MetricError(f"Kernel bandwidth must be positive, got {sigma}")

    gamma = 1.0 / (2.0 * sigma ** 2)
    Kxx = np.exp(-gamma * cdist(X, X, "sqeuclidean"))
    Kyy = np.exp(-gamma * cdist(Y, Y, "sqeuclidean"))
    Kxy = np.exp(-gamma * cdist(X, Y, "sqeuclidean"))
    m, n = len(X), len(Y)
    if estimator == "biased":
        return float(Kxx.mean() + Kyy.mean() - 2.0 * Kxy.mean())
    xx = (Kxx.sum() - np.trace(Kxx)) / (m * (m - 1))
    yy = (Kyy.sum() - np.trace(Kyy)) / (n * (n - 1))
    return float(xx + yy - 2.0 * Kxy.mean())


def mmd(set_a: Sequence[PointCloud], set_b: Sequence[PointCloud], bandwidth: Optional[float] = None,
        estimator: str = "unbiased", bins: int = 100, extent: float = 40.0) -> float:
    """Squared MMD between per-sample BEV histograms (unscaled; reports multiply by 1e4)"""
    X = np.stack([h.grid.ravel() for h in _histograms(set_a, bins, extent)])
    Y = np.stack([h.grid.ravel() for h in _histograms(set_b, bins, extent)])
    return mmd_features(X, Y, bandwidth, estimator)


# ==================== Frechet Distance ====================

@dataclass
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).ravel()
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if self.cov.shape != (len(self.mean), len(self.mean)):
            raise MetricError(f"Covariance shape {self.cov.shape} does not match mean of size {len(self.mean)}")
        if self.count < 2:
            raise MetricError(f"Feature statistics need at least 2 samples, got {self.count}")

    @classmethod
    def from_features(cls, features: np.ndarray) -> "FeatureStats":
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or len(features) < 2:
            raise MetricError(f"Need an [n >= 2, d] feature matrix, got shape {features.shape}")
        return cls(features.mean(axis=0), np.cov(features, rowvar=False), len(features))


def _psd_sqrt(matrix: np.ndarray, what: str) -> np.ndarray:
    sym = (matrix + matrix.T) / 2.0
    eigvals, eigvecs = np.linalg.eigh(sym)
    tol = PSD_TOLERANCE * max(1.0, float(np.abs(eigvals).max(initial=0.0)))
    if eigvals.min(initial=0.0) < -tol:
        raise MetricError(f"{what} is not positive semidefinite (min eigenvalue {eigvals.min():.3e})")
    return (eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))) @ eigvecs.T


def frechet(stats_a: FeatureStats, stats_b: FeatureStats) -> float:
    """|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))

    The trace of (S_a S_b)^(1/2) is taken from the symmetric product
    S_a^(1/2) S_b S_a^(1/2), which has the same eigenvalues.
    """
    if stats_a.mean.shape != stats_b.mean.shape:
        raise MetricError(f"Feature dimensions differ: {stats_a.mean.shape} vs {stats_b.mean.shape}")
    root_a = _psd_sqrt(stats_a.cov, "Covariance A")
    _psd_sqrt(stats_b.cov, "Covariance B")
    covmean = _psd_sqrt(root_a @ stats_b.cov @ root_a, "Covariance product")

    diff = stats_a.mean - stats_b.mean
    value = diff @ diff + np.trace(stats_a.cov) + np.trace(stats_b.cov) - 2.0 * np.trace(covmean)
    return float(max(value, 0.0))


# ==================== Feature Extractors ====================

class RangeFeatureExtractor(nn.Module):
    """Frozen seeded CNN over (depth / d_max, intensity) range images, global average pooled"""

    def __init__(self, seed: int = 7, feature_dim: int = 64, d_max: float = 40.0):
        super().__init__()
        self.seed = int(seed)
        self.feature_dim = int(feature_dim)
        self.d_max = float(d_max)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.seed)
            self.net = nn.Sequential(
                nn.Conv2d(2, 32, 3, padding=1), nn.GELU(),
                nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.GELU(),
                nn.Conv2d(64, self.feature_dim, 3, stride=2, padding=1), nn.GELU(),
            )
        self.requires_grad_(False)
        self.eval()

    @property
    def name(self) -> str:
        return f"range-cnn(seed={self.seed},dim={self.feature_dim})"

    @torch.no_grad()
    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.net(images).mean(dim=(-2, -1))

    def features(self, range_images: Sequence[RangeImage]) -> np.ndarray:
        x = np.stack([np.stack([r.depth / self.d_max, r.intensity]) for r in range_images]).astype(np.float32)
        return self(torch.from_numpy(x)).double().numpy()


class PointFeatureExtractor(nn.Module):
    """Frozen seeded per-point MLP with max and mean pooling"""

    def __init__(self, seed: int = 13, feature_dim: int = 64, scale: float = 40.0):
        super().__init__()
        if feature_dim % 2:
            raise MetricError(f"feature_dim must be even, got {feature_dim}")
        self.seed = int(seed)
        self.feature_dim = int(feature_dim)
        self.scale = float(scale)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.seed)
            self.mlp = nn.Sequential(
                nn.Linear(4, 64), nn.GELU(),
                nn.Linear(64, 128), nn.GELU(),
                nn.Linear(128, self.feature_dim // 2),
            )
        self.requires_grad_(False)
        self.eval()

    @property
    def name(self) -> str:
        return f"point-mlp(seed={self.seed},dim={self.feature_dim})"

    @torch.no_grad()
    def forward(self, points: torch.Tensor) -> torch.Tensor:
        h = self.mlp(points)
        return torch.cat([h.max(dim=0).values, h.mean(dim=0)])

    def features(self, clouds: Sequence[PointCloud]) -> np.ndarray:
        rows = []
        for cloud in clouds:
            if len(cloud) == 0:
                logger.warning("Empty cloud contributes a zero point feature")
                rows.append(np.zeros(self.feature_dim))
                continue
            x = np.concatenate([cloud.points / self.scale, cloud.intensity[:, None]], axis=1).astype(np.float32)
            rows.append(self(torch.from_numpy(x)).double().numpy())
        return np.stack(rows)


def extract_features(samples: Sequence, extractor) -> FeatureStats:
    """FeatureStats of a sample set under `extractor` (range images or clouds, matching the extractor)"""
    if len(samples) < 2:
        raise MetricError(f"Feature statistics need at least 2 samples, got {len(samples)}")
    return FeatureStats.from_features(extractor.features(samples))


# ==================== Cross-Modal Consistency ====================

@dataclass
class CrossModalScore:
    """A per-view cross-modal score; `defined` is False when no point could be evaluated."""
    value: float
    valid: int
    ignored: int = 0
    excluded: int = 0
    miou: float = float("nan")

    @property
    def defined(self) -> bool:
        return self.valid > 0 and math.isfinite(self.value)


def boundary_mask(sem_map: np.ndarray, radius: int = 1) -> np.ndarray:
    """Pixels within `radius` of a label change"""
    sem = np.asarray(sem_map)
    boundary = np.zeros(sem.shape, dtype=bool)
    if radius <= 0:
        return boundary
    pad = np.pad(sem, radius, mode="edge")
    height, width = sem.shape
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            shifted = pad[radius + dy:radius + dy + height, radius + dx:radius + dx + width]
            boundary |= shifted != sem
    return boundary


def mean_iou(pred: np.ndarray, ref: np.ndarray, classes: Sequence[int]) -> float:
    ious = []
    for cls in classes:
        union = np.sum((pred == cls) | (ref == cls))
        if union:
            ious.append(np.sum((pred == cls) & (ref == cls)) / union)
    return float(np.mean(ious)) if ious else float("nan")


def visible_to_camera(z_cam: np.ndarray, ref: np.ndarray, occlusion_tol: float = 0.1,
                      alignment: str = "median") -> np.ndarray:
    """Points not hidden behind the surface the camera sees.

    A LiDAR return can land behind a near object from the camera's viewpoint
    (the two sensors sit apart). After scale alignment such points lie more
    than `occlusion_tol` (relative) beyond the reference depth.
    """
    z_cam = np.asarray(z_cam, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if len(z_cam) == 0:
        return np.zeros(0, dtype=bool)
    s = align_scale(z_cam, ref, alignment)
    return s * z_cam <= ref * (1.0 + occlusion_tol)


def cm_sc(cloud: PointCloud, view: CameraView, ref_sem: np.ndarray, erosion: int = 1,
          classes: Sequence[int] = (0, 1, 2, 3), ref_depth: Optional[np.ndarray] = None,
          occlusion_tol: float = 0.1, edge_tol: float = 0.25) -> CrossModalScore:
    """Percentage of projected points whose label matches the reference segmentation.

    With `ref_depth`, points hidden from the camera are excluded as well as
    points on label boundaries.
    """
    if cloud.labels is None or len(cloud) == 0:
        return CrossModalScore(float("nan"), 0)
    if ref_sem.shape != view.size:
        raise MetricError(f"Segmentation {ref_sem.shape} does not match view size {view.size}")

    labelled = cloud.labels != NO_LABEL
    proj = lidar_to_camera(cloud, view)
    keep = proj.valid & labelled
    u = np.floor(proj.u[keep]).astype(np.int64)
    v = np.floor(proj.v[keep]).astype(np.int64)
    drop = boundary_mask(ref_sem, erosion)[v, u]
    if ref_depth is not None:
        if ref_depth.shape != view.size:
            raise MetricError(f"Depth map {ref_depth.shape} does not match view size {view.size}")
        ref, ok = lookup_depth(ref_depth, proj.u[keep], proj.v[keep], edge_tol)
        hidden = np.zeros(len(ok), dtype=bool)
        if ok.any():
            hidden[ok] = ~visible_to_camera(proj.z_cam[keep][ok], ref[ok], occlusion_tol)
        drop |= hidden

    pred = cloud.labels[keep][~drop]
    ref_labels = ref_sem[v, u][~drop].astype(np.int64)
    ignored = int(np.sum(proj.valid & ~labelled))
    excluded = int(drop.sum())
    if len(pred) == 0:
        return CrossModalScore(float("nan"), 0, ignored, excluded)
    accuracy = 100.0 * float(np.mean(pred == ref_labels))
    return CrossModalScore(accuracy, len(pred), ignored, excluded, mean_iou(pred, ref_labels, classes))


def align_scale(proj: np.ndarray, ref: np.ndarray, alignment: str = "median") -> float:
    if alignment == "none":
        return 1.0
    if alignment == "median":
        return float(np.median(ref / proj))
    if alignment == "lstsq":
        return float(np.dot(ref, proj) / np.dot(proj, proj))
    raise MetricError(f"Unknown depth alignment {alignment!r} (expected one of {ALIGNMENTS})")


def abs_rel(proj: np.ndarray, ref: np.ndarray, alignment: str = "median") -> float:
    """mean(|s * proj - ref| / ref) with s from `alignment`"""
    proj = np.asarray(proj, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if len(proj) == 0:
        raise MetricError("No depth pairs to compare")
    s = align_scale(proj, ref, alignment)
    return float(np.mean(np.abs(s * proj - ref) / ref))


def cm_dc(cloud: PointCloud, view: CameraView, ref_depth: np.ndarray, alignment: str = "median",
          edge_tol: float = 0.25, occlusion_tol: float = 0.1) -> CrossModalScore:
    """Scale-aligned AbsRel of projected camera depths against the reference depth map.

    Points at depth discontinuities or hidden behind the camera-visible
    surface are counted in `excluded`.
    """
    if ref_depth.shape != view.size:
        raise MetricError(f"Depth map {ref_depth.shape} does not match view size {view.size}")
    if alignment not in ALIGNMENTS:
        raise MetricError(f"Unknown depth alignment {alignment!r} (expected one of {ALIGNMENTS})")
    if len(cloud) == 0:
        return CrossModalScore(float("nan"), 0)

    proj = lidar_to_camera(cloud, view)
    z = proj.z_cam[proj.valid]
    ref, ok = lookup_depth(ref_depth, proj.u[proj.valid], proj.v[proj.valid], edge_tol)
    if ok.any():
        ok[ok] = visible_to_camera(z[ok], ref[ok], occlusion_tol, alignment)
    excluded = int(np.sum(~ok))
    if not ok.any():
        return CrossModalScore(float("nan"), 0, 0, excluded)
    return CrossModalScore(abs_rel(z[ok], ref[ok], alignment), int(ok.sum()), 0, excluded)


# ==================== Regions ====================

def region_partition(cloud: PointCloud) -> Tuple[PointCloud, PointCloud]:
    """(front, rear) with front = {p_x > 0}"""
    front = cloud.points[:, 0] > 0
    return cloud.subset(front), cloud.subset(~front)


def select_region(cloud: PointCloud, region: str) -> PointCloud:
    if region == "full":
        return cloud
    front, rear = region_partition(cloud)
    if region == "front":
        return front
    if region == "rear":
        return rear
    raise MetricError(f"Unknown region {region!r} (expected one of {REGIONS})")


def select_region_range(range_image: RangeImage, region: str) -> RangeImage:
    """Range image with pixels outside `region` emptied (front = rays with positive x)"""
    if region == "full":
        return range_image
    if region not in REGIONS:
        raise MetricError(f"Unknown region {region!r} (expected one of {REGIONS})")
    front = ray_grid(range_image.sensor)[..., 0] > 0
    keep = front if region == "front" else ~front
    return RangeImage(np.where(keep, range_image.depth, 0.0), np.where(keep, range_image.intensity, 0.0),
                      range_image.sensor)


# ==================== Reporting ====================

@dataclass
class MetricReport:
    region: str
    values: Dict[str, float] = field(default_factory=dict)
    units: Dict[str, str] = field(default_factory=dict)
    counts: Dict[str, int] = field(default_factory=dict)
    config_hash: str = ""
    extractors: Dict[str, str] = field(default_factory=dict)
    undefined: List[str] = field(default_factory=list)

    def add(self, name: str, value: float, unit: str = "") -> None:
        if value is None or not math.isfinite(value):
            self.undefined.append(name)
            logger.warning("Metric %s is undefined for region %s", name, self.region)
            return
        self.values[name] = float(value)
        self.units[name] = unit

    @property
    def finite(self) -> bool:
        return not self.undefined and all(math.isfinite(v) for v in self.values.values())

    def to_lines(self) -> List[str]:
        lines = [f"region={self.region}", f"config_hash={self.config_hash}"]
        lines += [f"{name}={value:.6g}" for name, value in self.values.items()]
        lines += [f"{name}_unit={unit}" for name, unit in self.units.items() if unit]
        lines += [f"count_{name}={count}" for name, count in self.counts.items()]
        lines += [f"extractor_{name}={ident}" for name, ident in self.extractors.items()]
        lines += [f"undefined={','.join(self.undefined)}"] if self.undefined else []
        return lines

    def to_frame(self) -> pl.DataFrame:
        names = list(self.values)
        return pl.DataFrame({
            "region": [self.region] * len(names),
            "metric": names,
            "value": [self.values[n] for n in names],
            "unit": [self.units.get(n, "") for n in names],
            "config_hash": [self.config_hash] * len(names),
        }, schema={"region": pl.Utf8, "metric": pl.Utf8, "value": pl.Float64,
                   "unit": pl.Utf8, "config_hash": pl.Utf8})
