#!/usr/bin/env python3
"""
Evaluation Engine
-----------------
Compares a generated set against a reference set:

- Loads both manifests (or raw KITTI .bin directories) with a content-keyed
  cache, fanning sample loading out over a worker pool
- Generated clouds get oracle labels from the scene regenerated from the
  manifest seed; their conditioning views and reference maps come from the
  source dataset
- Runs the distribution metrics per region (full / front / rear) and the
  cross-modal metrics where a camera can see the region
- Writes report_<region>.txt (key=value lines) and report.parquet
"""

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from multiprocessing import Pool, cpu_count
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import polars as pl

from config import RunConfig, config_hash
from metrics import (
    MMD_SCALE,
    MetricReport,
    PointFeatureExtractor,
    RangeFeatureExtractor,
    cm_dc,
    cm_sc,
    extract_features,
    frechet,
    jsd,
    mmd,
    select_region,
    select_region_range,
)
from prepare import (
    MANIFEST,
    load_cloud,
    load_range_image,
    load_reference_maps,
    load_views,
    read_manifest,
    write_parquet,
)
from rangeview import CameraView, PointCloud, RangeImage, project_points
from synthworld import label_points, sample_scene
from tensor_io import file_md5, read_kitti_bin

logger = logging.getLogger(__name__)

# regions the default forward-facing rig can see
CAMERA_REGIONS = ("full", "front")


@dataclass
class EvalSample:
    sample_id: str
    weather: str
    cloud: PointCloud
    range_image: RangeImage
    views: List[CameraView] = field(default_factory=list)
    maps: Dict[str, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    unlabelled: int = 0


@dataclass
class SampleSet:
    name: str
    samples: List[EvalSample]

    @property
    def has_maps(self) -> bool:
        return bool(self.samples) and all(s.maps for s in self.samples)

    def filter_weather(self, weather: Optional[str]) -> "SampleSet":
        if weather is None:
            return self
        return SampleSet(self.name, [s for s in self.samples if s.weather == weather])


def load_sample_with_args(args):
    """Wrapper function for multiprocessing that unpacks arguments"""
    dataset_dir, row, config = args
    return load_eval_sample(dataset_dir, row, config)


def load_eval_sample(dataset_dir: Path, row: Dict[str, object], config: RunConfig) -> EvalSample:
    """
    Load one manifest row for evaluation.
    Generated rows are labelled against their regenerated scene and pick up
    views and reference maps from their source dataset.
    """
    cloud = load_cloud(dataset_dir, row)
    range_image = load_range_image(dataset_dir, row)
    unlabelled = 0

    maps_dir, maps_row = Path(dataset_dir), row
    if row.get("kind") == "generated":
        maps_dir = None
    if row.get("kind") == "generated" and row.get("source"):
        labels = label_points(sample_scene(int(row["seed"]), config.scene), cloud.points,
                              config.metrics.label_radius)
        unlabelled = int(np.sum(labels < 0))
        cloud = PointCloud(cloud.points, cloud.intensity, labels)
        maps_dir = Path(str(row["source"]))
        maps_row = dict(row, path=f"samples/{row['source_id']}")

    views, maps = [], {}
    if maps_dir is not None and row.get("views") and (maps_dir / MANIFEST).exists():
        views = load_views(maps_dir, maps_row)
        maps = load_reference_maps(maps_dir, maps_row)
    return EvalSample(str(row["sample_id"]), str(row["weather"]), cloud, range_image, views, maps, unlabelled)


def score_sample_with_args(args):
    """Wrapper function for multiprocessing that unpacks arguments"""
    sample, regions, metric_config = args
    return score_sample(sample, regions, metric_config)


def score_sample(sample: EvalSample, regions: Sequence[str], metric_config) -> Dict[str, List[Tuple[str, object]]]:
    """region -> [(view, (cm_sc score, cm_dc score))]"""
    scores = {}
    for region in regions:
        cloud = select_region(sample.cloud, region)
        scores[region] = []
        for view in sample.views:
            sem, depth = sample.maps[view.name]
            sc = cm_sc(cloud, view, sem, metric_config.cm_sc_erosion, ref_depth=depth,
                       occlusion_tol=metric_config.occlusion_tol, edge_tol=metric_config.depth_edge_tol)
            dc = cm_dc(cloud, view, depth, metric_config.cm_dc_alignment, metric_config.depth_edge_tol,
                       metric_config.occlusion_tol)
            scores[region].append((view.name, (sc, dc)))
    return scores


class EvalEngine:
    def __init__(self, config: RunConfig = RunConfig(), num_workers: Optional[int] = None):
        self.config = config
        if num_workers is None:
            num_workers = min(6, max(1, int(cpu_count() * 0.75)))
        self.num_workers = max(1, int(num_workers))
        mcfg = config.metrics
        self.range_extractor = RangeFeatureExtractor(mcfg.frd_seed, mcfg.feature_dim, config.sensor.d_max)
        self.point_extractor = PointFeatureExtractor(mcfg.fpd_seed, mcfg.feature_dim, mcfg.bev_extent)

        # loaded sample sets keyed by manifest content
        self._set_cache: Dict[str, SampleSet] = {}

    def _map(self, fn, items: List):
        if self.num_workers == 1 or len(items) < 2:
            return [fn(item) for item in items]
        with Pool(processes=min(self.num_workers, len(items))) as pool:
            return pool.map(fn, items)

    def _get_set_hash(self, source: Path, kind: str) -> str:
        """Generate a hash for a sample set to use as cache key"""
        if kind == "manifest":
            content = file_md5(Path(source) / MANIFEST)
        else:
            content = sorted((p.name, p.stat().st_size, p.stat().st_mtime_ns) for p in Path(source).glob("*.bin"))
        key = json.dumps({"source": str(Path(source).resolve()), "kind": kind, "content": content}, sort_keys=True)
        return hashlib.md5(key.encode()).hexdigest()

    def load_set(self, dataset_dir: Path) -> SampleSet:
        cache_key = self._get_set_hash(dataset_dir, "manifest")
        if cache_key not in self._set_cache:
            manifest = read_manifest(dataset_dir)
            rows = [(Path(dataset_dir), row, self.config) for row in manifest.iter_rows(named=True)]
            samples = self._map(load_sample_with_args, rows)
            self._set_cache[cache_key] = SampleSet(str(dataset_dir), samples)
        return self._set_cache[cache_key]

    def load_kitti_set(self, scan_dir: Path) -> SampleSet:
        """Raw KITTI scans; no labels, views or reference maps"""
        cache_key = self._get_set_hash(scan_dir, "kitti")
        if cache_key not in self._set_cache:
            files = sorted(Path(scan_dir).glob("*.bin"))
            if not files:
                raise FileNotFoundError(f"No .bin scans found in {scan_dir}")
            samples = []
            for f in files:
                points, intensity = read_kitti_bin(f)
                cloud = PointCloud(points, intensity)
                samples.append(EvalSample(f.stem, "clean", cloud, project_points(cloud, self.config.sensor)))
            self._set_cache[cache_key] = SampleSet(str(scan_dir), samples)
        return self._set_cache[cache_key]

    # ==================== Metric Execution ====================

    def _cross_modal(self, report: MetricReport, sample_set: SampleSet, region: str, prefix: str) -> None:
        mcfg = self.config.metrics
        per_sample = self._map(score_sample_with_args, [(s, [region], mcfg) for s in sample_set.samples])
        sc_scores, dc_scores = [], []
        for scores in per_sample:
            for _, (sc, dc) in scores[region]:
                sc_scores.append(sc)
                dc_scores.append(dc)

        defined_sc = [s for s in sc_scores if s.defined]
        defined_dc = [s for s in dc_scores if s.defined]
        report.add(f"{prefix}cm_sc", float(np.mean([s.value for s in defined_sc])) if defined_sc else float("nan"), "%")
        miou = [s.miou for s in defined_sc if np.isfinite(s.miou)]
        report.add(f"{prefix}cm_sc_miou", float(np.mean(miou)) if miou else float("nan"))
        report.add(f"{prefix}cm_dc", float(np.mean([s.value for s in defined_dc])) if defined_dc else float("nan"))
        report.counts[f"{prefix}cm_sc_points"] = sum(s.valid for s in sc_scores)
        report.counts[f"{prefix}cm_sc_ignored"] = sum(s.ignored for s in sc_scores)
        report.counts[f"{prefix}cm_sc_excluded"] = sum(s.excluded for s in sc_scores)
        report.counts[f"{prefix}cm_dc_points"] = sum(s.valid for s in dc_scores)
        report.counts[f"{prefix}cm_dc_excluded"] = sum(s.excluded for s in dc_scores)
        report.counts[f"{prefix}unlabelled_points"] = sum(s.unlabelled for s in sample_set.samples)

    def evaluate(self, reference: SampleSet, generated: SampleSet, region: str = "full") -> MetricReport:
        mcfg = self.config.metrics
        report = MetricReport(region, config_hash=config_hash(self.config))
        report.counts["reference_samples"] = len(reference.samples)
        report.counts["generated_samples"] = len(generated.samples)
        report.extractors = {"frd": self.range_extractor.name, "fpd": self.point_extractor.name}

        ref_clouds = [select_region(s.cloud, region) for s in reference.samples]
        gen_clouds = [select_region(s.cloud, region) for s in generated.samples]
        ref_ranges = [select_region_range(s.range_image, region) for s in reference.samples]
        gen_ranges = [select_region_range(s.range_image, region) for s in generated.samples]

        metrics = [
            ("jsd", lambda: jsd(ref_clouds, gen_clouds, mcfg.bev_bins, mcfg.bev_extent), ""),
            ("mmd", lambda: MMD_SCALE * mmd(ref_clouds, gen_clouds, mcfg.mmd_bandwidth, mcfg.mmd_estimator,
                                            mcfg.bev_bins, mcfg.bev_extent), "1e-4"),
            ("frd", lambda: frechet(extract_features(ref_ranges, self.range_extractor),
                                    extract_features(gen_ranges, self.range_extractor)), ""),
            ("fpd", lambda: frechet(extract_features(ref_clouds, self.point_extractor),
                                    extract_features(gen_clouds, self.point_extractor)), ""),
        ]
        for name, compute, unit in metrics:
            try:
                report.add(name, compute(), unit)
            except ValueError as e:
                logger.warning("%s (%s): %s", name, region, e)
                report.add(name, float("nan"), unit)

        if region in CAMERA_REGIONS:
            if generated.has_maps:
                self._cross_modal(report, generated, region, "")
            if reference.has_maps:
                self._cross_modal(report, reference, region, "reference_")
        return report

    def run(self, reference: SampleSet, generated: SampleSet, out_dir: Path,
            weather: Optional[str] = None, regions: Optional[Sequence[str]] = None) -> Dict[str, MetricReport]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        reference = reference.filter_weather(weather)
        generated = generated.filter_weather(weather)
        print("🚀 Evaluating generated set")
        print(f"   Reference: {reference.name} ({len(reference.samples)} samples)")
        print(f"   Generated: {generated.name} ({len(generated.samples)} samples)")
        if weather is not None:
            print(f"   Weather: {weather}")

        reports = {}
        for region in regions or self.config.metrics.regions:
            start = time.time()
            print(f"\n🟦 Region {region}:")
            report = self.evaluate(reference, generated, region)
            if weather is not None:
                report.counts[f"weather_{weather}"] = len(generated.samples)
            (out_dir / f"report_{region}.txt").write_text("\n".join(report.to_lines()) + "\n")
            shown = " | ".join(f"{k}={v:.4g}" for k, v in report.values.items())
            status = "✅" if report.finite else "❌"
            print(f"   {status} {shown} | Time: {time.time() - start:.2f}s")
            reports[region] = report

        frames = [r.to_frame() for r in reports.values()]
        write_parquet(pl.concat(frames) if frames else MetricReport("full").to_frame(), out_dir / "report.parquet")
        return reports
