#!/usr/bin/env python3
"""
Dataset Generation Phase - Parallel Paired Samples
--------------------------------------------------
Writes a synthetic paired LiDAR/camera dataset:

- Samples generated in parallel (multiprocessing), each worker writing into
  its own temp directory, merged into samples/ afterwards
- Per sample: cloud.bin (KITTI layout), labels.vten, range.vten, and per
  camera image_<view>.vten, sem_<view>.vten, depth_<view>.vten, calib.txt
- manifest.parquet (one row per sample, calibrations as KITTI-style strings),
  files.parquet (md5 of every file), stats.parquet, config.json

Usage:
  python main.py gen-data --n 200 --out-dir ./data/synth
"""

import hashlib
import logging
import shutil
import time
from dataclasses import dataclass
from multiprocessing import Pool, cpu_count
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import polars as pl

from config import RunConfig, load_config, save_config
from rangeview import CameraView, PointCloud, RangeImage, SensorSpec, unproject
from synthworld import PairedSample, generate_sample
from tensor_io import (
    file_md5,
    format_matrix,
    load_tensor,
    parse_matrix,
    read_kitti_bin,
    save_tensor,
    write_calib,
    write_kitti_bin,
)

logger = logging.getLogger(__name__)

MANIFEST = "manifest.parquet"
FILES = "files.parquet"
STATS = "stats.parquet"
CONFIG = "config.json"

BASE_COLUMNS = {
    "sample_id": pl.Utf8,
    "seed": pl.Int64,
    "weather": pl.Utf8,
    "n_points": pl.Int64,
    "path": pl.Utf8,
    "views": pl.Utf8,
    "kind": pl.Utf8,
    "source": pl.Utf8,
    "source_id": pl.Utf8,
}


def sample_seed(base_seed: int, index: int) -> int:
    """Scene seed of sample `index`; distinct base seeds never collide below 10^6 samples"""
    return int(base_seed) * 1_000_000 + int(index)


def calib_columns(names: Sequence[str]) -> List[str]:
    return [f"{prefix}_{name}" for name in names for prefix in ("K", "T")]


def empty_manifest(view_names: Sequence[str]) -> pl.DataFrame:
    schema = dict(BASE_COLUMNS)
    schema.update({col: pl.Utf8 for col in calib_columns(view_names)})
    return pl.DataFrame(schema=schema)


def write_parquet(df: pl.DataFrame, path: Path) -> None:
    df.write_parquet(path, compression="zstd", compression_level=3, statistics=True, use_pyarrow=True)


# ==================== Sample Files ====================

def write_sample(sample: PairedSample, sample_dir: Path, sensor: SensorSpec) -> None:
    """Persist one paired sample into `sample_dir`"""
    sample_dir.mkdir(parents=True, exist_ok=True)
    write_kitti_bin(sample_dir / "cloud.bin", sample.cloud.points, sample.cloud.intensity)
    labels = sample.cloud.labels if sample.cloud.labels is not None else np.full(len(sample.cloud), -1, np.int16)
    save_tensor(sample_dir / "labels.vten", labels.astype(np.int16))
    save_tensor(sample_dir / "range.vten", sample.range_image.stacked(),
                {"sensor": sensor.to_metadata(), "weather": sample.weather})

    calibrations = {}
    for view, sem, depth in zip(sample.views, sample.sem_maps, sample.depth_maps):
        save_tensor(sample_dir / f"image_{view.name}.vten", view.image, {"view": view.name})
        save_tensor(sample_dir / f"sem_{view.name}.vten", sem, {"view": view.name})
        save_tensor(sample_dir / f"depth_{view.name}.vten", depth, {"view": view.name})
        calibrations[view.name] = (view.K, view.T)
    write_calib(sample_dir / "calib.txt", calibrations)


def manifest_row(sample_id: str, sample: PairedSample, path: str) -> Dict[str, object]:
    row = {
        "sample_id": sample_id,
        "seed": int(sample.seed),
        "weather": sample.weather,
        "n_points": len(sample.cloud),
        "path": path,
        "views": ",".join(v.name for v in sample.views),
        "kind": "reference",
        "source": "",
        "source_id": "",
    }
    for view in sample.views:
        row[f"K_{view.name}"] = format_matrix(view.K)
        row[f"T_{view.name}"] = format_matrix(view.T)
    return row


def generate_chunk_with_worker_id(args):
    """Wrapper function for multiprocessing that unpacks arguments"""
    indices, worker_id, out_dir, config = args
    return generate_chunk(indices, out_dir, config, worker_id)


def generate_chunk(indices: Sequence[int], out_dir: Path, config: RunConfig, worker_id: int):
    """
    Generate and write a run of samples in a separate process.
    Writes to a worker-specific temp directory to avoid collisions.

    Returns: (rows, errors, elapsed)
    """
    start = time.time()
    temp_dir = out_dir / "temp" / f"worker_{worker_id}"
    temp_dir.mkdir(parents=True, exist_ok=True)

    rows, errors = [], []
    for index in indices:
        sample_id = f"{index:06d}"
        try:
            sample = generate_sample(sample_seed(config.seed, index), config)
            write_sample(sample, temp_dir / sample_id, config.sensor)
            rows.append(manifest_row(sample_id, sample, f"samples/{sample_id}"))
        except Exception as e:
            errors.append((sample_id, f"{type(e).__name__}: {e}"))
    return rows, errors, time.time() - start


def dataset_hash(files: pl.DataFrame, cfg_hash: str) -> str:
    """md5 over the generator config hash and every (file, md5) pair in path order"""
    digest = hashlib.md5(cfg_hash.encode())
    for path, md5 in files.sort("file").select(["file", "md5"]).iter_rows():
        digest.update(f"{path}:{md5}\n".encode())
    return digest.hexdigest()


def hash_files(out_dir: Path, rows: Sequence[Dict[str, object]]) -> pl.DataFrame:
    records = []
    for row in rows:
        sample_dir = out_dir / str(row["path"])
        for f in sorted(sample_dir.iterdir()):
            records.append({
                "sample_id": row["sample_id"],
                "file": f"{row['path']}/{f.name}",
                "md5": file_md5(f),
                "bytes": f.stat().st_size,
            })
    if not records:
        return pl.DataFrame(schema={"sample_id": pl.Utf8, "file": pl.Utf8, "md5": pl.Utf8, "bytes": pl.Int64})
    return pl.DataFrame(records)


def create_statistics(out_dir: Path, manifest: pl.DataFrame, cfg_hash: str, data_hash: str, elapsed: float,
                      extra: Optional[Dict[str, str]] = None):
    """Create stats.parquet from the manifest"""
    weather_counts = {}
    if len(manifest):
        counts = manifest.group_by("weather").agg(pl.len().alias("count")).sort("weather")
        weather_counts = dict(counts.iter_rows())
    mean_points = float(manifest["n_points"].mean()) if len(manifest) else 0.0

    stats = {
        "n_samples": str(len(manifest)),
        "weather_counts": str(weather_counts),
        "mean_points": f"{mean_points:.1f}",
        "config_hash": cfg_hash,
        "dataset_hash": data_hash,
        "elapsed_s": f"{elapsed:.2f}",
    }
    stats.update(extra or {})
    write_parquet(pl.DataFrame({"key": list(stats.keys()), "value": list(stats.values())}), out_dir / STATS)
    return stats


class DatasetGenerator:
    def __init__(self, config: RunConfig, out_dir: Path, num_workers: Optional[int] = None):
        self.config = config
        self.out_dir = Path(out_dir)
        if num_workers is None:
            num_workers = min(6, max(1, int(cpu_count() * 0.75)))
        self.num_workers = max(1, int(num_workers))

    def _merge_temp_samples(self, rows: Sequence[Dict[str, object]]) -> None:
        """Move worker sample directories into samples/ and drop the temp tree"""
        temp_dir = self.out_dir / "temp"
        samples_dir = self.out_dir / "samples"
        samples_dir.mkdir(parents=True, exist_ok=True)
        if not temp_dir.exists():
            return
        for worker_dir in sorted(temp_dir.glob("worker_*")):
            for sample_dir in sorted(worker_dir.iterdir()):
                shutil.move(str(sample_dir), str(samples_dir / sample_dir.name))
        shutil.rmtree(temp_dir)
        logger.debug("merged %d samples", len(rows))

    def generate(self, n_samples: int) -> Tuple[pl.DataFrame, Dict[str, str]]:
        if n_samples < 0:
            raise ValueError(f"n_samples must be >= 0, got {n_samples}")
        print("🚀 Generating paired LiDAR/camera dataset")
        print(f"   Samples: {n_samples} | Workers: {self.num_workers}")
        start = time.time()

        if self.out_dir.exists():
            print("\n🗑️  Cleaning existing directory...")
            shutil.rmtree(self.out_dir)
        self.out_dir.mkdir(parents=True)
        cfg_hash = save_config(self.config, self.out_dir / CONFIG)

        try:
            rows: List[Dict[str, object]] = []
            errors: List[Tuple[str, str]] = []
            if n_samples:
                workers = min(self.num_workers, n_samples)
                chunks = [
                    (list(range(w, n_samples, workers)), w, self.out_dir, self.config)
                    for w in range(workers)
                ]
                print(f"\n🔄 Rendering scenes with {workers} workers...")
                if workers == 1:
                    results = [generate_chunk_with_worker_id(chunks[0])]
                else:
                    with Pool(processes=workers) as pool:
                        results = pool.map(generate_chunk_with_worker_id, chunks)
                for chunk_rows, chunk_errors, elapsed in results:
                    rows.extend(chunk_rows)
                    errors.extend(chunk_errors)
                print(f"   ✅ Rendered {len(rows)} samples")

            if errors:
                for sample_id, message in sorted(errors):
                    print(f"   ❌ Sample {sample_id}: {message}")
                raise RuntimeError(f"{len(errors)} of {n_samples} samples failed; output removed")

            print("\n🔗 Merging worker outputs...")
            self._merge_temp_samples(rows)

            if rows:
                manifest = pl.DataFrame(rows).sort("sample_id")
                manifest = manifest.select(list(BASE_COLUMNS) + calib_columns(manifest["views"][0].split(",")))
            else:
                manifest = empty_manifest([cam.name for cam in self.config.cameras])
            write_parquet(manifest, self.out_dir / MANIFEST)

            files = hash_files(self.out_dir, manifest.to_dicts())
            write_parquet(files, self.out_dir / FILES)
            data_hash = dataset_hash(files, cfg_hash)

            print("\n📈 Creating statistics...")
            stats = create_statistics(self.out_dir, manifest, cfg_hash, data_hash, time.time() - start)
        except BaseException:
            shutil.rmtree(self.out_dir, ignore_errors=True)
            raise

        elapsed = time.time() - start
        print(f"   Weather: {stats['weather_counts']}")
        print(f"   Dataset hash: {data_hash}")
        print(f"\n✅ Generation complete in {elapsed:.2f}s")
        print(f"📁 Dataset stored in: {self.out_dir}")
        return manifest, stats


def cmd_gen_data(config: RunConfig, n_samples: int, out_dir: Path,
                 num_workers: Optional[int] = None) -> pl.DataFrame:
    manifest, _ = DatasetGenerator(config, out_dir, num_workers).generate(n_samples)
    return manifest


# ==================== Dataset Access ====================

def read_manifest(dataset_dir: Path) -> pl.DataFrame:
    path = Path(dataset_dir) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"No {MANIFEST} in {dataset_dir}")
    return pl.read_parquet(path)


def read_stats(dataset_dir: Path) -> Dict[str, str]:
    path = Path(dataset_dir) / STATS
    if not path.exists():
        return {}
    return dict(pl.read_parquet(path).iter_rows())


def read_dataset_config(dataset_dir: Path) -> RunConfig:
    return load_config(Path(dataset_dir) / CONFIG)


def row_views(row: Dict[str, object]) -> List[str]:
    return [name for name in str(row["views"]).split(",") if name]


def load_views(dataset_dir: Path, row: Dict[str, object]) -> List[CameraView]:
    """Calibrated camera views of one manifest row, in rig order"""
    sample_dir = Path(dataset_dir) / str(row["path"])
    views = []
    for name in row_views(row):
        image, _ = load_tensor(sample_dir / f"image_{name}.vten")
        K = parse_matrix(str(row[f"K_{name}"]), (3, 4))
        T = parse_matrix(str(row[f"T_{name}"]), (4, 4))
        views.append(CameraView(image, K, T, name))
    return views


def load_reference_maps(dataset_dir: Path, row: Dict[str, object]) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
    """view name -> (sem_map, depth_map)"""
    sample_dir = Path(dataset_dir) / str(row["path"])
    maps = {}
    for name in row_views(row):
        sem, _ = load_tensor(sample_dir / f"sem_{name}.vten")
        depth, _ = load_tensor(sample_dir / f"depth_{name}.vten")
        maps[name] = (sem, depth)
    return maps


def load_range_image(dataset_dir: Path, row: Dict[str, object]) -> RangeImage:
    stacked, meta = load_tensor(Path(dataset_dir) / str(row["path"]) / "range.vten")
    return RangeImage(stacked[0], stacked[1], SensorSpec.from_metadata(meta["sensor"]))


def load_cloud(dataset_dir: Path, row: Dict[str, object]) -> PointCloud:
    sample_dir = Path(dataset_dir) / str(row["path"])
    points, intensity = read_kitti_bin(sample_dir / "cloud.bin")
    labels = None
    if (sample_dir / "labels.vten").exists():
        labels, _ = load_tensor(sample_dir / "labels.vten")
    return PointCloud(points, intensity, labels)


# ==================== Generated Sets ====================

@dataclass
class GeneratedEntry:
    """One generated scan and the conditioning sample it came from"""
    range_image: RangeImage
    seed: int
    weather: str = "clean"
    source: str = ""
    source_id: str = ""
    calibrations: Optional[Dict[str, Tuple[np.ndarray, np.ndarray]]] = None


def write_generated_set(out_dir: Path, entries: Sequence[GeneratedEntry], config: RunConfig,
                        provenance: Optional[Dict[str, str]] = None) -> pl.DataFrame:
    """Write generated scans with a manifest in the dataset layout (kind = generated)"""
    out_dir = Path(out_dir)
    if out_dir.exists():
        shutil.rmtree(out_dir)
    (out_dir / "samples").mkdir(parents=True)
    cfg_hash = save_config(config, out_dir / CONFIG)

    rows = []
    for index, entry in enumerate(entries):
        sample_id = f"{index:06d}"
        sample_dir = out_dir / "samples" / sample_id
        sample_dir.mkdir()
        cloud = unproject(entry.range_image)
        write_kitti_bin(sample_dir / "cloud.bin", cloud.points, cloud.intensity)
        save_tensor(sample_dir / "range.vten", entry.range_image.stacked(),
                    {"sensor": entry.range_image.sensor.to_metadata(), "weather": entry.weather})
        calibrations = entry.calibrations or {}
        row = {
            "sample_id": sample_id,
            "seed": int(entry.seed),
            "weather": entry.weather,
            "n_points": len(cloud),
            "path": f"samples/{sample_id}",
            "views": ",".join(calibrations),
            "kind": "generated",
            "source": entry.source,
            "source_id": entry.source_id,
        }
        for name, (K, T) in calibrations.items():
            row[f"K_{name}"] = format_matrix(K)
            row[f"T_{name}"] = format_matrix(T)
        rows.append(row)

    if rows:
        manifest = pl.DataFrame(rows)
        manifest = manifest.select(list(BASE_COLUMNS) + calib_columns(row_views(rows[0])))
    else:
        manifest = empty_manifest([cam.name for cam in config.cameras])
    write_parquet(manifest, out_dir / MANIFEST)

    files = hash_files(out_dir, rows)
    write_parquet(files, out_dir / FILES)
    create_statistics(out_dir, manifest, cfg_hash, dataset_hash(files, cfg_hash), 0.0, provenance)
    return manifest
