#!/usr/bin/env python3
"""
Camera-Conditioned LiDAR Generation - Main Entry Point
------------------------------------------------------
Subcommands:
  gen-data   synthesize a paired LiDAR/camera dataset
  train      train the conditional panoramic denoiser
  sample     generate scans conditioned on a dataset's views or one image + calib
  eval       compare a generated set against a reference set

Usage:
  python main.py gen-data --n 200 --out-dir ./runs/data
  python main.py train --dataset ./runs/data --out-dir ./runs/train
  python main.py sample --checkpoint ./runs/train/latest.pt --dataset ./runs/data --n 32 --out-dir ./runs/gen
  python main.py eval --reference ./runs/data --generated ./runs/gen --out-dir ./runs/eval
"""

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np
from PIL import Image

from config import RunConfig, load_config
from diffusion import Checkpoint, load_checkpoint, sample
from eval_engine import EvalEngine
from prepare import (
    GeneratedEntry,
    cmd_gen_data,
    load_views,
    read_dataset_config,
    read_manifest,
    write_generated_set,
)
from rangeview import CameraView
from tensor_io import file_md5, load_tensor, read_calib
from training import TrainingDiverged, train

logger = logging.getLogger(__name__)


def print_summary(title: str, lines: List[str], elapsed: float) -> None:
    print("\n" + "=" * 60)
    print(f"SUMMARY - {title}")
    print("=" * 60)
    for line in lines:
        print(line)
    print(f"\nTotal time: {elapsed:.3f}s")
    print("=" * 60)


def resolve_config(path: Optional[Path], fallback: Optional[Path] = None) -> RunConfig:
    """--config if given, else the config stored next to a dataset, else defaults"""
    if path is not None:
        return load_config(path)
    if fallback is not None and (Path(fallback) / "config.json").exists():
        return read_dataset_config(fallback)
    return RunConfig()


# ==================== Commands ====================

def cmd_train(config: RunConfig, dataset: Path, out_dir: Path, resume: Optional[Path] = None) -> Path:
    return train(config, dataset, out_dir, resume)


def load_image(path: Path) -> np.ndarray:
    """HxWx3 float32 in [0, 1] from a .vten tensor or any Pillow-readable image"""
    if Path(path).suffix == ".vten":
        image, _ = load_tensor(path)
        return image.astype(np.float32)
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0


def single_view(checkpoint: Checkpoint, image_path: Path, calib_path: Path) -> CameraView:
    calibrations = read_calib(calib_path)
    if len(calibrations) != 1:
        raise ValueError(f"{calib_path} holds {len(calibrations)} views; a single-image condition needs exactly one")
    rig = [cam.name for cam in checkpoint.config.cameras]
    if len(rig) != 1:
        raise ValueError(f"The checkpoint was trained on a {len(rig)}-camera rig; one image cannot condition it")
    (K, T), = calibrations.values()
    return CameraView(load_image(image_path), K, T, rig[0])


def cmd_sample(checkpoint_path: Path, out_dir: Path, n: int, seed: int = 0, dataset: Optional[Path] = None,
               image: Optional[Path] = None, calib: Optional[Path] = None, steps: Optional[int] = None):
    checkpoint = load_checkpoint(checkpoint_path)
    config = checkpoint.config
    batch_size = config.sampling.batch_size
    steps = steps or config.sampling.steps

    # conditioning items: (views, source row) per requested sample
    items = []
    if dataset is not None:
        dataset_config = read_dataset_config(dataset)
        if dataset_config.sensor != config.sensor:
            raise ValueError(f"Checkpoint sensor {config.sensor} does not match dataset sensor {dataset_config.sensor}")
        rows = read_manifest(dataset).head(n).to_dicts()
        if len(rows) < n:
            raise ValueError(f"Dataset {dataset} has {len(rows)} samples, {n} requested")
        items = [(load_views(dataset, row), row) for row in rows]
    elif image is not None and calib is not None:
        view = single_view(checkpoint, image, calib)
        items = [([view], None)] * n
    elif checkpoint.model.conditional:
        raise ValueError("A conditional checkpoint needs --dataset or --image with --calib")

    print(f"🚀 Sampling {n} scans ({steps or checkpoint.schedule.timesteps} steps, seed {seed})")
    entries = []
    for b, start in enumerate(range(0, n, batch_size)):
        chunk = items[start:start + batch_size]
        count = min(batch_size, n - start)
        t0 = time.time()
        ranges = sample(checkpoint, [views for views, _ in chunk], steps, seed + b, count)
        for offset, range_image in enumerate(ranges):
            views, row = chunk[offset] if chunk else ([], None)
            entries.append(GeneratedEntry(
                range_image,
                seed=int(row["seed"]) if row else -1,
                weather=str(row["weather"]) if row else "clean",
                source=str(Path(dataset).resolve()) if row else "",
                source_id=str(row["sample_id"]) if row else "",
                calibrations={v.name: (v.K, v.T) for v in views},
            ))
        print(f"   ✅ Batch {b + 1}: {len(ranges)} scans | Time: {time.time() - t0:.2f}s")

    provenance = {"checkpoint_md5": file_md5(checkpoint_path), "sample_seed": str(seed),
                  "sample_steps": str(steps or checkpoint.schedule.timesteps)}
    return write_generated_set(out_dir, entries, config, provenance)


def cmd_eval(config: RunConfig, out_dir: Path, reference: Optional[Path] = None, generated: Optional[Path] = None,
             reference_kitti: Optional[Path] = None, generated_kitti: Optional[Path] = None,
             weather: Optional[str] = None, workers: Optional[int] = None, plot: bool = False):
    engine = EvalEngine(config, workers)
    ref_set = engine.load_kitti_set(reference_kitti) if reference_kitti else engine.load_set(reference)
    gen_set = engine.load_kitti_set(generated_kitti) if generated_kitti else engine.load_set(generated)
    reports = engine.run(ref_set, gen_set, out_dir, weather)
    if plot:
        from plots import plot_summary

        path = plot_summary([s.cloud for s in ref_set.filter_weather(weather).samples],
                            [s.cloud for s in gen_set.filter_weather(weather).samples],
                            reports, Path(out_dir) / "summary.png",
                            config.metrics.bev_bins, config.metrics.bev_extent)
        print(f"📊 Plot: {path}")
    return reports


# ==================== CLI ====================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Camera-conditioned panoramic LiDAR generation")
    parser.add_argument("--log-level", default="WARNING", help="Logging level (default: WARNING)")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="Synthesize a paired LiDAR/camera dataset")
    gen.add_argument("--config", type=Path, default=None, help="RunConfig JSON (default: built-in defaults)")
    gen.add_argument("--n", type=int, required=True, help="Number of samples")
    gen.add_argument("--out-dir", type=Path, required=True, help="Output dataset directory")
    gen.add_argument("--seed", type=int, default=None, help="Override config seed")
    gen.add_argument("--workers", type=int, default=None, help="Parallel workers (default: auto, max 6)")

    tr = sub.add_parser("train", help="Train the conditional denoiser")
    tr.add_argument("--dataset", type=Path, required=True, help="Dataset directory (from gen-data)")
    tr.add_argument("--out-dir", type=Path, required=True, help="Run directory for checkpoints and logs")
    tr.add_argument("--config", type=Path, default=None, help="RunConfig JSON (default: the dataset's config)")
    tr.add_argument("--steps", type=int, default=None, help="Override training steps")
    tr.add_argument("--batch-size", type=int, default=None, help="Override batch size")
    tr.add_argument("--resume", type=Path, default=None, help="Checkpoint to resume from")

    sa = sub.add_parser("sample", help="Generate conditioned scans")
    sa.add_argument("--checkpoint", type=Path, required=True, help="Checkpoint file")
    sa.add_argument("--out-dir", type=Path, required=True, help="Output directory for the generated set")
    sa.add_argument("--n", type=int, required=True, help="Number of scans")
    sa.add_argument("--seed", type=int, default=0, help="Sampling seed")
    sa.add_argument("--steps", type=int, default=None, help="Sampling steps (default: full schedule)")
    sa.add_argument("--dataset", type=Path, default=None, help="Condition on this dataset's views")
    sa.add_argument("--image", type=Path, default=None, help="Single condition image (.png/.jpg/.vten)")
    sa.add_argument("--calib", type=Path, default=None, help="Calibration for --image (KITTI or K_/T_ format)")

    ev = sub.add_parser("eval", help="Evaluate a generated set against a reference set")
    ev.add_argument("--reference", type=Path, default=None, help="Reference dataset directory")
    ev.add_argument("--generated", type=Path, default=None, help="Generated dataset directory")
    ev.add_argument("--reference-kitti", type=Path, default=None, help="Directory of reference KITTI .bin scans")
    ev.add_argument("--generated-kitti", type=Path, default=None, help="Directory of generated KITTI .bin scans")
    ev.add_argument("--out-dir", type=Path, required=True, help="Report directory")
    ev.add_argument("--config", type=Path, default=None, help="RunConfig JSON (default: the reference config)")
    ev.add_argument("--weather", choices=["clean", "night", "fog", "snow"], default=None,
                    help="Restrict both sets to one weather tag")
    ev.add_argument("--workers", type=int, default=None, help="Parallel workers (default: auto, max 6)")
    ev.add_argument("--plot", action="store_true", help="Write summary.png")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    start = time.time()

    try:
        if args.command == "gen-data":
            config = resolve_config(args.config)
            if args.seed is not None:
                config = config.with_overrides(seed=args.seed)
            manifest = cmd_gen_data(config, args.n, args.out_dir, args.workers)
            print_summary("gen-data", [f"Samples: {len(manifest)}", f"Output: {args.out_dir}"], time.time() - start)

        elif args.command == "train":
            if not args.dataset.exists():
                print(f"❌ Error: Dataset directory not found: {args.dataset}")
                print("Please run `main.py gen-data` first to create a dataset.")
                return 1
            config = resolve_config(args.config, args.dataset)
            overrides = {}
            if args.steps is not None:
                overrides["steps"] = args.steps
            if args.batch_size is not None:
                overrides["batch_size"] = args.batch_size
            if overrides:
                config = config.with_overrides(training=overrides)
            latest = cmd_train(config, args.dataset, args.out_dir, args.resume)
            print_summary("train", [f"Steps: {config.training.steps}", f"Checkpoint: {latest}"], time.time() - start)

        elif args.command == "sample":
            if args.dataset is None and (args.image is None) != (args.calib is None):
                print("❌ Error: --image and --calib must be given together")
                return 1
            manifest = cmd_sample(args.checkpoint, args.out_dir, args.n, args.seed, args.dataset,
                                  args.image, args.calib, args.steps)
            print_summary("sample", [f"Scans: {len(manifest)}", f"Output: {args.out_dir}"], time.time() - start)

        elif args.command == "eval":
            if (args.reference is None) == (args.reference_kitti is None):
                print("❌ Error: give exactly one of --reference / --reference-kitti")
                return 1
            if (args.generated is None) == (args.generated_kitti is None):
                print("❌ Error: give exactly one of --generated / --generated-kitti")
                return 1
            config = resolve_config(args.config, args.reference)
            reports = cmd_eval(config, args.out_dir, args.reference, args.generated, args.reference_kitti,
                               args.generated_kitti, args.weather, args.workers, args.plot)
            lines = []
            for region, report in reports.items():
                status = "OK" if report.finite else f"UNDEFINED ({', '.join(report.undefined)})"
                lines.append(f"{region}: {status}")
            print_summary("eval", lines, time.time() - start)
            if not all(r.finite for r in reports.values()):
                return 2

    except TrainingDiverged as e:
        print(f"❌ Error: {e}")
        return 3
    except (ValueError, FileNotFoundError, RuntimeError) as e:
        print(f"❌ Error: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
