#!/usr/bin/env python3
"""
Denoiser Training
-----------------
Minimizes E ||eps - eps_theta(X_t, views, t)||^2 over a generated dataset:

- t uniform on [1, T], eps ~ N(0, I), X_t from the closed-form forward process
- Adam on the trainable parameters only (frozen encoders never move)
- metrics.jsonl line every `log_interval` steps, step_XXXXXX.pt every
  `checkpoint_every` steps and latest.pt at the end
- Resuming from a checkpoint restores weights, optimizer and the sampling RNG,
  so an interrupted run continues exactly as an uninterrupted one
"""

import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch
from torch.nn import functional as F

from config import RunConfig, deterministic_requested, resume_hash, save_config
from diffusion import (
    DiffusionSchedule,
    RangeNormalizer,
    build_model,
    forward_noise,
    load_checkpoint,
    save_checkpoint,
)
from prepare import load_range_image, load_views, read_dataset_config, read_manifest, read_stats
from rangeview import CameraView

logger = logging.getLogger(__name__)

METRICS_LOG = "metrics.jsonl"
LATEST = "latest.pt"


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss; `path` points at the diagnostic state dump."""

    def __init__(self, step: int, path: Path):
        super().__init__(f"Loss became non-finite at step {step}; state dumped to {path}")
        self.step = step
        self.path = path


def configure_determinism(enabled: bool) -> None:
    if enabled:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def checkpoint_name(step: int) -> str:
    return f"step_{step:06d}.pt"


# ==================== Training Data ====================

@dataclass
class TrainingSet:
    """Normalized range images [N, 2, h, w] with their conditioning views"""
    x0: torch.Tensor
    views: List[List[CameraView]]
    dataset_hash: str

    def __len__(self) -> int:
        return self.x0.shape[0]

    def batch_views(self, indices: Sequence[int]) -> List[List[CameraView]]:
        return [self.views[i] for i in indices]


def load_training_set(dataset_dir: Path, config: RunConfig) -> TrainingSet:
    dataset_dir = Path(dataset_dir)
    dataset_config = read_dataset_config(dataset_dir)
    if dataset_config.sensor != config.sensor:
        raise ValueError(f"Dataset sensor {dataset_config.sensor} does not match the training sensor {config.sensor}")

    manifest = read_manifest(dataset_dir)
    if len(manifest) == 0:
        raise ValueError(f"Dataset {dataset_dir} has no samples")
    expected = [cam.name for cam in config.cameras]

    den = config.denoiser
    normalizer = RangeNormalizer(config.sensor, den.depth_norm, den.intensity_range,
                                 config.sampling.no_return_threshold)
    encoded, views = [], []
    for row in manifest.iter_rows(named=True):
        encoded.append(normalizer.encode(load_range_image(dataset_dir, row)))
        item = load_views(dataset_dir, row)
        if [v.name for v in item] != expected:
            raise ValueError(f"Sample {row['sample_id']} views {[v.name for v in item]} do not match the rig {expected}")
        views.append(item)

    stats = read_stats(dataset_dir)
    return TrainingSet(torch.from_numpy(np.stack(encoded)), views, stats.get("dataset_hash", ""))


# ==================== Training Loop ====================

def _log_metrics(path: Path, record: dict) -> None:
    with path.open("a") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def _truncate_metrics(path: Path, step: int) -> None:
    """Drop records past `step` so a resumed run does not repeat them"""
    kept = [line for line in path.read_text().splitlines()
            if line.strip() and json.loads(line)["step"] <= step]
    path.write_text("".join(line + "\n" for line in kept))


def train(config: RunConfig, dataset_dir: Path, out_dir: Path, resume: Optional[Path] = None) -> Path:
    """Train to `config.training.steps`; returns the path of latest.pt"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    deterministic = deterministic_requested()
    configure_determinism(deterministic)
    float64 = config.training.float64 or deterministic
    tcfg = config.training

    data = load_training_set(dataset_dir, config)
    schedule = DiffusionSchedule.from_config(config.schedule)
    generator = torch.Generator().manual_seed(tcfg.seed)

    start_step = 0
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if resume_hash(ckpt.config) != resume_hash(config):
            raise ValueError(f"Checkpoint {resume} was trained with a different config")
        if ckpt.step > config.training.steps:
            raise ValueError(f"Checkpoint {resume} is at step {ckpt.step}, past the requested {config.training.steps} steps")
        if ckpt.dataset_hash != data.dataset_hash:
            logger.warning("Resuming on a different dataset (%s vs %s)", ckpt.dataset_hash, data.dataset_hash)
        model = ckpt.model
        if float64 and next(model.parameters()).dtype != torch.float64:
            model = model.double()
        start_step = ckpt.step
        if ckpt.rng_state is not None:
            generator.set_state(ckpt.rng_state)
    else:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(tcfg.seed)
            model = build_model(config, float64)

    dtype = next(model.parameters()).dtype
    model.train()
    optimizer = torch.optim.Adam(model.trainable_parameters(), lr=tcfg.lr)
    if resume is not None and ckpt.optimizer_state is not None:
        optimizer.load_state_dict(ckpt.optimizer_state)

    save_config(config, out_dir / "config.json")
    metrics_path = out_dir / METRICS_LOG
    if resume is None and metrics_path.exists():
        metrics_path.unlink()
    elif metrics_path.exists():
        _truncate_metrics(metrics_path, start_step)

    def checkpoint(step: int, path: Path) -> None:
        save_checkpoint(path, config, model, schedule, step, data.dataset_hash,
                        optimizer.state_dict(), generator.get_state())

    print(f"🚀 Training {'conditional' if model.conditional else 'unconditional'} denoiser")
    print(f"   Samples: {len(data)} | Steps: {start_step} -> {tcfg.steps} | "
          f"dtype: {str(dtype).replace('torch.', '')} | deterministic: {deterministic}")

    start = time.time()
    x0_all = data.x0.to(dtype)
    for step in range(start_step + 1, tcfg.steps + 1):
        indices = torch.randint(len(data), (tcfg.batch_size,), generator=generator)
        t = torch.randint(1, schedule.timesteps + 1, (tcfg.batch_size,), generator=generator)
        x0 = x0_all[indices]
        noise = torch.randn(x0.shape, generator=generator, dtype=torch.float64).to(dtype)
        x_t = forward_noise(schedule, x0, t, noise)

        conditioning = model.condition(data.batch_views(indices.tolist())) if model.conditional else None
        loss = F.mse_loss(model(x_t, t, conditioning), noise)

        if not math.isfinite(float(loss)):
            dump = out_dir / f"diverged_{checkpoint_name(step)}"
            checkpoint(step - 1, dump)
            raise TrainingDiverged(step, dump)

        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if tcfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.trainable_parameters(), tcfg.grad_clip)
        optimizer.step()

        if step % tcfg.log_interval == 0:
            record = {"step": step, "loss": float(loss), "lr": tcfg.lr, "wall_time": time.time() - start}
            _log_metrics(metrics_path, record)
            print(f"   step {step:>6d} | loss {float(loss):.5f} | {record['wall_time']:.1f}s")
        if step % tcfg.checkpoint_every == 0:
            checkpoint(step, out_dir / checkpoint_name(step))

    latest = out_dir / LATEST
    checkpoint(max(start_step, tcfg.steps), latest)
    elapsed = time.time() - start
    print(f"\n✅ Training complete in {elapsed:.2f}s")
    print(f"💾 Checkpoint: {latest}")
    return latest
