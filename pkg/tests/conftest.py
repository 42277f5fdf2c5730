import math
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from config import (  # noqa: E402
    AlignmentParams,
    CameraSpec,
    DenoiserConfig,
    EncoderConfig,
    RunConfig,
    ScheduleConfig,
    TrainingConfig,
    camera_extrinsic,
    flat_matrix,
    pinhole_intrinsic,
)
from rangeview import SensorSpec  # noqa: E402


@pytest.fixture
def sensor():
    return SensorSpec(16, 64, math.radians(10.0), math.radians(30.0), 1.0, 40.0)


@pytest.fixture
def camera():
    return CameraSpec(name="front", height=32, width=96,
                      K=flat_matrix(pinhole_intrinsic(48.0, 96, 32)),
                      T=flat_matrix(camera_extrinsic(0.0)))


@pytest.fixture
def tiny_config(sensor, camera):
    """A model and dataset small enough to train for a few steps on CPU"""
    return RunConfig(
        seed=3,
        sensor=sensor,
        cameras=(camera,),
        encoders=EncoderConfig(semantic_widths=(8, 8, 8, 8), depth_widths=(8, 8, 8, 8)),
        denoiser=DenoiserConfig(base_width=8, channel_mult=(1, 1, 2, 2), pfc_heads=2),
        alignment=AlignmentParams(num_samples=4, fourier_bands=2, heads=1),
        schedule=ScheduleConfig(timesteps=50, beta_start=1e-3, beta_end=0.2),
        training=TrainingConfig(steps=4, batch_size=2, log_interval=1, checkpoint_every=2),
    )


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False,
                     help="run the multi-hour training checks")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full-size CPU training runs, skipped without --run-slow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)
