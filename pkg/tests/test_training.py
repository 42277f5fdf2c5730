import dataclasses
import json
import math

import pytest
import torch

import training
from config import DETERMINISTIC_ENV
from diffusion import load_checkpoint
from prepare import cmd_gen_data
from rangeview import SensorSpec
from training import TrainingDiverged, checkpoint_name, load_training_set, train


@pytest.fixture
def dataset(tmp_path, tiny_config):
    out = tmp_path / "data"
    cmd_gen_data(tiny_config, 3, out, num_workers=1)
    return out


@pytest.fixture
def deterministic(monkeypatch):
    monkeypatch.setenv(DETERMINISTIC_ENV, "1")
    yield
    torch.use_deterministic_algorithms(False)


def test_training_writes_logs_and_checkpoints(tmp_path, tiny_config, dataset):
    latest = train(tiny_config, dataset, tmp_path / "run")
    assert latest.name == "latest.pt"
    for step in (2, 4):
        assert (tmp_path / "run" / checkpoint_name(step)).exists()

    lines = (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == tiny_config.training.steps // tiny_config.training.log_interval
    records = [json.loads(line) for line in lines]
    assert [r["step"] for r in records] == [1, 2, 3, 4]
    assert set(records[0]) == {"step", "loss", "lr", "wall_time"}
    assert all(math.isfinite(r["loss"]) for r in records)

    ckpt = load_checkpoint(latest)
    assert ckpt.step == 4
    assert ckpt.config == tiny_config
    assert ckpt.optimizer_state is not None


def test_frozen_encoders_do_not_move(tmp_path, tiny_config, dataset):
    latest = load_checkpoint(train(tiny_config, dataset, tmp_path / "run"))
    initial = load_checkpoint(tmp_path / "run" / checkpoint_name(2))
    before = initial.model.semantic_encoder.state_dict()
    for key, value in latest.model.semantic_encoder.state_dict().items():
        assert torch.equal(value, before[key])


def test_resume_matches_uninterrupted_run(tmp_path, tiny_config, dataset, deterministic):
    full = load_checkpoint(train(tiny_config, dataset, tmp_path / "full"))
    assert next(full.model.parameters()).dtype == torch.float64

    resumed_path = train(tiny_config, dataset, tmp_path / "resumed",
                         resume=tmp_path / "full" / checkpoint_name(2))
    resumed = load_checkpoint(resumed_path)
    assert resumed.step == full.step
    expected = full.model.state_dict()
    for key, value in resumed.model.state_dict().items():
        assert torch.equal(value, expected[key]), key

    lines = (tmp_path / "resumed" / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(line)["step"] for line in lines] == [3, 4]


def test_resume_rejects_other_config(tmp_path, tiny_config, dataset):
    train(tiny_config, dataset, tmp_path / "run")
    other = tiny_config.with_overrides(training={"lr": 1e-3})
    with pytest.raises(ValueError):
        train(other, dataset, tmp_path / "other", resume=tmp_path / "run" / "latest.pt")


def test_resume_extends_a_shorter_run(tmp_path, tiny_config, dataset, deterministic):
    full = load_checkpoint(train(tiny_config, dataset, tmp_path / "full"))

    short = tiny_config.with_overrides(training={"steps": 2})
    train(short, dataset, tmp_path / "half")
    extended = load_checkpoint(train(tiny_config, dataset, tmp_path / "half",
                                     resume=tmp_path / "half" / "latest.pt"))
    assert extended.step == 4
    expected = full.model.state_dict()
    for key, value in extended.model.state_dict().items():
        assert torch.equal(value, expected[key]), key

    lines = (tmp_path / "half" / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(line)["step"] for line in lines] == [1, 2, 3, 4]


def test_resume_drops_log_records_past_the_checkpoint(tmp_path, tiny_config, dataset):
    run = tmp_path / "run"
    train(tiny_config, dataset, run)
    train(tiny_config, dataset, run, resume=run / checkpoint_name(2))
    lines = (run / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(line)["step"] for line in lines] == [1, 2, 3, 4]


def test_resume_rejects_checkpoint_past_the_target(tmp_path, tiny_config, dataset):
    train(tiny_config, dataset, tmp_path / "run")
    short = tiny_config.with_overrides(training={"steps": 2})
    with pytest.raises(ValueError):
        train(short, dataset, tmp_path / "short", resume=tmp_path / "run" / "latest.pt")


def test_training_is_reproducible_at_step_100(tmp_path, tiny_config, dataset, deterministic):
    config = tiny_config.with_overrides(training={"steps": 100, "log_interval": 100, "checkpoint_every": 100})
    runs = [load_checkpoint(train(config, dataset, tmp_path / name)) for name in ("a", "b")]
    losses = [json.loads((tmp_path / name / "metrics.jsonl").read_text())["loss"] for name in ("a", "b")]
    assert losses[0] == losses[1]
    expected = runs[0].model.state_dict()
    for key, value in runs[1].model.state_dict().items():
        assert torch.equal(value, expected[key]), key


def test_sensor_mismatch_is_rejected(tiny_config, dataset):
    sensor = SensorSpec(16, 64, math.radians(10.0), math.radians(30.0), 1.0, 60.0)
    with pytest.raises(ValueError):
        load_training_set(dataset, dataclasses.replace(tiny_config, sensor=sensor))


def test_rig_mismatch_is_rejected(tiny_config, dataset):
    cameras = (dataclasses.replace(tiny_config.cameras[0], name="left"),)
    with pytest.raises(ValueError):
        load_training_set(dataset, dataclasses.replace(tiny_config, cameras=cameras))


def test_training_set_shapes(tiny_config, dataset):
    data = load_training_set(dataset, tiny_config)
    assert len(data) == 3
    assert tuple(data.x0.shape) == (3, 2, tiny_config.sensor.h, tiny_config.sensor.w)
    assert data.x0.min() >= -1.0 and data.x0.max() <= 1.0
    assert data.dataset_hash
    assert [v.name for v in data.batch_views([2])[0]] == ["front"]


def test_non_finite_loss_dumps_state(tmp_path, tiny_config, dataset, monkeypatch):
    monkeypatch.setattr(training.F, "mse_loss", lambda pred, target: (pred * float("nan")).mean())
    with pytest.raises(TrainingDiverged) as excinfo:
        train(tiny_config, dataset, tmp_path / "run")
    assert excinfo.value.step == 1
    assert excinfo.value.path.exists()
    assert load_checkpoint(excinfo.value.path).step == 0
