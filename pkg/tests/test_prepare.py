import numpy as np
import pytest

import prepare
from prepare import (
    FILES,
    MANIFEST,
    DatasetGenerator,
    GeneratedEntry,
    cmd_gen_data,
    load_cloud,
    load_range_image,
    load_reference_maps,
    load_views,
    read_dataset_config,
    read_manifest,
    read_stats,
    sample_seed,
    write_generated_set,
)
from rangeview import unproject
from synthworld import choose_weather, generate_sample


@pytest.fixture
def dataset(tmp_path, tiny_config):
    out = tmp_path / "data"
    cmd_gen_data(tiny_config, 3, out, num_workers=1)
    return out


def test_sample_seeds_do_not_collide():
    assert sample_seed(0, 5) == 5
    assert sample_seed(2, 0) != sample_seed(1, 999_999)


def test_layout(dataset, tiny_config):
    manifest = read_manifest(dataset)
    assert manifest["sample_id"].to_list() == ["000000", "000001", "000002"]
    assert set(manifest["kind"].to_list()) == {"reference"}
    assert "K_front" in manifest.columns and "T_front" in manifest.columns
    assert (dataset / FILES).exists()
    assert not (dataset / "temp").exists()
    assert read_dataset_config(dataset) == tiny_config

    stats = read_stats(dataset)
    assert stats["n_samples"] == "3"
    assert len(stats["dataset_hash"]) == 32


def test_samples_reload_exactly(dataset, tiny_config):
    row = read_manifest(dataset).row(1, named=True)
    expected = generate_sample(sample_seed(tiny_config.seed, 1), tiny_config)
    assert row["seed"] == sample_seed(tiny_config.seed, 1)
    assert row["n_points"] == len(expected.cloud)
    assert load_range_image(dataset, row) == expected.range_image

    cloud = load_cloud(dataset, row)
    np.testing.assert_allclose(cloud.points, expected.cloud.points, atol=1e-5)
    np.testing.assert_array_equal(cloud.labels, expected.cloud.labels)

    views = load_views(dataset, row)
    assert [v.name for v in views] == ["front"]
    np.testing.assert_array_equal(views[0].image, expected.views[0].image)
    np.testing.assert_allclose(views[0].K, expected.views[0].K)
    np.testing.assert_allclose(views[0].T, expected.views[0].T, atol=1e-12)

    sem, depth = load_reference_maps(dataset, row)["front"]
    np.testing.assert_array_equal(sem, expected.sem_maps[0])
    np.testing.assert_array_equal(depth, expected.depth_maps[0])


def test_empty_dataset(tmp_path, tiny_config):
    manifest = cmd_gen_data(tiny_config, 0, tmp_path / "empty", num_workers=1)
    assert len(manifest) == 0
    assert "K_front" in manifest.columns
    assert len(read_manifest(tmp_path / "empty")) == 0
    assert read_stats(tmp_path / "empty")["n_samples"] == "0"


def test_negative_count_is_rejected(tmp_path, tiny_config):
    with pytest.raises(ValueError):
        DatasetGenerator(tiny_config, tmp_path / "data", 1).generate(-1)


def test_same_config_same_hash(tmp_path, tiny_config, dataset):
    again = tmp_path / "again"
    cmd_gen_data(tiny_config, 3, again, num_workers=1)
    assert read_stats(again)["dataset_hash"] == read_stats(dataset)["dataset_hash"]


def test_worker_count_does_not_change_output(tmp_path, tiny_config, dataset):
    parallel = tmp_path / "parallel"
    cmd_gen_data(tiny_config, 3, parallel, num_workers=2)
    assert read_stats(parallel)["dataset_hash"] == read_stats(dataset)["dataset_hash"]
    assert read_manifest(parallel).equals(read_manifest(dataset))


def test_seed_changes_hash(tmp_path, tiny_config, dataset):
    other = tmp_path / "other"
    cmd_gen_data(tiny_config.with_overrides(seed=4), 3, other, num_workers=1)
    assert read_stats(other)["dataset_hash"] != read_stats(dataset)["dataset_hash"]


def test_existing_directory_is_replaced(tmp_path, tiny_config):
    out = tmp_path / "data"
    out.mkdir()
    (out / "stale.txt").write_text("old")
    cmd_gen_data(tiny_config, 1, out, num_workers=1)
    assert not (out / "stale.txt").exists()
    assert (out / MANIFEST).exists()


def test_failed_samples_remove_output(tmp_path, tiny_config, monkeypatch):
    def broken(seed, config):
        raise RuntimeError("scene exploded")

    monkeypatch.setattr(prepare, "generate_sample", broken)
    out = tmp_path / "data"
    with pytest.raises(RuntimeError):
        cmd_gen_data(tiny_config, 2, out, num_workers=1)
    assert not out.exists()


def test_generated_set(tmp_path, tiny_config, dataset):
    row = read_manifest(dataset).row(0, named=True)
    image = load_range_image(dataset, row)
    views = load_views(dataset, row)
    entry = GeneratedEntry(image, seed=row["seed"], source=str(dataset), source_id=row["sample_id"],
                           calibrations={v.name: (v.K, v.T) for v in views})
    out = tmp_path / "generated"
    manifest = write_generated_set(out, [entry], tiny_config, {"checkpoint_md5": "f00"})

    written = manifest.row(0, named=True)
    assert written["kind"] == "generated"
    assert written["source_id"] == "000000"
    assert written["n_points"] == int(image.valid.sum())
    assert load_range_image(out, written) == image
    assert len(load_cloud(out, written)) == len(unproject(image))
    assert load_cloud(out, written).labels is None
    assert read_stats(out)["checkpoint_md5"] == "f00"
    assert written["views"] == "front"
    assert written["K_front"] == row["K_front"]


def test_weather_mix_is_sampled_in_proportion(tiny_config):
    mix = {"clean": 0.5, "fog": 0.25, "snow": 0.25}
    n = 1000
    tags = [choose_weather(sample_seed(tiny_config.seed, i), mix) for i in range(n)]
    for tag, p in mix.items():
        sigma = np.sqrt(n * p * (1 - p))
        assert abs(tags.count(tag) - n * p) <= 3 * sigma, tag
