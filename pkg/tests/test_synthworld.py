import itertools

import numpy as np
import pytest

from config import SceneConfig, WeatherConfig
from rangeview import NO_LABEL, lidar_to_camera
from synthworld import (
    SKY,
    SceneError,
    boxes_overlap,
    choose_weather,
    corrupt_lidar,
    fog_survival,
    generate_sample,
    label_points,
    raycast_lidar,
    sample_scene,
)


@pytest.fixture
def clean_sample(tiny_config):
    return generate_sample(11, tiny_config, "clean")


def test_generation_is_deterministic(tiny_config):
    a = generate_sample(4, tiny_config, "fog")
    b = generate_sample(4, tiny_config, "fog")
    assert a.range_image == b.range_image
    np.testing.assert_array_equal(a.cloud.points, b.cloud.points)
    np.testing.assert_array_equal(a.views[0].image, b.views[0].image)


def test_different_seeds_give_different_scenes(tiny_config):
    assert sample_scene(1, tiny_config.scene) != sample_scene(2, tiny_config.scene)


def test_boxes_do_not_overlap(tiny_config):
    for seed in range(5):
        scene = sample_scene(seed, tiny_config.scene)
        for a, b in itertools.combinations(scene.boxes, 2):
            assert not boxes_overlap(a, b)


def test_no_interpenetration_over_many_seeds():
    knobs = SceneConfig()
    for seed in range(10_000):
        boxes = sample_scene(seed, knobs).boxes
        assert not any(boxes_overlap(a, b) for a, b in itertools.combinations(boxes, 2)), seed


def test_scan_stays_in_range(clean_sample, sensor):
    depth = np.linalg.norm(clean_sample.cloud.points, axis=1)
    assert len(depth) > 0
    assert depth.min() >= sensor.d_min
    assert depth.max() <= sensor.d_max


def test_ground_truth_labels_agree_with_scene(tiny_config, clean_sample):
    scene = sample_scene(11, tiny_config.scene)
    labels = label_points(scene, clean_sample.cloud.points)
    agreement = np.mean(labels == clean_sample.cloud.labels)
    assert agreement >= 0.99


def test_far_points_are_unlabelled(tiny_config):
    scene = sample_scene(0, tiny_config.scene)
    far = np.array([[0.0, 0.0, 500.0]])
    assert label_points(scene, far)[0] == NO_LABEL


def test_reference_maps_ignore_weather(tiny_config):
    clean = generate_sample(8, tiny_config, "clean")
    for weather in ("night", "fog", "snow"):
        other = generate_sample(8, tiny_config, weather)
        np.testing.assert_array_equal(clean.sem_maps[0], other.sem_maps[0])
        np.testing.assert_array_equal(clean.depth_maps[0], other.depth_maps[0])


def test_night_darkens_the_image(tiny_config):
    clean = generate_sample(8, tiny_config, "clean")
    night = generate_sample(8, tiny_config, "night")
    assert night.views[0].image.mean() < clean.views[0].image.mean()
    assert night.range_image == clean.range_image


def test_sky_is_marked_in_both_maps(clean_sample):
    sem, depth = clean_sample.sem_maps[0], clean_sample.depth_maps[0]
    assert np.array_equal(sem == SKY, ~np.isfinite(depth))
    assert np.all(depth[np.isfinite(depth)] > 0)


def test_depth_map_matches_projected_scan(clean_sample):
    view, depth = clean_sample.views[0], clean_sample.depth_maps[0]
    proj = lidar_to_camera(clean_sample.cloud, view)
    cols = np.floor(proj.u[proj.valid]).astype(int)
    rows = np.floor(proj.v[proj.valid]).astype(int)
    ref = depth[rows, cols]
    ok = np.isfinite(ref)
    assert ok.sum() > 0
    rel = np.abs(proj.z_cam[proj.valid][ok] - ref[ok]) / ref[ok]
    assert np.median(rel) < 0.05


def test_zero_fog_is_identity(clean_sample):
    foggy = corrupt_lidar(clean_sample, "fog", WeatherConfig(fog_beta=0.0))
    np.testing.assert_array_equal(foggy.cloud.points, clean_sample.cloud.points)
    np.testing.assert_array_equal(foggy.cloud.intensity, clean_sample.cloud.intensity)
    assert foggy.weather == "fog"


def test_zero_snow_is_identity(clean_sample):
    snowy = corrupt_lidar(clean_sample, "snow", WeatherConfig(snow_rate=0.0))
    np.testing.assert_array_equal(snowy.cloud.points, clean_sample.cloud.points)
    np.testing.assert_array_equal(snowy.cloud.labels, clean_sample.cloud.labels)


def test_fog_drops_far_returns(clean_sample):
    foggy = corrupt_lidar(clean_sample, "fog", WeatherConfig(fog_beta=0.1, fog_scatter_fraction=0.0))
    assert len(foggy.cloud) < len(clean_sample.cloud)
    assert foggy.cloud.intensity.max() <= clean_sample.cloud.intensity.max()


def test_snow_adds_near_clutter(clean_sample, sensor):
    snowy = corrupt_lidar(clean_sample, "snow", WeatherConfig(snow_rate=0.2, snow_max=5.0))
    new = len(snowy.cloud) - np.sum(np.isin(snowy.cloud.points, clean_sample.cloud.points).all(axis=1))
    assert new > 0
    near = np.linalg.norm(snowy.cloud.points, axis=1) <= 5.0
    assert near.sum() >= new


def test_corruption_leaves_views_untouched(clean_sample):
    foggy = corrupt_lidar(clean_sample, "fog")
    assert foggy.views is clean_sample.views
    assert foggy.sem_maps is clean_sample.sem_maps


@pytest.mark.parametrize("weather", ["clean", "night", "rain"])
def test_lidar_corruption_rejects_other_weather(clean_sample, weather):
    with pytest.raises(SceneError):
        corrupt_lidar(clean_sample, weather)


def test_unknown_weather_is_rejected(tiny_config):
    with pytest.raises(SceneError):
        generate_sample(0, tiny_config, "hail")


def test_weather_choice_follows_single_tag_mix():
    assert {choose_weather(s, {"fog": 1.0}) for s in range(10)} == {"fog"}


def test_raycast_range_image_matches_cloud(tiny_config):
    scene = sample_scene(2, tiny_config.scene)
    cloud, image = raycast_lidar(scene, tiny_config.sensor)
    assert image.valid.sum() <= len(cloud)
    assert image.valid.sum() > 0.5 * len(cloud)


def test_fog_survival_matches_attenuation():
    beta = WeatherConfig().fog_beta
    survived = fog_survival(np.full(100_000, 20.0), beta, np.random.default_rng(0))
    expected = np.exp(-beta * 20.0)
    assert abs(survived.mean() - expected) <= 0.01 * expected


def test_fog_survival_is_certain_at_zero_density():
    assert fog_survival(np.full(100, 30.0), 0.0, np.random.default_rng(1)).all()
