import math

import numpy as np
import pytest
import torch

from config import AlignmentParams, camera_extrinsic, pinhole_intrinsic
from encoders import ConditioningError
from gcma import (
    GCMABlock,
    QueryEncoder,
    RaySamples,
    aggregate_value,
    build_query,
    cross_attend,
    depth_bins,
    fourier_dim,
    fourier_encode,
    gather_tokens,
    log_depth_weights,
    sample_features,
    sample_grid,
    sample_ray,
    view_grids,
)
from rangeview import CameraView

PARAMS = AlignmentParams(tau=20.0, num_samples=6, fourier_bands=2, heads=2)


@pytest.fixture
def view(camera):
    image = np.random.default_rng(0).random((camera.height, camera.width, 3))
    return CameraView(image, camera.K_matrix, camera.T_matrix, camera.name)


def test_depth_bins_are_log_uniform(sensor):
    bins = depth_bins(sensor, 8)
    assert np.all(np.diff(bins) > 0)
    assert sensor.d_min < bins[0] and bins[-1] < sensor.d_max
    ratios = bins[1:] / bins[:-1]
    np.testing.assert_allclose(ratios, ratios[0])


def test_single_bin_is_geometric_mean(sensor):
    np.testing.assert_allclose(depth_bins(sensor, 1), [math.sqrt(sensor.d_min * sensor.d_max)])


def test_zero_query_reproduces_depth_weighted_average(sensor, view):
    samples = sample_ray(32, 4, sensor, PARAMS, view)
    assert samples.mask.all()
    feature = torch.randn(4, 8, 24, dtype=torch.float64)
    expected, conditioned = aggregate_value(samples, feature, PARAMS, view.size)
    assert conditioned

    proj = torch.as_tensor(samples.proj, dtype=torch.float64).reshape(1, -1, 1, 1, 2)
    values = sample_features(feature[None], proj, view.size)
    log_w = torch.as_tensor(log_depth_weights(samples.depths, samples.mask, PARAMS.tau)).reshape(1, -1, 1, 1)
    out, flags = cross_attend(torch.zeros(1, 4, 1, 1, dtype=torch.float64), values, log_w, heads=2)
    torch.testing.assert_close(out[0, :, 0, 0], expected)
    assert flags.all()


def test_masked_ray_gives_zero(sensor):
    samples = RaySamples(depth_bins(sensor, 3), np.zeros((3, 3)), np.zeros((3, 2)), np.zeros(3, dtype=bool))
    value, conditioned = aggregate_value(samples, torch.randn(2, 4, 4), PARAMS, (16, 16))
    assert not conditioned
    assert torch.equal(value, torch.zeros(2))


def test_fully_masked_pixel_is_unconditioned():
    values = torch.randn(1, 4, 3, 2, 1)
    log_w = torch.zeros(1, 3, 2, 1)
    log_w[:, :, 1] = -math.inf
    out, conditioned = cross_attend(torch.randn(1, 4, 2, 1), values, log_w, heads=2)
    assert conditioned[0, :, 0].tolist() == [True, False]
    assert torch.equal(out[0, :, 1, 0], torch.zeros(4))
    assert torch.isfinite(out).all()


def test_head_split_must_divide_channels():
    with pytest.raises(ConditioningError):
        cross_attend(torch.zeros(1, 3, 1, 1), torch.zeros(1, 3, 2, 1, 1), torch.zeros(1, 2, 1, 1), heads=2)


def test_attention_gradients():
    gen = torch.Generator().manual_seed(0)
    values = torch.randn(1, 4, 3, 2, 2, dtype=torch.float64, generator=gen, requires_grad=True)
    query = torch.randn(1, 4, 2, 2, dtype=torch.float64, generator=gen, requires_grad=True)
    log_w = torch.log(torch.rand(1, 3, 2, 2, dtype=torch.float64, generator=gen))
    log_w[0, 0, 0, 0] = -math.inf
    assert torch.autograd.gradcheck(lambda q, v: cross_attend(q, v, log_w, heads=2)[0], (query, values))


def test_without_depth_bias_valid_tokens_weigh_equally():
    values = torch.arange(3, dtype=torch.float64).reshape(1, 1, 3, 1, 1)
    log_w = torch.tensor([0.0, -5.0, -math.inf], dtype=torch.float64).reshape(1, 3, 1, 1)
    out, _ = cross_attend(torch.zeros(1, 1, 1, 1, dtype=torch.float64), values, log_w, depth_bias=False)
    assert out.item() == pytest.approx(0.5)


def test_fourier_encoding_layout():
    encoded = fourier_encode(torch.zeros(5, 3), bands=2)
    assert encoded.shape == (5, fourier_dim(AlignmentParams(fourier_bands=2)))
    assert torch.equal(encoded[:, :3], torch.zeros(5, 3))
    # (sin, cos) pairs per band per coordinate
    assert encoded[0, 3:].tolist() == [0.0, 1.0] * 6


def test_sample_grid_masks_rear(sensor, view):
    grid = sample_grid(sensor, view, PARAMS)
    assert grid.mask.shape == (PARAMS.num_samples, sensor.h, sensor.w)
    assert not grid.mask[:, :, 0].any()
    assert grid.mask[:, :, sensor.w // 2].any()
    assert np.all(grid.proj[~grid.mask] == 0.0)


def test_coarse_grid_shape(sensor, view):
    grid = sample_grid(sensor, view, PARAMS, stride=4)
    assert grid.mask.shape == (PARAMS.num_samples, sensor.h // 4, sensor.w // 4)


def test_block_is_identity_at_init(sensor, view):
    block = GCMABlock(8, sensor, 2, PARAMS)
    level = torch.randn(2, 8, sensor.h // 2, sensor.w // 2)
    grids = view_grids(sensor, [[view], [view]], PARAMS, 2)
    features = torch.randn(2, 8, 8, 24)
    tokens = gather_tokens([features], grids, [view.size], sensor, PARAMS)
    assert torch.equal(block(level, tokens), level)
    assert torch.equal(block(level), level)


def test_tokens_flag_rear_pixels(sensor, view):
    grids = view_grids(sensor, [[view]], PARAMS, 1)
    tokens = gather_tokens([torch.randn(1, 4, 8, 24)], grids, [view.size], sensor, PARAMS)
    assert tokens.values.shape == (1, 4, PARAMS.num_samples, sensor.h, sensor.w)
    assert not tokens.conditioned[0, :, 0].any()


def test_mixed_rigs_are_rejected(sensor, view):
    other = CameraView(view.image, pinhole_intrinsic(48.0, 96, 32), camera_extrinsic(0.0), name="left")
    with pytest.raises(ConditioningError):
        view_grids(sensor, [[view], [other]], PARAMS, 1)


def test_query_rays_are_normalized_by_max_range(sensor):
    block = GCMABlock(8, sensor, 2, PARAMS)
    norms = block.ray_points.norm(dim=-1)
    torch.testing.assert_close(norms, torch.full_like(norms, 1.0 / sensor.d_max))


def test_query_encoder_gradients(sensor):
    torch.manual_seed(0)
    encoder = QueryEncoder(4, PARAMS).double()
    with torch.no_grad():
        torch.nn.init.normal_(encoder.mlp[2].weight, std=0.5)
    gen = torch.Generator().manual_seed(1)
    level = torch.randn(1, 4, 2, 3, dtype=torch.float64, generator=gen, requires_grad=True)
    rays = torch.randn(2, 3, 3, dtype=torch.float64, generator=gen).div(sensor.d_max).requires_grad_()
    assert torch.autograd.gradcheck(lambda q, r: build_query(q, r, encoder), (level, rays))


def test_aggregation_gradients(sensor, view):
    samples = sample_ray(32, 4, sensor, PARAMS, view)
    assert samples.mask.any()
    gen = torch.Generator().manual_seed(2)
    feature = torch.randn(3, 8, 24, dtype=torch.float64, generator=gen, requires_grad=True)
    assert torch.autograd.gradcheck(lambda f: aggregate_value(samples, f, PARAMS, view.size)[0], (feature,))
