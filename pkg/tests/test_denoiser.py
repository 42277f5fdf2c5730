import math

import numpy as np
import pytest
import torch

from config import AlignmentParams, DenoiserConfig, EncoderConfig
from denoiser import (
    CircularConv2d,
    PanoramicCoherence,
    PanoramicUNet,
    VeilaModel,
    count_trainable,
    denoise_step_predict,
)
from encoders import ConditioningError
from rangeview import CameraView, SensorSpec
from synthworld import generate_sample


@pytest.fixture
def views(tiny_config):
    return [generate_sample(seed, tiny_config, "clean").views for seed in (1, 2)]


@pytest.fixture
def noisy(tiny_config):
    gen = torch.Generator().manual_seed(0)
    x = torch.randn(2, 2, tiny_config.sensor.h, tiny_config.sensor.w, generator=gen)
    return x, torch.tensor([3, 40])


def test_circular_conv_wraps_in_azimuth():
    conv = CircularConv2d(1, 1)
    torch.nn.init.ones_(conv.weight)
    torch.nn.init.zeros_(conv.bias)
    x = torch.zeros(1, 1, 3, 8)
    x[0, 0, 1, 0] = 1.0
    out = conv(x)[0, 0]
    assert out[1, -1] == 1.0
    assert out[1, 1] == 1.0
    assert out[:, 4].abs().sum() == 0.0


def test_unet_is_equivariant_to_azimuth_roll(tiny_config, noisy):
    torch.manual_seed(0)
    unet = PanoramicUNet(tiny_config.denoiser).double()
    x, t = noisy
    x = x.double()
    out = unet(x, t)
    rolled = unet(torch.roll(x, 8, dims=-1), t)
    torch.testing.assert_close(rolled, torch.roll(out, 8, dims=-1), atol=1e-9, rtol=1e-9)


def test_sizes_must_divide_by_eight(tiny_config):
    unet = PanoramicUNet(tiny_config.denoiser)
    with pytest.raises(ValueError):
        unet(torch.zeros(1, 2, 16, 60), torch.tensor([1]))


def test_coherence_block_is_identity_at_init():
    block = PanoramicCoherence(16, heads=2)
    x = torch.randn(1, 16, 2, 8)
    assert torch.equal(block(x), x)
    weights, _ = block.attention(x)
    torch.testing.assert_close(weights.sum(-1), torch.ones(1, 2, 16))


def test_conditioning_has_no_effect_at_init(tiny_config, views, noisy):
    torch.manual_seed(0)
    model = VeilaModel(tiny_config.sensor, tiny_config.denoiser, tiny_config.alignment, tiny_config.encoders)
    x, t = noisy
    with torch.no_grad():
        conditioned = denoise_step_predict(model, x, views, t)
        unconditioned = model(x, t, None)
    assert torch.equal(conditioned, unconditioned)


def test_unconditional_model_matches_plain_backbone(tiny_config):
    den = DenoiserConfig(base_width=8, channel_mult=(1, 1, 2, 2), pfc=False, gcma_scales=())
    model = VeilaModel(tiny_config.sensor, den, tiny_config.alignment, tiny_config.encoders)
    assert not model.conditional
    assert model.condition([[]]) is None
    assert count_trainable(model) == count_trainable(PanoramicUNet(den))


def test_frozen_encoders_are_not_trainable(tiny_config):
    model = VeilaModel(tiny_config.sensor, tiny_config.denoiser, tiny_config.alignment, tiny_config.encoders)
    trainable = {id(p) for p in model.trainable_parameters()}
    assert not any(id(p) in trainable for p in model.semantic_encoder.parameters())
    assert not any(id(p) in trainable for p in model.depth_encoder.parameters())
    assert count_trainable(model) > count_trainable(model.unet)


def test_rear_is_unconditioned(tiny_config, views):
    model = VeilaModel(tiny_config.sensor, tiny_config.denoiser, tiny_config.alignment, tiny_config.encoders)
    conditioning = model.condition(views)
    assert set(conditioning.tokens) == {0, 1, 2, 3}
    fraction = conditioning.unconditioned_fraction(0)
    assert 0.0 < fraction < 1.0
    assert not conditioning.tokens[0].conditioned[:, :, 0].any()


def test_condition_rejects_missing_views(tiny_config):
    model = VeilaModel(tiny_config.sensor, tiny_config.denoiser, tiny_config.alignment, tiny_config.encoders)
    with pytest.raises(ConditioningError):
        model.condition([[]])


def test_condition_rejects_ragged_batches(tiny_config, views):
    model = VeilaModel(tiny_config.sensor, tiny_config.denoiser, tiny_config.alignment, tiny_config.encoders)
    extra = CameraView(views[0][0].image, views[0][0].K, views[0][0].T, "front")
    with pytest.raises(ConditioningError):
        model.condition([views[0], views[1] + [extra]])


def test_gradients_flow_into_alignment(tiny_config, views, noisy):
    torch.manual_seed(0)
    model = VeilaModel(tiny_config.sensor, tiny_config.denoiser, tiny_config.alignment, tiny_config.encoders)
    x, t = noisy
    loss = denoise_step_predict(model, x, views, t).square().mean()
    loss.backward()
    zero_conv = model.gcma["0"].zero_conv
    assert zero_conv.weight.grad is not None
    assert np.isfinite(zero_conv.weight.grad.abs().sum().item())
    assert zero_conv.weight.grad.abs().sum().item() > 0


def test_step_rejects_other_range_size(tiny_config, views):
    model = VeilaModel(tiny_config.sensor, tiny_config.denoiser, tiny_config.alignment, tiny_config.encoders)
    x = torch.zeros(2, 2, tiny_config.sensor.h, tiny_config.sensor.w // 2)
    with pytest.raises(ConditioningError):
        denoise_step_predict(model, x, views, torch.tensor([1, 1]))


def test_step_rejects_views_of_another_rig(tiny_config, views, noisy):
    model = VeilaModel(tiny_config.sensor, tiny_config.denoiser, tiny_config.alignment, tiny_config.encoders,
                       rig=["left"])
    x, t = noisy
    with pytest.raises(ConditioningError, match="trained rig"):
        denoise_step_predict(model, x, views, t)


def test_step_needs_one_view_set_per_item(tiny_config, views, noisy):
    model = VeilaModel(tiny_config.sensor, tiny_config.denoiser, tiny_config.alignment, tiny_config.encoders,
                       rig=["front"])
    x, t = noisy
    with pytest.raises(ConditioningError):
        denoise_step_predict(model, x, views[:1], t)


def test_tiny_denoiser_gradients(camera):
    sensor = SensorSpec(8, 16, math.radians(10.0), math.radians(30.0), 1.0, 40.0)
    den = DenoiserConfig(base_width=8, channel_mult=(1, 1, 1, 1), pfc_heads=2)
    encoders = EncoderConfig(semantic_widths=(8, 8, 8, 8), depth_widths=(8, 8, 8, 8))
    alignment = AlignmentParams(num_samples=4, fourier_bands=2, heads=1)
    torch.manual_seed(0)
    model = VeilaModel(sensor, den, alignment, encoders, rig=["front"]).double()

    gen = torch.Generator().manual_seed(1)
    with torch.no_grad():
        # wake the zero-initialized injections so every path carries gradient
        for p in model.trainable_parameters():
            if not p.any():
                p.copy_(0.1 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
        image = np.random.default_rng(2).random((camera.height, camera.width, 3))
        view = CameraView(image, camera.K_matrix, camera.T_matrix, camera.name)
        conditioning = model.condition([[view]])

    x = torch.randn(1, 2, 8, 16, dtype=torch.float64, generator=gen, requires_grad=True)
    t = torch.tensor([5])
    assert torch.autograd.gradcheck(lambda x: model(x, t, conditioning), (x,), rtol=1e-3)
