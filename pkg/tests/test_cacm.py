import numpy as np
import pytest
import torch

from cacm import CACM, ConfidenceMaps, fuse, fuse_level, resize_bilinear
from encoders import ConditioningError, FeaturePyramid

SEMANTIC = (4, 6, 8, 10)
DEPTH = (3, 3, 5, 5)
SHARED = (4, 4, 8, 8)


def pyramid(widths, size=(8, 24), seed=0):
    gen = torch.Generator().manual_seed(seed)
    levels = []
    h, w = size
    for d in widths:
        levels.append(torch.randn(1, d, h, w, generator=gen))
        h, w = -(-h // 2), -(-w // 2)
    return FeaturePyramid(levels)


def test_fusion_matches_weighted_average():
    f_s = torch.full((1, 2, 1, 1), 1.0)
    f_d = torch.full((1, 2, 1, 1), 3.0)
    fused = fuse_level(f_s, f_d, torch.tensor(0.5).view(1, 1, 1, 1), torch.tensor(0.25).view(1, 1, 1, 1), 0.0)
    assert torch.allclose(fused, torch.full_like(fused, (0.5 + 0.75) / 0.75))


def test_equal_confidence_gives_mean():
    f_s, f_d = torch.randn(2, 4, 3, 3), torch.randn(2, 4, 3, 3)
    c = torch.full((2, 1, 3, 3), 0.7)
    assert torch.allclose(fuse_level(f_s, f_d, c, c, 0.0), (f_s + f_d) / 2, atol=1e-6)


def test_negative_delta_is_rejected():
    x = torch.zeros(1, 1, 2, 2)
    with pytest.raises(ConditioningError):
        fuse_level(x, x, x, x, -1e-3)


def test_fuse_checks_level_counts():
    x = torch.zeros(1, 1, 2, 2)
    with pytest.raises(ConditioningError):
        fuse([x, x], [x], ConfidenceMaps([x, x], [x, x]))


def test_resize_is_identity_at_same_size():
    x = torch.randn(1, 2, 4, 4)
    assert resize_bilinear(x, (4, 4)) is x
    assert resize_bilinear(x, (8, 8)).shape == (1, 2, 8, 8)


@pytest.mark.parametrize("mode", ["cacm", "semantic", "depth", "concat"])
def test_modes_produce_shared_widths(mode):
    module = CACM(SEMANTIC, DEPTH, SHARED, mode=mode)
    out = module(pyramid(SEMANTIC), pyramid(DEPTH, size=(4, 12), seed=1))
    assert out.widths == SHARED
    assert out.sizes == pyramid(SEMANTIC).sizes


def test_fused_output_lies_between_branches():
    torch.manual_seed(0)
    module = CACM(SEMANTIC, DEPTH, SHARED)
    shared_s, shared_d = module.project_to_shared(pyramid(SEMANTIC), pyramid(DEPTH, seed=1))
    conf = module.estimate_confidence(shared_s, shared_d)
    fused = fuse(shared_s, shared_d, conf, 0.0)
    for fs, fd, f in zip(shared_s, shared_d, fused):
        lo, hi = torch.minimum(fs, fd), torch.maximum(fs, fd)
        assert torch.all(f >= lo - 1e-5) and torch.all(f <= hi + 1e-5)
    for c in conf.c_s + conf.c_d:
        assert torch.all((c > 0) & (c < 1))


def test_ablation_has_no_confidence():
    module = CACM(SEMANTIC, DEPTH, SHARED, mode="semantic")
    assert module.proj_d is None
    with pytest.raises(ConditioningError):
        module.estimate_confidence([], [])


def test_unknown_mode_is_rejected():
    with pytest.raises(ConditioningError):
        CACM(SEMANTIC, DEPTH, SHARED, mode="sum")


def test_gradients_reach_confidence_heads():
    module = CACM(SEMANTIC, DEPTH, SHARED)
    out = module(pyramid(SEMANTIC), pyramid(DEPTH, seed=2))
    sum(level.square().sum() for level in out.levels).backward()
    assert all(np.isfinite(p.grad.abs().sum().item()) for p in module.conf_s.parameters())
    assert any(p.grad.abs().sum().item() > 0 for p in module.conf_s.parameters())


def test_fusion_is_convex_at_scale():
    gen = torch.Generator().manual_seed(3)
    f_s, f_d = torch.randn(2, 100_000, generator=gen, dtype=torch.float64)
    c_s, c_d = torch.rand(2, 100_000, generator=gen, dtype=torch.float64) + 1e-3
    fused = fuse_level(f_s, f_d, c_s, c_d, 0.0)
    assert torch.all(fused >= torch.minimum(f_s, f_d) - 1e-12)
    assert torch.all(fused <= torch.maximum(f_s, f_d) + 1e-12)


def test_fusion_gradients():
    gen = torch.Generator().manual_seed(4)
    inputs = [torch.randn(1, 3, 2, 2, generator=gen, dtype=torch.float64, requires_grad=True) for _ in range(2)]
    conf = [(torch.rand(1, 1, 2, 2, generator=gen, dtype=torch.float64) + 0.1).requires_grad_() for _ in range(2)]
    assert torch.autograd.gradcheck(lambda a, b, c, d: fuse_level(a, b, c, d, 1e-6), (*inputs, *conf))


def test_module_gradients_through_projection_confidence_and_fusion():
    torch.manual_seed(0)
    module = CACM(SEMANTIC, DEPTH, SHARED).double()
    gen = torch.Generator().manual_seed(6)

    def levels(widths, size):
        out, (h, w) = [], size
        for d in widths:
            out.append(torch.randn(1, d, h, w, generator=gen, dtype=torch.float64, requires_grad=True))
            h, w = -(-h // 2), -(-w // 2)
        return out

    # depth levels at half resolution exercise the bilinear resize
    inputs = levels(SEMANTIC, (4, 6)) + levels(DEPTH, (2, 3))

    def run(*tensors):
        fused = module(FeaturePyramid(list(tensors[:4])), FeaturePyramid(list(tensors[4:])))
        return tuple(fused.levels)

    assert torch.autograd.gradcheck(run, tuple(inputs))
