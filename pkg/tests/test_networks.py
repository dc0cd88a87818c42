import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings, strategies as st

from dadasr.networks import (ArchConfig, Downsampler, ModelState, PatchDiscriminator, StructureError, Upsampler,
                             build_dia, patch_logit_size)

TINY = ArchConfig(channels=4, hourglass_depth=1, mask_channels=4, down_channels=4, down_blocks=1, disc_channels=4)


def seeded(cls, *args, seed=0):
    torch.manual_seed(seed)
    return cls(*args)


@settings(max_examples=10, deadline=None)
@given(st.integers(3, 20), st.integers(3, 20), st.integers(1, 2))
def test_upsampler_shape_contract(h, w, n):
    up = seeded(Upsampler, TINY)
    sr, masks, inters = up(torch.rand(n, 3, h, w))
    assert sr.shape == (n, 3, 4 * h, 4 * w)
    assert masks.shape == (n, 3, 4 * h, 4 * w)
    assert inters.shape == (n, 3, 3, 4 * h, 4 * w)
    torch.testing.assert_close(masks.sum(1), torch.ones(n, 4 * h, 4 * w), atol=1e-6, rtol=0)


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12))
def test_downsampler_shape_contract(h, w):
    d = seeded(Downsampler, TINY)
    assert d(torch.rand(1, 3, 4 * h, 4 * w)).shape == (1, 3, h, w)


def test_downsampler_rejects_non_divisible():
    with pytest.raises(ValueError):
        Downsampler(TINY)(torch.rand(1, 3, 10, 12))


def test_upsampler_rejects_bad_input():
    with pytest.raises(ValueError):
        Upsampler(TINY)(torch.rand(3, 8, 8))


def test_flat_mask_selects_flat_branch():
    up = seeded(Upsampler, TINY)
    x = torch.rand(1, 3, 6, 6)
    masks = torch.zeros(1, 3, 24, 24)
    masks[:, 0] = 1
    sr, _, inters = up(x, masks)
    assert torch.equal(sr, inters[:, 0])


def test_dia_masks_bitwise_equal():
    pre = seeded(Upsampler, TINY)
    state = ModelState(pre, TINY, dia=True)
    with torch.no_grad():
        for p in state.u_t.branches.parameters():
            p.add_(0.1)
    x = torch.rand(2, 3, 8, 8)
    assert state.u_s.mask_gen is state.u_t.mask_gen
    assert torch.equal(state.u_s(x)[1], state.u_t(x)[1])


def test_dia_gradients_accumulate_from_both_branches():
    pre = seeded(Upsampler, TINY)
    state = ModelState(pre, TINY, dia=True)
    x = torch.rand(1, 3, 6, 6)
    w = state.u_s.mask_gen.head.weight
    state.u_s.sr(x).sum().backward()
    g_s = w.grad.clone()
    w.grad = None
    state.u_t.sr(x).sum().backward()
    g_t = w.grad.clone()
    w.grad = None
    (state.u_s.sr(x).sum() + state.u_t.sr(x).sum()).backward()
    torch.testing.assert_close(w.grad, g_s + g_t, atol=1e-10, rtol=1e-6)


def test_dia_one_step_moves_both_masks():
    pre = seeded(Upsampler, TINY)
    on = ModelState(pre, TINY, dia=True)
    off = ModelState(pre, TINY, dia=False)
    x = torch.rand(1, 3, 6, 6)
    moved = {}
    for name, state in (("on", on), ("off", off)):
        before = state.u_t(x)[1].detach().clone()
        opt = torch.optim.SGD(state.u_s.parameters(), lr=1.0)
        state.u_s.sr(x).pow(2).sum().backward()
        opt.step()
        moved[name] = not torch.equal(before, state.u_t(x)[1])
    assert moved == {"on": True, "off": False}


def test_build_dia_rejects_structure_mismatch():
    a, b = Upsampler(TINY), Upsampler(ArchConfig(channels=6, hourglass_depth=1, mask_channels=4))
    with pytest.raises(StructureError):
        build_dia(a, b, a)


def test_patch_logit_size_from_conv_arithmetic():
    def out(n, k, s, p):
        return (n + 2 * p - k) // s + 1
    n = 192
    for _ in range(3):
        n = out(n, 4, 2, 1)
    n = out(n, 4, 1, 1)
    assert n == 23 == patch_logit_size(192)
    d = PatchDiscriminator(3, 4)
    assert d(torch.rand(1, 3, 192, 192)).shape == (1, 1, 23, 23)
    assert d(torch.rand(2, 3, 64, 96)).shape == (2, 1, patch_logit_size(64), patch_logit_size(96))


def test_discriminator_zero_weights_give_zero_logits():
    d = PatchDiscriminator(1, 4)
    with torch.no_grad():
        for p in d.parameters():
            p.zero_()
    assert torch.count_nonzero(d(torch.rand(1, 1, 64, 64))) == 0


def test_discriminator_is_local():
    """A change confined to one corner leaves far-away logits untouched."""
    d = seeded(PatchDiscriminator, 3, 4)
    x = torch.rand(1, 3, 128, 128)
    y = x.clone()
    y[..., :8, :8] += 1.0
    # instance norm couples every position through its statistics, so check with norm disabled
    _without_norm(d)
    a, b = d(x), d(y)
    assert torch.equal(a[..., 8:, 8:], b[..., 8:, 8:])
    assert not torch.equal(a[..., 0, 0], b[..., 0, 0])


def _without_norm(d):
    for m in d.modules():
        if isinstance(m, nn.InstanceNorm2d):
            m.forward = lambda t: t
    return d


def test_discriminator_shift_equivariance():
    """Shifting the input by the total stride (8 px) shifts the logit map by one cell."""
    d = seeded(PatchDiscriminator, 1, 4)
    x = torch.rand(1, 1, 192, 192)
    shifted = torch.roll(x, shifts=(8, 8), dims=(2, 3))
    a, b = d(x), d(shifted)
    # with instance norm the statistics move only through border effects
    assert (a[..., 2:-3, 2:-3] - b[..., 3:-2, 3:-2]).abs().max() < 0.05 * a.abs().max()
    _without_norm(d)
    a, b = d(x), d(shifted)
    assert torch.equal(a[..., 2:-3, 2:-3], b[..., 3:-2, 3:-2])


def test_discriminator_channel_mismatch():
    with pytest.raises(ValueError):
        PatchDiscriminator(1, 4)(torch.rand(1, 3, 32, 32))


def _fd_check(module, x, n_params=6):
    module = module.double()
    x = x.double()
    loss = module(x)
    if isinstance(loss, tuple):
        loss = loss[0]
    weights = torch.linspace(-1, 1, loss.numel(), dtype=torch.float64).reshape(loss.shape)
    (loss * weights).sum().backward()
    params = [p for p in module.parameters()]
    assert sum(p.numel() for p in params) <= 1000
    gen = torch.Generator().manual_seed(0)
    checked = 0
    for p in params:
        idx = torch.randint(p.numel(), (1,), generator=gen).item()
        eps = 1e-6
        flat = p.data.view(-1)
        orig = flat[idx].item()

        def f(v):
            flat[idx] = v
            out = module(x)
            out = out[0] if isinstance(out, tuple) else out
            return (out * weights).sum().item()
        num = (f(orig + eps) - f(orig - eps)) / (2 * eps)
        flat[idx] = orig
        ana = p.grad.view(-1)[idx].item()
        assert abs(num - ana) <= 1e-3 * max(abs(num), abs(ana), 1e-6), (p.shape, num, ana)
        checked += 1
        if checked >= n_params:
            break


def test_fd_gradients_tiny_networks():
    cfg = ArchConfig(channels=2, hourglass_depth=1, branch_blocks=1, mask_channels=2, mask_blocks=1,
                     down_channels=2, down_blocks=1, disc_channels=2)
    # scale 2 keeps the sub-pixel heads small enough for a sub-1e3-parameter upsampler
    up_cfg = ArchConfig(scale=2, channels=1, hourglass_depth=1, branch_blocks=1, mask_channels=1, mask_blocks=1)
    torch.manual_seed(0)
    _fd_check(Upsampler(up_cfg), torch.rand(1, 3, 4, 4), n_params=40)
    _fd_check(Downsampler(cfg), torch.rand(1, 3, 8, 8), n_params=40)
    _fd_check(PatchDiscriminator(3, 2), torch.rand(1, 3, 32, 32), n_params=40)


def test_forward_deterministic():
    up = seeded(Upsampler, TINY)
    x = torch.rand(1, 3, 8, 8)
    assert torch.equal(up.sr(x), up.sr(x))
    assert torch.equal(seeded(Upsampler, TINY).sr(x), up.sr(x))


def test_model_state_frozen_reference():
    pre = seeded(Upsampler, TINY)
    state = ModelState(pre, TINY)
    assert all(not p.requires_grad for p in state.u_s0.parameters())
    assert all(p.requires_grad for p in state.generator_parameters())
    assert set(state.networks()) == {"u_s", "u_t", "d_s", "d_t", "u_s0", "disc_inter_s", "disc_inter_t",
                                     "disc_intra_s", "disc_intra_t"}
    sd = state.state_dict()
    other = ModelState(seeded(Upsampler, TINY, seed=1), TINY)
    other.load_state_dict(sd)
    x = torch.rand(1, 3, 8, 8)
    assert torch.equal(other.u_t.sr(x), state.u_t.sr(x))
    with pytest.raises(StructureError):
        other.load_state_dict({"u_s": sd["u_s"]})


def test_u_s_and_u_t_start_equal_to_pretrained():
    pre = seeded(Upsampler, TINY)
    state = ModelState(pre, TINY)
    x = torch.rand(1, 3, 8, 8)
    ref = pre.sr(x)
    assert torch.equal(state.u_s.sr(x), ref) and torch.equal(state.u_t.sr(x), ref)
    assert np.isclose(sum(p.numel() for p in state.u_s.mask_gen.parameters()),
                      sum(p.numel() for p in pre.mask_gen.parameters()))
