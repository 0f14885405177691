import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st
from torchvision.ops import deform_conv2d

from omnivfi.model import (
    BilateralFlow,
    CheckpointError,
    DFTLayer,
    DistortionGuard,
    OmniVFINet,
    backward_warp,
    count_parameters,
    dft_apply,
    load_checkpoint,
    save_checkpoint,
)
from omnivfi.model.layers import deform_conv

SMALL = (8, 12, 16, 24)


def small_net(**kw):
    torch.manual_seed(0)
    return OmniVFINet(SMALL, **kw)


def randomize_heads(model, scale=0.05, seed=1):
    """Give zero-initialized heads and condition branches non-trivial weights."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if "head" in name or "offset_net" in name or "param_net" in name:
                p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return model


# --- warping -----------------------------------------------------------------


def test_warp_zero_flow_is_identity():
    src = torch.rand(2, 3, 8, 16)
    out = backward_warp(src, torch.zeros(2, 2, 8, 16))
    assert torch.allclose(out, src, atol=1e-6)


def test_warp_wraps_longitude():
    ramp = torch.arange(8.0).repeat(4, 1)[None, None]
    flow = torch.zeros(1, 2, 4, 8)
    flow[:, 0] = 1.0
    out = backward_warp(ramp, flow)[0, 0]
    expected = torch.tensor([1.0, 2, 3, 4, 5, 6, 7, 0]).repeat(4, 1)
    assert torch.equal(out, expected)


def test_warp_clamps_latitude():
    src = torch.arange(4.0).view(1, 1, 4, 1).expand(1, 1, 4, 8).contiguous()
    up = torch.zeros(1, 2, 4, 8)
    up[:, 1] = -1.0
    assert torch.equal(backward_warp(src, up)[0, 0, 0], torch.zeros(8))
    down = torch.zeros(1, 2, 4, 8)
    down[:, 1] = 1.0
    assert torch.equal(backward_warp(src, down)[0, 0, 3], torch.full((8,), 3.0))


def test_warp_matches_grid_sample_in_interior():
    g = torch.Generator().manual_seed(0)
    src = torch.rand(2, 3, 10, 12, generator=g, dtype=torch.float64)
    flow = torch.rand(2, 2, 10, 12, generator=g, dtype=torch.float64) * 2 - 1
    ys, xs = torch.meshgrid(torch.arange(10.0), torch.arange(12.0), indexing="ij")
    gx, gy = xs + flow[:, 0], ys + flow[:, 1]
    inside = (gx >= 0) & (gx <= 11) & (gy >= 0) & (gy <= 9)
    grid = torch.stack((2 * gx / 11 - 1, 2 * gy / 9 - 1), -1)
    ref = F.grid_sample(src, grid, mode="bilinear", align_corners=True)
    out = backward_warp(src, flow)
    mask = inside[:, None].expand_as(out)
    assert torch.allclose(out[mask], ref[mask], atol=1e-12)


def test_warp_rejects_non_finite():
    flow = torch.zeros(1, 2, 4, 4)
    flow[0, 0, 1, 1] = float("nan")
    with pytest.raises(FloatingPointError):
        backward_warp(torch.zeros(1, 1, 4, 4), flow)


# --- DFT -------------------------------------------------------------------


def test_dft_examples():
    f = torch.full((2, 3, 4, 4), 0.5)
    one, zero = torch.ones_like(f), torch.zeros_like(f)
    assert torch.equal(dft_apply(f, one, zero), f)
    assert torch.equal(dft_apply(f, 2 * one, one), torch.full_like(f, 2.0))
    assert torch.equal(dft_apply(f, zero, f * 3), f * 3)
    with pytest.raises(ValueError):
        dft_apply(f, one[:, :2], zero)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_dft_inverse(seed):
    g = torch.Generator().manual_seed(seed)
    f = torch.randn(2, 4, 5, 6, generator=g, dtype=torch.float64)
    alpha = (torch.rand(f.shape, generator=g, dtype=torch.float64) + 0.1) * torch.sign(torch.randn(f.shape, generator=g))
    beta = torch.randn(f.shape, generator=g, dtype=torch.float64)
    back = dft_apply(dft_apply(f, alpha, beta), 1 / alpha, -beta / alpha)
    assert torch.allclose(back, f, atol=1e-5)


def test_identity_initialized_dft_layer():
    layer = DFTLayer(6)
    f = torch.randn(2, 6, 8, 16)
    cond = torch.rand(1, 1, 8, 16)
    assert torch.equal(layer(f, cond), f)
    alpha, beta = layer.params(cond, f.shape)
    assert alpha.shape == f.shape and beta.shape == f.shape


# --- DistortionGuard ---------------------------------------------------------


def test_deform_conv_matches_torchvision():
    g = torch.Generator().manual_seed(3)
    x = torch.randn(2, 5, 7, 12, generator=g, dtype=torch.float64)
    w = torch.randn(4, 5, 3, 3, generator=g, dtype=torch.float64)
    b = torch.randn(4, generator=g, dtype=torch.float64)
    off = torch.randn(1, 18, 7, 12, generator=g, dtype=torch.float64) * 2
    ours = deform_conv(x, off, w, b)
    ref = deform_conv2d(x, off.expand(2, -1, -1, -1), w, b, padding=(1, 1))
    assert torch.allclose(ours, ref, atol=1e-12)


def test_zero_offsets_reduce_to_plain_conv():
    block = DistortionGuard(8)
    x = torch.randn(2, 8, 16, 32)
    cond = torch.rand(1, 1, 16, 32)
    assert torch.count_nonzero(block.offsets(cond)) == 0
    plain = F.conv2d(x, block.conv.weight, block.conv.bias, padding=1)
    assert (block.deform(x, cond) - plain).abs().max() < 1e-6


def test_offsets_depend_only_on_condition():
    net = randomize_heads(small_net())
    seen = []
    hook = net.guards[0].offset_net.register_forward_hook(lambda m, i, o: seen.append(o.clone()))
    x = torch.rand(1, 3, 32, 64)
    net.extract_pyramid(x)
    net.extract_pyramid(torch.rand(1, 3, 32, 64))
    conds = net.conditions(32, 64)
    conds[0] = conds[0] * 0.5
    net.extract_pyramid(x, conds)
    hook.remove()
    assert torch.equal(seen[0], seen[1])
    assert not torch.equal(seen[0], seen[2])


# --- network -----------------------------------------------------------------


def test_pyramid_shapes():
    net = OmniVFINet()
    pyr = net.extract_pyramid(torch.rand(1, 3, 64, 128))
    assert [tuple(p.shape) for p in pyr] == [(1, 32, 32, 64), (1, 48, 16, 32), (1, 64, 8, 16), (1, 96, 4, 8)]


def test_indivisible_dims_rejected():
    net = small_net()
    with pytest.raises(ValueError):
        net.extract_pyramid(torch.rand(1, 3, 40, 64))
    with pytest.raises(ValueError):
        net(torch.rand(1, 3, 32, 64), torch.rand(1, 3, 32, 128))


def test_pyramid_vertical_flip_equivariance():
    net = small_net().double()
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, nn.Conv2d):
                m.weight.copy_(0.5 * (m.weight + m.weight.flip(-2)))
    x = torch.rand(2, 3, 32, 64, dtype=torch.float64)
    conds = net.conditions(32, 64, dtype=torch.float64)
    flipped_conds = [c.flip(-2) for c in conds]
    a = net.extract_pyramid(x, conds)
    b = net.extract_pyramid(x.flip(-2), flipped_conds)
    for pa, pb in zip(a, b):
        assert torch.allclose(pa.flip(-2), pb, atol=1e-10)


def test_decode_level_initialization_and_residual_identity():
    net = small_net()
    pyr0 = net.extract_pyramid(torch.rand(1, 3, 32, 64))
    pyr1 = net.extract_pyramid(torch.rand(1, 3, 32, 64))
    conds = net.conditions(32, 64)
    top = net.levels - 1
    flow, feat, _ = net.decode_level(top, pyr0[top], pyr1[top], None, None, conds[top])
    assert torch.count_nonzero(flow.f_t0) == 0 and torch.count_nonzero(flow.f_t1) == 0

    prev = BilateralFlow(torch.randn(1, 2, 2, 4), torch.randn(1, 2, 2, 4), torch.randn(1, 1, 2, 4)).upsample()
    feat_up = F.interpolate(feat, scale_factor=2, mode="bilinear", align_corners=False)
    lvl = top - 1
    out, _, _ = net.decode_level(lvl, pyr0[lvl], pyr1[lvl], prev, feat_up, conds[lvl])
    assert torch.equal(out.f_t0, prev.f_t0) and torch.equal(out.f_t1, prev.f_t1)
    with pytest.raises(ValueError):
        net.decode_level(lvl, pyr0[lvl], pyr1[lvl], None, feat_up, conds[lvl])
    with pytest.raises(ValueError):
        net.decode_level(lvl, pyr0[lvl + 1], pyr1[lvl + 1], prev, feat_up, conds[lvl])


def test_flow_upsampling_doubles_vectors():
    f = BilateralFlow(torch.ones(1, 2, 2, 4), -torch.ones(1, 2, 2, 4), torch.zeros(1, 1, 2, 4)).upsample()
    assert f.f_t0.shape == (1, 2, 4, 8)
    assert torch.allclose(f.f_t0, torch.full_like(f.f_t0, 2.0))
    assert torch.allclose(f.f_t1, torch.full_like(f.f_t1, -2.0))


def test_shape_audit_default_schedule():
    net = OmniVFINet()
    out = net(torch.rand(1, 3, 64, 128), torch.rand(1, 3, 64, 128))
    table = [(2, 4, 8), (2, 8, 16), (2, 16, 32), (2, 32, 64)]
    for flow, (c, h, w) in zip(out.level_flows, table):
        assert tuple(flow.f_t0.shape[1:]) == (c, h, w) == tuple(flow.f_t1.shape[1:])
        assert tuple(flow.mask_logit.shape[1:]) == (1, h, w)
        assert 0 <= flow.fusion_mask.min() and flow.fusion_mask.max() <= 1
    assert out.pred.shape == out.residual.shape == (1, 3, 64, 128)


def test_constant_input_gives_constant_output():
    net = randomize_heads(small_net())
    with torch.no_grad():
        for name, p in net.named_parameters():
            if "frame_head" in name:
                p.zero_()
    c = torch.full((1, 3, 32, 64), 0.37)
    out = net.interpolate(c, c)
    assert torch.allclose(out, c, atol=1e-6)


def test_initial_output_is_zero_flow_blend():
    net = small_net()
    i1, i2 = torch.rand(2, 3, 32, 64), torch.rand(2, 3, 32, 64)
    out = net(i1, i2)
    mask = out.flow.fusion_mask
    assert torch.count_nonzero(out.flow.f_t0) == 0
    assert (out.pred - (mask * i1 + (1 - mask) * i2)).abs().max() < 1e-6


def test_inference_is_deterministic():
    torch.set_num_threads(1)
    net = randomize_heads(small_net())
    i1, i2 = torch.rand(1, 3, 32, 64), torch.rand(1, 3, 32, 64)
    assert torch.equal(net.interpolate(i1, i2), net.interpolate(i1, i2))


def test_parameter_count_ordering():
    counts = {v: count_parameters(v) for v in ("both-off", "guard-only", "ftb-only", "both-on")}
    assert counts["both-on"] > counts["guard-only"]
    assert counts["both-on"] > counts["ftb-only"]
    assert min(counts, key=counts.get) == "both-off"


@pytest.mark.parametrize("guard, ftb", [(False, False), (True, False), (False, True), (True, True)])
def test_condition_dependency_audit(guard, ftb):
    net = randomize_heads(small_net(guard=guard, ftb=ftb))
    conds = [c.requires_grad_(True) for c in net.conditions(32, 64)]
    out = net(torch.rand(1, 3, 32, 64), torch.rand(1, 3, 32, 64), conds)
    (out.pred.sum() + sum(f.f_t0.sum() for f in out.level_flows)).backward()
    used = [c.grad is not None and bool(c.grad.abs().sum() > 0) for c in conds]
    if guard or ftb:
        assert all(used)
    else:
        assert not any(used)


def test_checkpoint_roundtrip_and_flag_check(tmp_path):
    net = randomize_heads(small_net(ftb=False))
    path = save_checkpoint(tmp_path / "m.pt", net, step=3)
    loaded, payload = load_checkpoint(path, guard=True, ftb=False)
    assert payload["step"] == 3 and payload["architecture"]["channels"] == list(SMALL)
    for (k, a), (_, b) in zip(net.state_dict().items(), loaded.state_dict().items()):
        assert torch.equal(a, b), k
    with pytest.raises(CheckpointError):
        load_checkpoint(path, ftb=True)
    torch.save({"format": "other"}, tmp_path / "bad.pt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.pt")
