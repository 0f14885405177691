import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from omnivfi.loss import ConfigError, WssL1Config, erp_weights, wss_l1, wss_l1_gradient_check


def t(x):
    return torch.as_tensor(x, dtype=torch.float64)


def test_zero_when_equal():
    x = torch.rand(2, 3, 8, 16, dtype=torch.float64)
    assert wss_l1(x, x.clone()).item() == 0.0


@pytest.mark.parametrize("d, expected", [(0.5, 0.125), (2.0, 1.5)])
def test_branch_values(d, expected):
    pred = torch.zeros(3, 4, 8, dtype=torch.float64)
    gt = torch.full_like(pred, d)
    assert wss_l1(pred, gt, torch.ones(4, 8, dtype=torch.float64)).item() == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("beta", [0.1, 1.0, 10.0])
def test_branch_continuity(beta):
    cfg = WssL1Config(huber_delta=beta)
    ones = torch.ones(1, 1, dtype=torch.float64)
    quad = 0.5 * beta * beta / beta
    lin = beta - 0.5 * beta
    assert abs(quad - lin) <= 1e-12
    at = wss_l1(t([[0.0]]), t([[beta]]), ones, cfg).item()
    below = wss_l1(t([[0.0]]), t([[beta - 1e-9]]), ones, cfg).item()
    assert at == pytest.approx(0.5 * beta, abs=1e-12)
    assert below == pytest.approx(0.5 * beta, abs=1e-8)


@pytest.mark.parametrize("sign", [1.0, -1.0])
def test_gradient_continuity_at_kink(sign):
    beta = 1.0
    grads = []
    for d in (beta - 1e-7, beta + 1e-7):
        pred = t([[0.0]]).requires_grad_(True)
        wss_l1(pred, t([[sign * d]]), torch.ones(1, 1, dtype=torch.float64)).backward()
        grads.append(pred.grad.item())
    # d/dpred with d = gt - pred is -sign(d) on both sides
    assert grads[0] == pytest.approx(-sign, abs=1e-6)
    assert grads[1] == pytest.approx(-sign, abs=1e-12)


def test_config_validation():
    with pytest.raises(ConfigError):
        WssL1Config(huber_delta=0)
    with pytest.raises(ConfigError):
        WssL1Config(reduction="max")


def test_shape_and_weight_errors():
    x = torch.zeros(3, 4, 8)
    with pytest.raises(ValueError):
        wss_l1(x, torch.zeros(3, 4, 9))
    with pytest.raises(ValueError):
        wss_l1(x, x, torch.ones(4, 9))
    with pytest.raises(ValueError):
        wss_l1(x, x, torch.zeros(4, 8))


@settings(max_examples=50, deadline=None)
@given(
    st.integers(0, 2**31 - 1),
    st.floats(0.05, 5.0),
    st.floats(0.1, 10.0),
)
def test_properties(seed, beta, scale):
    g = torch.Generator().manual_seed(seed)
    pred = torch.randn(2, 3, 4, 8, generator=g, dtype=torch.float64)
    gt = torch.randn(2, 3, 4, 8, generator=g, dtype=torch.float64)
    psi = erp_weights(4, 8)
    cfg = WssL1Config(huber_delta=beta)
    base = wss_l1(pred, gt, psi, cfg)
    assert wss_l1(pred, gt, scale * psi, cfg).item() == pytest.approx(scale * base.item(), rel=1e-12)
    total = wss_l1(pred, gt, psi, WssL1Config(beta, "sum")).item()
    assert total == pytest.approx(base.item() * pred.numel(), rel=1e-12)
    ones = torch.ones(4, 8, dtype=torch.float64)
    ref = F.smooth_l1_loss(pred, gt, beta=beta)
    assert wss_l1(pred, gt, ones, cfg).item() == pytest.approx(ref.item(), rel=1e-12, abs=1e-15)


def test_default_psi_is_erp_map():
    pred = torch.zeros(3, 6, 12, dtype=torch.float64)
    gt = torch.full_like(pred, 0.5)
    psi = erp_weights(6, 12)
    assert wss_l1(pred, gt).item() == pytest.approx(wss_l1(pred, gt, psi).item(), rel=1e-15)
    assert wss_l1(pred, gt).item() == pytest.approx(0.125 * psi.mean().item(), rel=1e-12)


@pytest.mark.parametrize("beta", [0.1, 1.0, 10.0])
def test_gradient_check_passes(beta):
    ok, err = wss_l1_gradient_check((4, 8, 3), WssL1Config(huber_delta=beta), tol=1e-4)
    assert ok, err
