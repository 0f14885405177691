"""Weighted spherically smooth-L1 loss."""
from dataclasses import dataclass

import numpy as np
import torch

from .geometry import weight_map


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WssL1Config:
    huber_delta: float = 1.0
    reduction: str = "mean"

    def __post_init__(self):
        if not self.huber_delta > 0:
            raise ConfigError(f"loss.huber_delta must be > 0, got {self.huber_delta}")
        if self.reduction not in ("mean", "sum"):
            raise ConfigError(f"loss.reduction must be 'mean' or 'sum', got {self.reduction!r}")


def erp_weights(height, width, like=None):
    w = torch.tensor(weight_map(height, width))
    if like is not None:
        w = w.to(dtype=like.dtype, device=like.device)
    return w


def wss_l1(pred, gt, psi=None, cfg=WssL1Config()):
    """Smooth-L1 between ``pred`` and ``gt`` weighted per pixel by ``psi``.

    ``pred``/``gt`` are ``(..., H, W)`` tensors (typically ``B x 3 x H x W``);
    ``psi`` is ``H x W`` and shared across leading axes. The quadratic branch
    is ``0.5 d^2 / delta``, the linear one ``|d| - 0.5 delta``.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")
    h, w = pred.shape[-2:]
    if psi is None:
        psi = erp_weights(h, w, like=pred)
    else:
        psi = torch.as_tensor(psi, dtype=pred.dtype, device=pred.device)
        if psi.shape != (h, w):
            raise ValueError(f"psi shape {tuple(psi.shape)} does not match frame {(h, w)}")
        if not bool(torch.all(psi > 0)):
            raise ValueError("psi must be strictly positive")
    beta = cfg.huber_delta
    d = gt - pred
    ad = d.abs()
    per_pixel = torch.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta) * psi
    return per_pixel.mean() if cfg.reduction == "mean" else per_pixel.sum()


def wss_l1_gradient_check(shape=(4, 8, 3), cfg=WssL1Config(), tol=1e-4, seed=0, eps=1e-6):
    """Compare autograd against central differences for ``wss_l1`` w.r.t. ``pred``.

    ``shape`` is ``H x W x C``. Sample points keep ``|d|`` at least 1e-3 away
    from the branch point. Returns ``(passed, max_abs_error)``.
    """
    h, w, c = shape
    rng = np.random.default_rng(seed)
    beta = cfg.huber_delta
    gt = rng.uniform(-1.0, 1.0, size=(c, h, w))
    d = rng.uniform(-3 * beta, 3 * beta, size=gt.shape)
    near = np.abs(np.abs(d) - beta) < 1e-3
    while near.any():
        d[near] = rng.uniform(-3 * beta, 3 * beta, size=int(near.sum()))
        near = np.abs(np.abs(d) - beta) < 1e-3
    pred0 = gt - d
    psi = torch.tensor(weight_map(h, w))
    gt_t = torch.from_numpy(gt)

    pred = torch.from_numpy(pred0.copy()).requires_grad_(True)
    wss_l1(pred, gt_t, psi, cfg).backward()
    analytic = pred.grad.numpy()

    numeric = np.empty_like(pred0)
    flat = pred0.reshape(-1)
    out = numeric.reshape(-1)
    with torch.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = wss_l1(torch.from_numpy(pred0), gt_t, psi, cfg).item()
            flat[i] = orig - eps
            fm = wss_l1(torch.from_numpy(pred0), gt_t, psi, cfg).item()
            flat[i] = orig
            out[i] = (fp - fm) / (2 * eps)
    err = float(np.max(np.abs(analytic - numeric)))
    return err <= tol, err
