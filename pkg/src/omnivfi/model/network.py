from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..geometry import condition_map
from .layers import DistortionGuard, OmniFTB, backward_warp

DEFAULT_CHANNELS = (32, 48, 64, 96)


@dataclass
class BilateralFlow:
    f_t0: torch.Tensor
    f_t1: torch.Tensor
    mask_logit: torch.Tensor

    @property
    def fusion_mask(self):
        return torch.sigmoid(self.mask_logit)

    @classmethod
    def zeros(cls, b, h, w, like):
        z = like.new_zeros(b, 2, h, w)
        return cls(z, z.clone(), like.new_zeros(b, 1, h, w))

    def upsample(self):
        """Double the resolution; flow vectors are in pixels so they double too."""

        def up(t):
            return F.interpolate(t, scale_factor=2, mode="bilinear", align_corners=False)

        return BilateralFlow(2 * up(self.f_t0), 2 * up(self.f_t1), up(self.mask_logit))


@dataclass
class InterpolationOutput:
    pred: torch.Tensor
    flow: BilateralFlow
    level_flows: list
    residual: torch.Tensor


class OmniVFINet(nn.Module):
    """Pyramid encoder with DistortionGuard blocks and an OmniFTB flow decoder.

    ``guard`` and ``ftb`` toggle the two condition-map consumers; with both
    off the network never reads the condition map.
    """

    def __init__(self, channels=DEFAULT_CHANNELS, guard=True, ftb=True):
        super().__init__()
        self.channels = tuple(int(c) for c in channels)
        self.guard = bool(guard)
        self.ftb = bool(ftb)
        self.levels = len(self.channels)

        self.down = nn.ModuleList()
        self.guards = nn.ModuleList()
        cin = 3
        for c in self.channels:
            # 4x4 stride-2 keeps each output pixel centered on its 2x2 input cell
            self.down.append(nn.Sequential(nn.Conv2d(cin, c, 4, 2, 1), nn.PReLU(c)))
            self.guards.append(DistortionGuard(c, deformable=self.guard))
            cin = c

        self.decoders = nn.ModuleList()
        for i, c in enumerate(self.channels):
            coarser = self.channels[i + 1] if i + 1 < self.levels else 0
            self.decoders.append(OmniFTB(2 * c + 5 + coarser, c, use_dft=self.ftb, final=(i == 0)))

    @property
    def flags(self):
        return {"guard": self.guard, "ftb": self.ftb}

    def check_input(self, frame):
        if frame.dim() != 4 or frame.shape[1] != 3:
            raise ValueError(f"expected B x 3 x H x W frames, got {tuple(frame.shape)}")
        h, w = frame.shape[-2:]
        k = 2**self.levels
        if h % k or w % k:
            raise ValueError(f"frame {h}x{w} not divisible by 2^{self.levels}={k}")

    def conditions(self, height, width, dtype=torch.float32, device=None):
        """Per-level condition maps, finest level first, each ``1 x 1 x h x w``."""
        return [
            torch.tensor(condition_map(height >> (i + 1), width >> (i + 1)))[None].to(dtype=dtype, device=device)
            for i in range(self.levels)
        ]

    def extract_pyramid(self, frame, conds=None):
        self.check_input(frame)
        if conds is None:
            conds = self.conditions(*frame.shape[-2:], dtype=frame.dtype, device=frame.device)
        feats = []
        x = frame
        for down, guard, cond in zip(self.down, self.guards, conds):
            x = guard(down(x), cond)
            feats.append(x)
        return feats

    def decode_level(self, level, phi0, phi1, prev, feat_up, cond):
        """Refine bilateral flows on one level (0 = finest).

        ``prev`` is the coarser estimate already brought to this resolution, or
        None on the coarsest level. Returns ``(flow, feature, frame_residual)``.
        """
        if phi0.shape != phi1.shape or phi0.shape[1] != self.channels[level]:
            raise ValueError(f"level {level} features have shapes {tuple(phi0.shape)}, {tuple(phi1.shape)}")
        b, _, h, w = phi0.shape
        if prev is None:
            if level != self.levels - 1:
                raise ValueError("only the coarsest level starts without a previous flow")
            prev = BilateralFlow.zeros(b, h, w, phi0)
        elif prev.f_t0.shape[-2:] != (h, w):
            raise ValueError(f"previous flow at {tuple(prev.f_t0.shape[-2:])}, level {level} is {(h, w)}")
        parts = [
            backward_warp(phi0, prev.f_t0),
            backward_warp(phi1, prev.f_t1),
            prev.f_t0,
            prev.f_t1,
            prev.mask_logit,
        ]
        if feat_up is not None:
            parts.append(feat_up)
        d_flow, d_mask, feat, frame_res = self.decoders[level](torch.cat(parts, 1), cond)
        flow = BilateralFlow(prev.f_t0 + d_flow[:, :2], prev.f_t1 + d_flow[:, 2:], prev.mask_logit + d_mask)
        return flow, feat, frame_res

    def forward(self, i1, i2, conds=None):
        self.check_input(i1)
        if i1.shape != i2.shape:
            raise ValueError(f"input frames differ in shape: {tuple(i1.shape)} vs {tuple(i2.shape)}")
        if conds is None:
            conds = self.conditions(*i1.shape[-2:], dtype=i1.dtype, device=i1.device)
        pyr0 = self.extract_pyramid(i1, conds)
        pyr1 = self.extract_pyramid(i2, conds)

        flow, feat, frame_res = None, None, None
        level_flows = []
        for level in reversed(range(self.levels)):
            if flow is not None:
                flow = flow.upsample()
                feat = F.interpolate(feat, scale_factor=2, mode="bilinear", align_corners=False)
            flow, feat, frame_res = self.decode_level(level, pyr0[level], pyr1[level], flow, feat, conds[level])
            level_flows.append(flow)

        full = flow.upsample()
        mask = full.fusion_mask
        blend = mask * backward_warp(i1, full.f_t0) + (1 - mask) * backward_warp(i2, full.f_t1)
        pred = (blend + frame_res).clamp(0, 1)
        return InterpolationOutput(pred=pred, flow=full, level_flows=level_flows, residual=frame_res)

    def interpolate(self, i1, i2):
        """Eval-mode prediction of the middle frame; wrap in ``torch.no_grad()`` when gradients are not needed."""
        was_training = self.training
        self.eval()
        try:
            return self.forward(i1, i2).pred
        finally:
            self.train(was_training)


ABLATION_VARIANTS = {
    "both-off": (False, False),
    "guard-only": (True, False),
    "ftb-only": (False, True),
    "both-on": (True, True),
}


def count_parameters(variant="both-on", channels=DEFAULT_CHANNELS):
    guard, ftb = ABLATION_VARIANTS[variant] if isinstance(variant, str) else variant
    model = OmniVFINet(channels, guard=guard, ftb=ftb)
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
