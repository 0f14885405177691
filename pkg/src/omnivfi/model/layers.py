import torch
import torch.nn as nn
import torch.nn.functional as F


def backward_warp(src, flow):
    """Bilinearly sample ``src`` at ``grid + flow``.

    ``src`` is ``B x C x H x W``, ``flow`` is ``B x 2 x H x W`` in pixels with
    channel 0 horizontal and channel 1 vertical. Longitude wraps around the
    seam; latitude is clamped to the first/last row.
    """
    if not bool(torch.isfinite(flow).all()):
        raise FloatingPointError("flow contains non-finite values")
    b, c, h, w = src.shape
    if flow.shape[0] != b or flow.shape[1] != 2 or flow.shape[2:] != src.shape[2:]:
        raise ValueError(f"flow shape {tuple(flow.shape)} incompatible with source {tuple(src.shape)}")
    xs = torch.arange(w, dtype=flow.dtype, device=flow.device).view(1, 1, w)
    ys = torch.arange(h, dtype=flow.dtype, device=flow.device).view(1, h, 1)
    gx = xs + flow[:, 0]
    gy = (ys + flow[:, 1]).clamp(0, h - 1)

    x0 = torch.floor(gx)
    y0 = torch.floor(gy)
    wx = (gx - x0).unsqueeze(1)
    wy = (gy - y0).unsqueeze(1)
    x0 = x0.long().remainder(w)
    x1 = (x0 + 1).remainder(w)
    y0 = y0.long()
    y1 = (y0 + 1).clamp(max=h - 1)

    flat = src.reshape(b, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).reshape(b, 1, h * w).expand(b, c, h * w)
        return flat.gather(2, idx).reshape(b, c, h, w)

    top = gather(y0, x0) * (1 - wx) + gather(y0, x1) * wx
    bottom = gather(y1, x0) * (1 - wx) + gather(y1, x1) * wx
    return top * (1 - wy) + bottom * wy


def dft_apply(f, alpha, beta_shift):
    if f.shape != alpha.shape or f.shape != beta_shift.shape:
        raise ValueError(
            f"DFT operands differ in shape: {tuple(f.shape)}, {tuple(alpha.shape)}, {tuple(beta_shift.shape)}"
        )
    return alpha * f + beta_shift


def deform_conv(x, offset, weight, bias=None, padding=1):
    """Deformable convolution (stride 1) with offsets shared over the batch.

    ``offset`` is ``1 x 2k^2 x H x W`` (or batch-sized with identical rows) in
    the usual layout: for tap ``k`` in row-major kernel order, channel ``2k`` is
    the vertical and ``2k+1`` the horizontal displacement. Samples falling
    outside the frame read zero, as in zero-padded convolution.
    """
    b, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if cin != c:
        raise ValueError(f"weight expects {cin} input channels, got {c}")
    ntap = kh * kw
    off = offset[:1].reshape(ntap, 2, h, w)
    dtype, device = x.dtype, x.device
    ky, kx = torch.meshgrid(
        torch.arange(kh, dtype=dtype, device=device) - padding,
        torch.arange(kw, dtype=dtype, device=device) - padding,
        indexing="ij",
    )
    ys = torch.arange(h, dtype=dtype, device=device).view(1, h, 1) + ky.reshape(ntap, 1, 1) + off[:, 0]
    xs = torch.arange(w, dtype=dtype, device=device).view(1, 1, w) + kx.reshape(ntap, 1, 1) + off[:, 1]
    # normalized coordinates for align_corners=False
    grid = torch.stack(((2 * xs + 1) / w - 1, (2 * ys + 1) / h - 1), dim=-1)
    # tile the samples so pixel (y, x) owns the kh x kw block at (y*kh, x*kw); a
    # stride-kh conv over the tiles then reuses the regular conv kernel, which
    # keeps the zero-offset case bit-identical to a plain conv
    grid = grid.reshape(kh, kw, h, w, 2).permute(2, 0, 3, 1, 4).reshape(1, h * kh, w * kw, 2)
    tiles = F.grid_sample(x, grid.expand(b, -1, -1, -1), mode="bilinear", padding_mode="zeros", align_corners=False)
    return F.conv2d(tiles, weight, bias, stride=(kh, kw))


def conv3x3(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride, 1)


def zero_init(module):
    nn.init.zeros_(module.weight)
    nn.init.zeros_(module.bias)
    return module


class DistortionGuard(nn.Module):
    """Deformable 3x3 conv whose offsets are a function of the condition map only.

    With ``deformable=False`` the offset branch is dropped and the same weights
    run as a plain convolution.
    """

    def __init__(self, channels, deformable=True, hidden=16, kernel_size=3):
        super().__init__()
        self.deformable = deformable
        self.kernel_size = kernel_size
        self.conv = nn.Conv2d(channels, channels, kernel_size, 1, kernel_size // 2)
        if deformable:
            self.offset_net = nn.Sequential(
                conv3x3(1, hidden),
                nn.LeakyReLU(0.1),
                zero_init(conv3x3(hidden, 2 * kernel_size * kernel_size)),
            )
        self.act = nn.PReLU(channels)
        self.post = nn.Sequential(
            conv3x3(channels, channels), nn.PReLU(channels),
            conv3x3(channels, channels), nn.PReLU(channels),
        )

    def offsets(self, cond):
        return self.offset_net(cond)

    def deform(self, x, cond):
        if not self.deformable:
            return self.conv(x)
        return deform_conv(x, self.offsets(cond), self.conv.weight, self.conv.bias, self.kernel_size // 2)

    def forward(self, x, cond):
        return self.post(self.act(self.deform(x, cond)))


class DFTLayer(nn.Module):
    """Per-pixel, per-channel affine transform predicted from the condition map.

    Starts as the identity (scale 1, shift 0).
    """

    def __init__(self, channels, hidden=32):
        super().__init__()
        self.channels = channels
        self.param_net = nn.Sequential(
            nn.Conv2d(1, hidden, 1),
            nn.LeakyReLU(0.1),
            zero_init(nn.Conv2d(hidden, 2 * channels, 1)),
        )

    def params(self, cond, shape):
        p = self.param_net(cond)
        alpha = (1 + p[:, : self.channels]).expand(shape)
        beta_shift = p[:, self.channels :].expand(shape)
        return alpha, beta_shift

    def forward(self, f, cond):
        alpha, beta_shift = self.params(cond, f.shape)
        return dft_apply(f, alpha, beta_shift)


class ResBlock(nn.Module):
    def __init__(self, channels, use_dft):
        super().__init__()
        self.use_dft = use_dft
        self.conv1 = conv3x3(channels, channels)
        self.act = nn.PReLU(channels)
        self.conv2 = conv3x3(channels, channels)
        if use_dft:
            self.dft1 = DFTLayer(channels)
            self.dft2 = DFTLayer(channels)

    def forward(self, x, cond):
        f = self.dft1(x, cond) if self.use_dft else x
        f = self.act(self.conv1(f))
        if self.use_dft:
            f = self.dft2(f, cond)
        return x + self.conv2(f)


class OmniFTB(nn.Module):
    """Decoder block: conv body interleaved with DFT layers plus prediction heads.

    Heads emit a bilateral flow residual (4 ch), a fusion-mask logit residual
    (1 ch) and, on the finest level, a frame residual at twice the level
    resolution. All heads start at zero.
    """

    def __init__(self, in_channels, channels, use_dft=True, n_blocks=1, final=False):
        super().__init__()
        self.conv_in = nn.Sequential(conv3x3(in_channels, channels), nn.PReLU(channels))
        self.blocks = nn.ModuleList([ResBlock(channels, use_dft) for _ in range(n_blocks)])
        self.flow_head = zero_init(conv3x3(channels, 4))
        self.mask_head = zero_init(conv3x3(channels, 1))
        self.frame_head = None
        if final:
            self.frame_head = nn.Sequential(zero_init(conv3x3(channels, 3 * 4)), nn.PixelShuffle(2))

    def forward(self, x, cond):
        x = self.conv_in(x)
        for block in self.blocks:
            x = block(x, cond)
        frame_res = self.frame_head(x) if self.frame_head is not None else None
        return self.flow_head(x), self.mask_head(x), x, frame_res
