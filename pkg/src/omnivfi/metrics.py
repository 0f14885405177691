"""PSNR, SSIM and their spherically weighted variants for ERP frames.

Frames are ``H x W x C`` (or ``H x W``) arrays in ``[0, 1]``; integer inputs are
rescaled by their dtype range on the way in. All arithmetic is float64.
"""
import csv
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .geometry import weight_map

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
REPORT_COLUMNS = ("setting", "sample_id", "psnr", "ssim", "ws_psnr", "ws_ssim")


@dataclass(frozen=True)
class MetricReport:
    psnr: float
    ssim: float
    ws_psnr: float
    ws_ssim: float


def to_float_frame(img):
    """Normalize an image to float64 in [0, 1] with a trailing channel axis."""
    arr = np.asarray(img)
    if np.issubdtype(arr.dtype, np.integer):
        arr = arr.astype(np.float64) / np.iinfo(arr.dtype).max
    else:
        arr = arr.astype(np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"expected an HxW or HxWxC frame, got shape {arr.shape}")
    return arr


def _pair(a, b):
    a, b = to_float_frame(a), to_float_frame(b)
    if a.shape != b.shape:
        raise ValueError(f"frame shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _weights(w, shape):
    w = np.asarray(w, dtype=np.float64)
    if w.shape != shape[:2]:
        raise ValueError(f"weight map shape {w.shape} does not match frame {shape[:2]}")
    if not np.all(w > 0):
        raise ValueError("weight map must be strictly positive")
    return w


def _db(mse, peak, cap):
    if mse <= 0:
        return cap
    return min(10.0 * math.log10(peak * peak / mse), cap)


def psnr(a, b, peak=1.0, cap=PSNR_CAP):
    if peak <= 0:
        raise ValueError("peak must be positive")
    a, b = _pair(a, b)
    return _db(float(np.mean((a - b) ** 2)), peak, cap)


def ws_psnr(a, b, w=None, peak=1.0, cap=PSNR_CAP):
    """PSNR with per-pixel spherical weights shared across channels.

    ``w`` defaults to the analytic ERP weight map for the frame size.
    """
    if peak <= 0:
        raise ValueError("peak must be positive")
    a, b = _pair(a, b)
    w = weight_map(*a.shape[:2]) if w is None else _weights(w, a.shape)
    err = np.sum((a - b) ** 2, axis=2)
    wmse = float(np.sum(w * err) / (np.sum(w) * a.shape[2]))
    return _db(wmse, peak, cap)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x, g):
    r = len(g) // 2
    y = correlate1d(x, g, axis=0, mode="constant")
    y = correlate1d(y, g, axis=1, mode="constant")
    return y[r : x.shape[0] - r, r : x.shape[1] - r]


def ssim_map(a, b, peak=1.0):
    """Local SSIM over valid 11x11 Gaussian windows, shape ``(H-10, W-10, C)``."""
    a, b = _pair(a, b)
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"frame {a.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    g = gaussian_window()
    out = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        mu_x, mu_y = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mu_x**2
        syy = _filter_valid(y * y, g) - mu_y**2
        sxy = _filter_valid(x * y, g) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
        den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
        out.append(num / den)
    return np.stack(out, axis=2)


def ssim(a, b, peak=1.0):
    return float(np.mean(ssim_map(a, b, peak)))


def ws_ssim(a, b, w=None, peak=1.0):
    """SSIM with each local window weighted by the weight at its center pixel."""
    a, b = _pair(a, b)
    w = weight_map(*a.shape[:2]) if w is None else _weights(w, a.shape)
    smap = ssim_map(a, b, peak)
    r = SSIM_WINDOW // 2
    wc = w[r : a.shape[0] - r, r : a.shape[1] - r]
    per_channel = [np.sum(wc * smap[:, :, ch]) / np.sum(wc) for ch in range(smap.shape[2])]
    return float(np.mean(per_channel))


def evaluate_pair(pred, gt):
    pred, gt = _pair(pred, gt)
    w = weight_map(*gt.shape[:2])
    return MetricReport(
        psnr=psnr(pred, gt),
        ssim=ssim(pred, gt),
        ws_psnr=ws_psnr(pred, gt, w),
        ws_ssim=ws_ssim(pred, gt, w),
    )


def report_rows(rows):
    """Flatten ``(setting, sample_id, MetricReport)`` tuples into dict rows."""
    return [{"setting": s, "sample_id": sid, **asdict(rep)} for s, sid, rep in rows]


def write_rows_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def write_rows_json(path, rows):
    with open(path, "w") as fh:
        json.dump([{k: row[k] for k in REPORT_COLUMNS} for row in rows], fh, indent=2)
