"""Closed-form ERP distortion quantities.

Every row of an equirectangular frame samples one latitude. The area
stretching between the sphere and the ERP plane is ``cos(latitude)``, and the
per-row condition map evaluates it at pixel-center latitudes. The same grid is
reused as the spherical weight map by the metrics and the loss.
"""
import math

import numpy as np

__all__ = [
    "stretching_ratio",
    "pixel_center_latitudes",
    "condition_map",
    "resize_condition_map",
    "weight_map",
    "export_condition_map",
]


def stretching_ratio(y):
    """Area stretching ratio of ERP at latitude ``y`` (radians).

    Accepts a scalar or an array; the longitude does not enter.
    """
    arr = np.asarray(y, dtype=np.float64)
    if np.any(~np.isfinite(arr)) or np.any(np.abs(arr) >= math.pi / 2):
        raise ValueError("latitude must lie strictly inside (-pi/2, pi/2)")
    out = np.cos(arr)
    return float(out) if out.ndim == 0 else out


def _check_dims(height, width):
    for name, v in (("height", height), ("width", width)):
        if int(v) != v or v < 1:
            raise ValueError(f"{name} must be a positive integer, got {v!r}")


def pixel_center_latitudes(height):
    m = np.arange(height, dtype=np.float64)
    return (m + 0.5 - height / 2) / height * math.pi


def condition_map(height, width):
    """Distortion condition map of shape ``(1, height, width)``, float64.

    The returned array is read-only.
    """
    _check_dims(height, width)
    rows = np.cos(pixel_center_latitudes(int(height)))
    values = np.broadcast_to(rows[None, :, None], (1, int(height), int(width))).copy()
    values.flags.writeable = False
    return values


def resize_condition_map(cond, height, width):
    """Condition map for a new resolution.

    Recomputed from the closed form; ``cond`` only has to be a valid map.
    """
    cond = np.asarray(cond)
    if cond.ndim != 3 or cond.shape[0] != 1:
        raise ValueError(f"expected a (1, M, N) condition map, got shape {cond.shape}")
    return condition_map(height, width)


def weight_map(height, width):
    """Spherical per-pixel weights, ``(height, width)``; the condition map without its channel axis."""
    return condition_map(height, width)[0]


def export_condition_map(path, cond):
    """Write a condition map as raw little-endian float32, row-major."""
    cond = np.asarray(cond)
    arr = np.ascontiguousarray(cond.reshape(cond.shape[-2:]), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(arr.tobytes(order="C"))
    return arr.shape
