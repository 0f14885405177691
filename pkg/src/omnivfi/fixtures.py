"""Synthetic ERP content with known motion, for tests and the toy profile."""
import json
from pathlib import Path

import numpy as np

from .frames import write_frame


class SmoothTexture:
    """Sum of random sinusoids, periodic in longitude, evaluated at any sub-pixel position."""

    def __init__(self, width, seed=0, n_waves=12):
        rng = np.random.default_rng(seed)
        self.width = width
        self.kx = rng.integers(3, 13, size=(3, n_waves)) * 2 * np.pi / width
        self.ky = rng.uniform(0.1, 0.5, size=(3, n_waves))
        self.phase = rng.uniform(0, 2 * np.pi, size=(3, n_waves))
        self.amp = rng.uniform(0.5, 1.0, size=(3, n_waves))

    def render(self, height, dx=0.0, dy=0.0):
        """Texture translated by ``(dx, dy)`` pixels, ``height x width x 3`` in [0.05, 0.95]."""
        y = np.arange(height, dtype=np.float64)[:, None, None] - dy
        x = np.arange(self.width, dtype=np.float64)[None, :, None] - dx
        out = np.empty((height, self.width, 3))
        for c in range(3):
            waves = self.amp[c] * np.sin(self.kx[c] * x + self.ky[c] * y + self.phase[c])
            out[:, :, c] = waves.sum(axis=-1) / self.amp[c].sum()
        return 0.5 + 0.45 * out


def synthetic_triplet(height, width, dx, dy, seed=0):
    """``(i1, ig, i2)`` where content moves by ``(dx, dy)`` pixels from i1 to i2."""
    tex = SmoothTexture(width, seed)
    return tex.render(height), tex.render(height, dx / 2, dy / 2), tex.render(height, dx, dy)


TOY_MOTIONS = ((2.0, 1.0), (-3.0, 2.0), (4.0, -1.5), (1.0, 3.0))


def toy_triplets(height=64, width=128, motions=TOY_MOTIONS, seed=0):
    return [synthetic_triplet(height, width, dx, dy, seed + k) for k, (dx, dy) in enumerate(motions)]


def write_clip(root, clip_id, n_frames, height, width, dx, dy, seed=0):
    """Write a clip whose content moves ``(dx, dy)`` per two frames, plus its ``motion.json``."""
    clip_dir = Path(root) / clip_id
    clip_dir.mkdir(parents=True, exist_ok=True)
    tex = SmoothTexture(width, seed)
    for k in range(n_frames):
        write_frame(clip_dir / f"{k:04d}.png", tex.render(height, k * dx / 2, k * dy / 2))
    (clip_dir / "motion.json").write_text(json.dumps({"dx": dx, "dy": dy}))
    return clip_dir


def write_toy_tree(root, height=64, width=128, motions=TOY_MOTIONS, seed=0):
    """One three-frame clip per toy motion; ingests to ``len(motions)`` triplets."""
    for k, (dx, dy) in enumerate(motions):
        write_clip(root, f"toy{k:02d}", 3, height, width, dx, dy, seed + k)
    return Path(root)
