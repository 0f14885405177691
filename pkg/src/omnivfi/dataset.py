"""Triplet construction, motion-extent measurement and setting stratification."""
import fnmatch
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Protocol

import numpy as np

from .frames import read_frame

log = logging.getLogger(__name__)

SETTINGS = ("Easy", "Middle", "Hard", "Extreme")
# lower edges of the half-open buckets [0,2) [2,3) [3,4) [4,inf)
SETTING_EDGES = (0.0, 2.0, 3.0, 4.0)
POLICIES = ("none", "drop_last_one", "drop_first_and_last")
EXTENT_STAT = "mean_abs_vertical_flow"
FRAME_SUFFIXES = (".png",)


class DataError(ValueError):
    pass


class PipelineError(RuntimeError):
    def __init__(self, sample_id, message):
        super().__init__(f"{sample_id}: {message}")
        self.sample_id = sample_id


@dataclass(frozen=True)
class Triplet:
    sample_id: str
    clip_id: str
    i1: str
    ig: str
    i2: str
    motion_extent: float | None = None
    setting: str | None = None


@dataclass
class TripletManifest:
    entries: list
    split: str = "train"
    source_tag: str = ""
    meta: dict = field(default_factory=dict)
    base_dir: Path | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        ids = [t.sample_id for t in self.entries]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate sample ids in manifest")

    def counts(self):
        counts = dict.fromkeys(SETTINGS, 0)
        for t in self.entries:
            if t.setting is not None:
                counts[t.setting] += 1
        return counts

    def clips(self):
        return sorted({t.clip_id for t in self.entries})

    def save(self, path):
        meta = dict(self.meta)
        if self.base_dir is not None:
            meta["root"] = os.path.relpath(Path(self.base_dir).resolve(), Path(path).resolve().parent)
        header = {"kind": "meta", "split": self.split, "source_tag": self.source_tag, **meta}
        lines = [json.dumps(header, sort_keys=True)]
        lines += [json.dumps({"kind": "triplet", **asdict(t)}, sort_keys=True) for t in self.entries]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path, check_files=False):
        header, entries = None, []
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            kind = rec.pop("kind", "triplet")
            if kind == "meta":
                header = rec
            else:
                entries.append(Triplet(**rec))
        header = header or {}
        split = header.pop("split", "train")
        source_tag = header.pop("source_tag", "")
        manifest = cls(entries, split, source_tag, header)
        manifest.base_dir = root = manifest.root(path)
        if check_files:
            missing = [p for t in entries for p in (t.i1, t.ig, t.i2) if not (root / p).is_file()]
            if missing:
                raise DataError(f"{len(missing)} frame files referenced by {path} are missing, e.g. {missing[0]}")
        return manifest

    def root(self, manifest_path):
        """Directory that frame paths are relative to."""
        return (Path(manifest_path).parent / self.meta.get("root", ".")).resolve()

    def write_list(self, path):
        Path(path).write_text("".join(f"{t.i1} {t.ig} {t.i2}\n" for t in self.entries))


def build_triplets(frames, policy="none", clip_id="clip"):
    """Cut an ordered frame list into consecutive, non-overlapping triplets."""
    if policy not in POLICIES:
        raise ValueError(f"unknown drop policy {policy!r}; expected one of {POLICIES}")
    frames = list(frames)
    if policy == "drop_last_one":
        frames = frames[:-1]
    elif policy == "drop_first_and_last":
        frames = frames[1:-1]
    if len(frames) < 3:
        log.warning("clip %s: %d frames left after %s, no triplets", clip_id, len(frames), policy)
        return []
    return [
        Triplet(f"{clip_id}-{k:04d}", clip_id, str(frames[3 * k]), str(frames[3 * k + 1]), str(frames[3 * k + 2]))
        for k in range(len(frames) // 3)
    ]


class FlowProvider(Protocol):
    name: str

    def estimate(self, i1, i2):
        """Flow from ``i1`` to ``i2`` as a ``2 x H x W`` array (x, y) in pixels."""


class OracleFlowProvider:
    """Known constant motion, for synthetic fixtures."""

    name = "oracle"

    def __init__(self, dx=0.0, dy=0.0):
        self.dx, self.dy = float(dx), float(dy)

    def estimate(self, i1, i2):
        h, w = np.shape(i1)[:2]
        flow = np.empty((2, h, w))
        flow[0], flow[1] = self.dx, self.dy
        return flow


class BlockMatchingFlow:
    """Coarse-to-fine block matching on luminance with parabolic sub-pixel refinement.

    Horizontal displacements wrap around the ERP seam; vertical ones clamp.
    """

    name = "block"

    def __init__(self, block=8, radius=3, levels=3):
        self.block, self.radius, self.levels = block, radius, levels
        r = radius
        cands = [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]
        # ties resolve to the smallest displacement
        self._cands = sorted(cands, key=lambda d: (d[0] ** 2 + d[1] ** 2, d))

    @staticmethod
    def _gray(img):
        img = np.asarray(img, dtype=np.float64)
        return img.mean(axis=2) if img.ndim == 3 else img

    @staticmethod
    def _half(img):
        h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
        img = img[:h, :w]
        return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])

    def _costs(self, a, b, init, offsets):
        bs = self.block
        nby, nbx = init.shape[1:]
        h, w = b.shape
        py = np.arange(nby)[:, None, None, None] * bs + np.arange(bs)[None, None, :, None]
        px = np.arange(nbx)[None, :, None, None] * bs + np.arange(bs)[None, None, None, :]
        ref = a[py, px]
        iy = np.rint(init[1]).astype(int)[:, :, None, None]
        ix = np.rint(init[0]).astype(int)[:, :, None, None]
        out = np.empty((len(offsets), nby, nbx))
        for k, (dy, dx) in enumerate(offsets):
            ty = np.clip(py + iy + dy, 0, h - 1)
            tx = (px + ix + dx) % w
            out[k] = np.abs(ref - b[ty, tx]).mean(axis=(2, 3))
        return out

    def _match(self, a, b, init):
        costs = self._costs(a, b, init, self._cands)
        best = np.asarray(self._cands)[np.argmin(costs, axis=0)]
        flow = np.rint(init) + np.stack([best[..., 1], best[..., 0]])
        return flow

    def _subpixel(self, a, b, flow):
        out = flow.astype(np.float64)
        for axis, (d_lo, d_hi) in ((1, ((-1, 0), (1, 0))), (0, ((0, -1), (0, 1)))):
            c = self._costs(a, b, flow, [(0, 0), d_lo, d_hi])
            denom = c[1] - 2 * c[0] + c[2]
            ok = (denom > 1e-12) & (c[0] <= c[1]) & (c[0] <= c[2])
            shift = np.where(ok, 0.5 * (c[1] - c[2]) / np.where(ok, denom, 1.0), 0.0)
            out[axis] += np.clip(shift, -0.5, 0.5)
        return out

    def estimate(self, i1, i2):
        a, b = self._gray(i1), self._gray(i2)
        if a.shape != b.shape:
            raise ValueError(f"frame shapes differ: {a.shape} vs {b.shape}")
        h, w = a.shape
        pyr = [(a, b)]
        while len(pyr) < self.levels and min(pyr[-1][0].shape) // 2 >= 2 * self.block:
            pyr.append((self._half(pyr[-1][0]), self._half(pyr[-1][1])))
        flow = None
        for lvl, (pa, pb) in reversed(list(enumerate(pyr))):
            nby, nbx = pa.shape[0] // self.block, pa.shape[1] // self.block
            if nby == 0 or nbx == 0:
                raise ValueError(f"frame {h}x{w} too small for block size {self.block}")
            if flow is None:
                init = np.zeros((2, nby, nbx))
            else:
                iy = np.minimum(np.arange(nby) // 2, flow.shape[1] - 1)
                ix = np.minimum(np.arange(nbx) // 2, flow.shape[2] - 1)
                init = 2 * flow[:, iy][:, :, ix]
            flow = self._match(pa, pb, init)
            if lvl == 0:
                flow = self._subpixel(pa, pb, flow)
        ys = np.minimum(np.arange(h) // self.block, flow.shape[1] - 1)
        xs = np.minimum(np.arange(w) // self.block, flow.shape[2] - 1)
        return flow[:, ys][:, :, xs]


FLOW_PROVIDERS = {"oracle": OracleFlowProvider, "block": BlockMatchingFlow}


def motion_extent(i1, i2, fp, sample_id="?"):
    """Mean absolute vertical (latitude) flow between the two input frames."""
    if np.shape(i1) != np.shape(i2):
        raise ValueError(f"{sample_id}: frame shapes differ: {np.shape(i1)} vs {np.shape(i2)}")
    try:
        flow = np.asarray(fp.estimate(i1, i2), dtype=np.float64)
    except Exception as exc:
        raise PipelineError(sample_id, f"flow provider {getattr(fp, 'name', fp)!r} failed: {exc}") from exc
    if flow.ndim != 3 or flow.shape[0] != 2 or not np.all(np.isfinite(flow)):
        raise PipelineError(sample_id, f"flow provider returned an invalid field of shape {flow.shape}")
    return float(np.mean(np.abs(flow[1])))


def setting_for(extent):
    if extent is None or not math.isfinite(extent):
        raise DataError(f"motion extent {extent!r} is not a finite number")
    if extent < 0:
        raise DataError(f"negative motion extent {extent}")
    idx = int(np.searchsorted(SETTING_EDGES, extent, side="right")) - 1
    return SETTINGS[idx]


def stratify(triplets):
    """Assign each triplet its setting; returns ``(triplets, buckets)``.

    ``buckets`` maps every setting name (in benchmark order) to its triplets.
    """
    out = [replace(t, setting=setting_for(t.motion_extent)) for t in triplets]
    buckets = {s: [] for s in SETTINGS}
    for t in out:
        buckets[t.setting].append(t)
    return out, buckets


@dataclass
class Layout:
    """How to cut clips into triplets and split them.

    ``policies`` maps clip-id glob patterns to drop policies; the first match
    wins and ``default_policy`` applies otherwise.
    """

    default_policy: str = "none"
    policies: dict = field(default_factory=dict)
    test_fraction: float = 0.2
    split_seed: int = 0
    source_tag: str = "custom"

    def policy_for(self, clip_id):
        for pattern, policy in self.policies.items():
            if fnmatch.fnmatchcase(clip_id, pattern):
                return policy
        return self.default_policy

    @classmethod
    def from_config(cls, cfg):
        """Build from ``layout.*`` dotted keys (see ``config.parse_kv``)."""
        layout = cls()
        for key, value in cfg.items():
            if not key.startswith("layout."):
                continue
            name = key[len("layout.") :]
            if name.startswith("policy."):
                layout.policies[name[len("policy.") :]] = value
            elif name == "policy":
                layout.default_policy = value
            elif name == "test_fraction":
                layout.test_fraction = float(value)
            elif name == "split_seed":
                layout.split_seed = int(value)
            elif name == "source_tag":
                layout.source_tag = str(value)
            else:
                raise ValueError(f"unknown layout key {key!r}")
        for policy in [layout.default_policy, *layout.policies.values()]:
            if policy not in POLICIES:
                raise ValueError(f"unknown drop policy {policy!r}")
        return layout


def split_clips(clip_ids, test_fraction, seed):
    """Random clip-level split; returns ``(train_ids, test_ids)`` sorted."""
    clip_ids = sorted(clip_ids)
    n_test = int(round(test_fraction * len(clip_ids)))
    if test_fraction > 0 and len(clip_ids) > 1:
        n_test = min(max(n_test, 1), len(clip_ids) - 1)
    order = np.random.default_rng(seed).permutation(len(clip_ids))
    test = sorted(clip_ids[i] for i in order[:n_test])
    train = sorted(c for c in clip_ids if c not in set(test))
    return train, test


def _clip_frames(clip_dir):
    return sorted(p for p in clip_dir.iterdir() if p.is_file() and p.suffix.lower() in FRAME_SUFFIXES)


def ingest_clip(root, clip_id, layout, provider_for_clip):
    """Triplets with extents for one clip. Raises on unreadable or inconsistent frames.

    ``provider_for_clip`` maps the clip directory to a ``FlowProvider``.
    """
    clip_dir = Path(root) / clip_id
    paths = _clip_frames(clip_dir)
    triplets = build_triplets([p.relative_to(root).as_posix() for p in paths], layout.policy_for(clip_id), clip_id)
    if not triplets:
        return []
    needed = sorted({p for t in triplets for p in (t.i1, t.ig, t.i2)})
    cache, shape = {}, None
    for rel in needed:
        try:
            img = read_frame(Path(root) / rel)
        except Exception as exc:
            raise DataError(f"cannot read {rel}: {exc}") from exc
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise DataError(f"{rel} has shape {img.shape}, clip frames are {shape}")
        cache[rel] = img
    fp = provider_for_clip(clip_dir)
    return [replace(t, motion_extent=motion_extent(cache[t.i1], cache[t.i2], fp, t.sample_id)) for t in triplets]


def oracle_from_sidecar(clip_dir):
    """Oracle provider reading ``motion.json`` (``{"dx": .., "dy": ..}``, i1->i2 pixels) from a clip."""
    motion = json.loads((Path(clip_dir) / "motion.json").read_text())
    return OracleFlowProvider(motion.get("dx", 0.0), motion.get("dy", 0.0))


def make_flow_provider(name):
    """Per-clip provider factory for a provider name."""
    if name == "oracle":
        return oracle_from_sidecar
    if name == "block":
        provider = BlockMatchingFlow()
        return lambda clip_dir: provider
    raise ValueError(f"unknown flow provider {name!r}; expected one of {sorted(FLOW_PROVIDERS)}")


@dataclass
class IngestResult:
    train: TripletManifest
    test: TripletManifest
    errors: list


def ingest(root, layout=None, flow_provider="block", out_dir=None, workers=1):
    """Scan ``<root>/<clip_id>/*.png``, build and stratify triplets, write manifests.

    Clips that fail are recorded in ``errors`` and skipped. Output files go to
    ``out_dir`` (default ``root``): ``manifest.{train,test}.jsonl`` and
    ``tri_{train,test}list.txt``.
    """
    root = Path(root).resolve()
    layout = layout or Layout()
    out_dir = Path(out_dir).resolve() if out_dir else root
    out_dir.mkdir(parents=True, exist_ok=True)
    provider_name = flow_provider if isinstance(flow_provider, str) else getattr(flow_provider, "name", "custom")
    if isinstance(flow_provider, str):
        factory = make_flow_provider(flow_provider)
    else:
        factory = lambda clip_dir: flow_provider  # noqa: E731
    clip_ids = sorted(p.name for p in root.iterdir() if p.is_dir())

    def run(clip_id):
        try:
            return clip_id, ingest_clip(root, clip_id, layout, factory), None
        except Exception as exc:
            log.error("skipping clip %s: %s", clip_id, exc)
            return clip_id, [], {"clip_id": clip_id, "error": str(exc)}

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, clip_ids))
    else:
        results = [run(c) for c in clip_ids]
    results.sort(key=lambda r: r[0])

    per_clip = {cid: trips for cid, trips, err in results if err is None and trips}
    errors = [err for _, _, err in results if err is not None]
    train_ids, test_ids = split_clips(per_clip, layout.test_fraction, layout.split_seed)

    meta = {
        "root": os.path.relpath(root, out_dir),
        "extent_stat": EXTENT_STAT,
        "flow_provider": provider_name,
        "split_seed": layout.split_seed,
    }
    manifests = {}
    for split, ids in (("train", train_ids), ("test", test_ids)):
        entries, _ = stratify([t for cid in ids for t in per_clip[cid]])
        manifests[split] = TripletManifest(entries, split, layout.source_tag, dict(meta), base_dir=root)
        manifests[split].save(out_dir / f"manifest.{split}.jsonl")
        manifests[split].write_list(out_dir / f"tri_{split}list.txt")
    return IngestResult(manifests["train"], manifests["test"], errors)
