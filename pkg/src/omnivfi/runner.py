"""Training loop, benchmark evaluation and the ablation matrix."""
import csv
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig
from .dataset import SETTINGS
from .frames import read_frame, to_array, to_tensor
from .loss import erp_weights, wss_l1
from .metrics import REPORT_COLUMNS, evaluate_pair
from .model import OmniVFINet, load_checkpoint, read_checkpoint, save_checkpoint
from .model.network import ABLATION_VARIANTS

log = logging.getLogger(__name__)

METRICS = ("psnr", "ssim", "ws_psnr", "ws_ssim")


class TrainingAborted(RuntimeError):
    pass


def lr_at(step, total_steps, cfg):
    """Cosine decay from ``lr_init`` at step 0 to ``lr_final`` at ``total_steps``."""
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1 + math.cos(math.pi * step / total_steps))


def set_deterministic(enabled=True):
    if enabled:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    else:
        torch.use_deterministic_algorithms(False)


def build_model(cfg):
    torch.manual_seed(cfg.seed)
    return OmniVFINet(cfg.channels, guard=cfg.ablation.guard, ftb=cfg.ablation.ftb)


class TripletFrames:
    """Reads a manifest's frames on demand as float32 tensors, with a small cache."""

    def __init__(self, manifest, cache=True):
        if manifest.base_dir is None:
            raise ValueError("manifest has no base directory; load it from disk or pass one from ingest()")
        self.manifest = manifest
        self.root = Path(manifest.base_dir)
        self._cache = {} if cache else None

    def __len__(self):
        return len(self.manifest.entries)

    def frame(self, rel):
        if self._cache is not None and rel in self._cache:
            return self._cache[rel]
        arr = read_frame(self.root / rel)
        if self._cache is not None:
            self._cache[rel] = arr
        return arr

    def __getitem__(self, idx):
        t = self.manifest.entries[idx]
        return t, [to_tensor(self.frame(p))[0] for p in (t.i1, t.ig, t.i2)]


def _collate(samples):
    """Stack samples sharing the first sample's shape; others are dropped with a log line."""
    ref = samples[0][1][0].shape
    kept = []
    for t, frames in samples:
        if any(f.shape != ref for f in frames):
            log.warning("skipping %s: shape %s differs from batch shape %s", t.sample_id, tuple(frames[0].shape), tuple(ref))
            continue
        kept.append((t, frames))
    ids = [t.sample_id for t, _ in kept]
    i1, ig, i2 = (torch.stack([f[k] for _, f in kept]) for k in range(3))
    return ids, i1, ig, i2


def epoch_order(seed, epoch, n):
    return np.random.default_rng([seed, epoch]).permutation(n)


@dataclass
class TrainResult:
    model: OmniVFINet
    history: list
    checkpoint: Path | None
    step: int
    total_steps: int


def _state(model, optimizer, cfg, step, history, best):
    return dict(
        optimizer=optimizer.state_dict(),
        step=step,
        history=list(history),
        config=cfg.to_dict(),
        fingerprint=cfg.fingerprint(),
        best_ws_psnr=best,
    )


def train(manifest, cfg, out_dir=None, resume=None, stop_at_step=None, val_manifest=None):
    """Optimize the network on ``manifest`` with WSS-L1 and AdamW under a cosine schedule.

    ``history`` holds the batch loss of every optimizer step. ``stop_at_step``
    ends the run early (still writing ``last.pt``) so it can be resumed.
    """
    if not manifest.entries:
        raise ValueError("training manifest is empty")
    set_deterministic(cfg.deterministic)
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    data = TripletFrames(manifest)
    n = len(data)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch

    model = build_model(cfg)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=cfg.lr_init, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay
    )
    step, history, best = 0, [], -math.inf
    if resume is not None:
        resumed, payload = load_checkpoint(resume, guard=cfg.ablation.guard, ftb=cfg.ablation.ftb)
        if payload.get("fingerprint") != cfg.fingerprint():
            raise ValueError(f"{resume} was written with a different config")
        model.load_state_dict(resumed.state_dict())
        optimizer.load_state_dict(payload["optimizer"])
        step, history = payload["step"], list(payload["history"])
        best = payload.get("best_ws_psnr", -math.inf)

    psi = None
    model.train()
    last_ckpt = None

    def checkpoint(name):
        if out_dir is None:
            return None
        return save_checkpoint(out_dir / name, model, **_state(model, optimizer, cfg, step, history, best))

    while step < total:
        if stop_at_step is not None and step >= stop_at_step:
            break
        epoch, offset = divmod(step, steps_per_epoch)
        order = epoch_order(cfg.seed, epoch, n)
        idx = order[offset * cfg.batch_size : (offset + 1) * cfg.batch_size]
        ids, i1, ig, i2 = _collate([data[int(i)] for i in idx])

        for group in optimizer.param_groups:
            group["lr"] = lr_at(step, total, cfg)
        if psi is None or psi.shape != ig.shape[-2:]:
            psi = erp_weights(*ig.shape[-2:], like=ig)
        try:
            loss = wss_l1(model(i1, i2).pred, ig, psi, cfg.loss)
            failure = None if torch.isfinite(loss) else "non-finite loss"
        except FloatingPointError as exc:
            failure = str(exc)
        if failure:
            snap = None
            if out_dir is not None:
                snap = save_checkpoint(
                    out_dir / "nan_snapshot.pt", model, batch=ids, **_state(model, optimizer, cfg, step, history, best)
                )
            raise TrainingAborted(f"{failure} at step {step} on batch {ids}; snapshot: {snap}")
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        history.append(loss.item())
        step += 1

        if step % steps_per_epoch == 0:
            done = step // steps_per_epoch
            if cfg.ckpt_every and done % cfg.ckpt_every == 0:
                last_ckpt = checkpoint("last.pt")
            if val_manifest is not None and cfg.val_every and done % cfg.val_every == 0 and val_manifest.entries:
                report = evaluate(val_manifest, model, fingerprint=cfg.fingerprint())
                score = report.overall("ws_psnr")
                log.info("epoch %d: val ws-psnr %.3f", done, score)
                if score > best:
                    best = score
                    checkpoint("best.pt")
                model.train()
    last_ckpt = checkpoint("last.pt") or last_ckpt
    return TrainResult(model, history, last_ckpt, step, total)


@torch.no_grad()
def mean_loss(model, manifest, cfg):
    """Mean WSS-L1 of ``model`` over every triplet of ``manifest``, in eval mode."""
    data = TripletFrames(manifest)
    was = model.training
    model.eval()
    total = 0.0
    for k in range(len(data)):
        _, (i1, ig, i2) = data[k]
        pred = model(i1[None], i2[None]).pred
        total += wss_l1(pred, ig[None], None, cfg.loss).item()
    model.train(was)
    return total / len(data)


@dataclass
class BenchmarkReport:
    settings: dict
    rows: list
    missing: list = field(default_factory=list)
    fingerprint: str = ""
    wall_clock: float = 0.0

    def overall(self, metric):
        vals = [r[metric] for r in self.rows]
        return math.fsum(vals) / len(vals) if vals else math.nan

    def comparable(self):
        """Everything except wall-clock time."""
        d = asdict(self)
        d.pop("wall_clock")
        return d

    def table_row(self):
        """Per-setting ``PSNR/SSIM`` and ``WS-PSNR/WS-SSIM`` cells in benchmark order."""
        cells = []
        for s in SETTINGS:
            if s in self.settings:
                m = self.settings[s]
                cells += [f"{m['psnr']:.2f}/{m['ssim']:.4f}", f"{m['ws_psnr']:.2f}/{m['ws_ssim']:.4f}"]
            else:
                cells += ["-", "-"]
        return cells

    def save(self, stem):
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        stem.with_suffix(".json").write_text(json.dumps(asdict(self), indent=2, sort_keys=True))
        with open(stem.with_suffix(".csv"), "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, extrasaction="ignore")
            writer.writeheader()
            writer.writerows(self.rows)
            for s, m in self.settings.items():
                writer.writerow({"setting": s, "sample_id": "MEAN", **m})
        return stem


def _settings_block(rows):
    out = {}
    for s in SETTINGS:
        sel = [r for r in rows if r["setting"] == s]
        if sel:
            out[s] = {m: math.fsum(r[m] for r in sel) / len(sel) for m in METRICS}
            out[s]["count"] = len(sel)
    return out


def evaluate(manifest, source, fingerprint="", workers=1):
    """Score midpoint predictions against ground truth per setting.

    ``source`` is an ``OmniVFINet``, a checkpoint path, or a directory holding
    externally produced predictions named ``<sample_id>.png``. Samples without
    a prediction are listed in ``missing`` and left out of the means.
    """
    start = time.perf_counter()
    data = TripletFrames(manifest, cache=False)
    model, pred_dir = None, None
    if isinstance(source, torch.nn.Module):
        model = source
    elif Path(source).is_dir():
        pred_dir = Path(source)
    else:
        model, payload = load_checkpoint(source)
        fingerprint = fingerprint or payload.get("fingerprint", "")
    if model is not None:
        was = model.training
        model.eval()

    def score(idx):
        t = manifest.entries[idx]
        gt = data.frame(t.ig)
        if pred_dir is not None:
            path = pred_dir / f"{t.sample_id}.png"
            if not path.is_file():
                return t, None
            pred = read_frame(path)
        else:
            i1, i2 = to_tensor(data.frame(t.i1)), to_tensor(data.frame(t.i2))
            with torch.no_grad():
                pred = to_array(model(i1, i2).pred)
        return t, evaluate_pair(pred, gt)

    idxs = range(len(manifest.entries))
    if workers > 1 and model is None:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(score, idxs))
    else:
        results = [score(i) for i in idxs]
    if model is not None:
        model.train(was)

    rows, missing = [], []
    for t, rep in sorted(results, key=lambda r: r[0].sample_id):
        if rep is None:
            missing.append(t.sample_id)
        else:
            rows.append({"setting": t.setting, "sample_id": t.sample_id, **asdict(rep)})
    if missing:
        log.warning("%d samples have no prediction: %s", len(missing), ", ".join(missing[:5]))
    return BenchmarkReport(_settings_block(rows), rows, missing, fingerprint, time.perf_counter() - start)


@dataclass
class AblationResult:
    variant: str
    guard: bool
    ftb: bool
    parameters: int
    fingerprint: str
    base_fingerprint: str
    checkpoint: Path | None = None
    report: BenchmarkReport | None = None
    error: str | None = None


def ablate(manifest, base_cfg, out_dir, eval_manifest=None):
    """Train and evaluate the four block combinations in table order.

    A failing variant records its error and the matrix continues.
    """
    out_dir = Path(out_dir)
    eval_manifest = eval_manifest if eval_manifest is not None and eval_manifest.entries else manifest
    results = []
    for variant, (guard, ftb) in ABLATION_VARIANTS.items():
        cfg = base_cfg.with_ablation(guard, ftb)
        res = AblationResult(
            variant, guard, ftb,
            parameters=sum(p.numel() for p in build_model(cfg).parameters()),
            fingerprint=cfg.fingerprint(),
            base_fingerprint=cfg.fingerprint(exclude=("ablation",)),
        )
        try:
            trained = train(manifest, cfg, out_dir / variant)
            res.checkpoint = trained.checkpoint
            res.report = evaluate(eval_manifest, trained.model, fingerprint=cfg.fingerprint())
            res.report.save(out_dir / variant / "report")
        except Exception as exc:
            log.error("ablation variant %s failed: %s", variant, exc)
            res.error = f"{type(exc).__name__}: {exc}"
        results.append(res)
    write_ablation_table(out_dir / "ablation.csv", results)
    return results


def write_ablation_table(path, results):
    header = ["DistortionGuard", "OmniFTB", "parameters"]
    for s in SETTINGS:
        header += [f"{s} PSNR/SSIM", f"{s} WS-PSNR/WS-SSIM"]
    header.append("error")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for r in results:
            cells = r.report.table_row() if r.report else ["-"] * (2 * len(SETTINGS))
            writer.writerow(["x" if not r.guard else "v", "x" if not r.ftb else "v", r.parameters, *cells, r.error or ""])


def checkpoint_flags(path):
    arch = read_checkpoint(path)["architecture"]
    return arch["guard"], arch["ftb"]
