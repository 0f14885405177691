"""Command-line entry point: ``omnivfi <command> ...``."""
import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import config as config_mod
from .dataset import Layout, TripletManifest, ingest, stratify
from .fixtures import write_toy_tree
from .frames import read_frame, to_array, to_tensor, write_frame
from .geometry import condition_map, export_condition_map
from .model import load_checkpoint
from .runner import ablate, evaluate, train

log = logging.getLogger("omnivfi")


def _config(args):
    base = config_mod.TOY if getattr(args, "toy", False) else config_mod.FULL
    kv = config_mod.read_kv(args.config) if getattr(args, "config", None) else {}
    return config_mod.TrainConfig.from_kv(kv, base)


def cmd_prepare(args):
    kv = config_mod.read_kv(args.layout) if args.layout else {}
    result = ingest(args.root, Layout.from_config(kv), args.flow_provider, args.out, args.workers)
    summary = {
        "train": result.train.counts(),
        "test": result.test.counts(),
        "errors": result.errors,
    }
    if args.condition_map_out:
        first = next(iter(result.train.entries + result.test.entries), None)
        if first is None:
            log.error("no triplets ingested, cannot size the condition map")
            return 1
        h, w = read_frame(result.train.base_dir / first.i1).shape[:2]
        export_condition_map(args.condition_map_out, condition_map(h, w))
        summary["condition_map"] = {"path": str(args.condition_map_out), "height": h, "width": w}
    print(json.dumps(summary, indent=2))
    return 0


def cmd_stratify(args):
    manifest = TripletManifest.load(args.manifest)
    manifest.entries, buckets = stratify(manifest.entries)
    manifest.save(args.manifest)
    counts = {name: len(items) for name, items in buckets.items()}
    print(json.dumps({**counts, "total": len(manifest.entries)}, indent=2))
    return 0


def cmd_train(args):
    cfg = _config(args)
    manifest = TripletManifest.load(args.manifest, check_files=True)
    val = TripletManifest.load(args.val_manifest, check_files=True) if args.val_manifest else None
    res = train(manifest, cfg, args.out, resume=args.resume, val_manifest=val)
    print(json.dumps({
        "checkpoint": str(res.checkpoint),
        "fingerprint": cfg.fingerprint(),
        "steps": res.step,
        "first_loss": res.history[0] if res.history else None,
        "last_loss": res.history[-1] if res.history else None,
    }, indent=2))
    return 0


def cmd_eval(args):
    manifest = TripletManifest.load(args.manifest, check_files=True)
    report = evaluate(manifest, args.ckpt or args.predictions, workers=args.workers)
    stem = report.save(args.out)
    print(json.dumps({"settings": report.settings, "missing": report.missing, "report": str(stem)}, indent=2))
    return 0


def cmd_interpolate(args):
    model, _ = load_checkpoint(args.ckpt)
    i1, i2 = (to_tensor(read_frame(p)) for p in (args.in1, args.in2))
    with torch.no_grad():
        pred = model.interpolate(i1, i2)
    write_frame(args.out, to_array(pred))
    return 0


def cmd_ablate(args):
    cfg = _config(args)
    manifest = TripletManifest.load(args.manifest, check_files=True)
    evm = TripletManifest.load(args.eval_manifest, check_files=True) if args.eval_manifest else None
    results = ablate(manifest, cfg, args.out, evm)
    for r in results:
        status = "ok" if r.error is None else f"FAILED ({r.error})"
        print(f"{r.variant:11s} guard={r.guard!s:5} ftb={r.ftb!s:5} params={r.parameters} {status}")
    return 1 if any(r.error for r in results) else 0


def cmd_fixture(args):
    write_toy_tree(args.out, args.height, args.width)
    print(args.out)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="omnivfi", description="360-degree video frame interpolation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", help="build triplet manifests from <root>/<clip_id>/*.png")
    s.add_argument("--root", required=True, type=Path)
    s.add_argument("--layout", type=Path, help="key=value file with layout.* keys")
    s.add_argument("--flow-provider", default="block", choices=("block", "oracle"))
    s.add_argument("--out", type=Path, help="manifest directory (default: --root)")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--condition-map-out", type=Path, help="write the frame-size condition map as raw float32")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("stratify", help="reassign settings in a manifest and print bucket counts")
    s.add_argument("--manifest", required=True, type=Path)
    s.set_defaults(func=cmd_stratify)

    s = sub.add_parser("train", help="train a model on a manifest")
    s.add_argument("--manifest", required=True, type=Path)
    s.add_argument("--config", type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--toy", action="store_true", help="start from the desk-scale preset")
    s.add_argument("--resume", type=Path)
    s.add_argument("--val-manifest", type=Path)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="per-setting benchmark report")
    s.add_argument("--manifest", required=True, type=Path)
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt", type=Path)
    src.add_argument("--predictions", type=Path, help="directory of <sample_id>.png frames")
    s.add_argument("--out", required=True, type=Path, help="report path stem (.json and .csv are written)")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("interpolate", help="synthesize the middle frame of two PNG frames")
    s.add_argument("--in1", required=True, type=Path)
    s.add_argument("--in2", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--ckpt", required=True, type=Path)
    s.set_defaults(func=cmd_interpolate)

    s = sub.add_parser("ablate", help="train and evaluate the four block combinations")
    s.add_argument("--manifest", required=True, type=Path)
    s.add_argument("--eval-manifest", type=Path)
    s.add_argument("--config", type=Path)
    s.add_argument("--toy", action="store_true")
    s.add_argument("--out", required=True, type=Path)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("fixture", help="write the synthetic four-clip toy tree")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--height", type=int, default=64)
    s.add_argument("--width", type=int, default=128)
    s.set_defaults(func=cmd_fixture)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
