"""Versioned checkpoint container.

Holds the weights by hierarchical name together with the architecture
(ablation flags, pyramid depth, channel schedule). Anything the trainer wants
to persist (optimizer state, step, loss history) rides along in ``extra``.
"""
import torch

from .network import OmniVFINet

FORMAT = "omnivfi.checkpoint"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, model, **extra):
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "architecture": {
            "guard": model.guard,
            "ftb": model.ftb,
            "levels": model.levels,
            "channels": list(model.channels),
        },
        "state_dict": model.state_dict(),
        **extra,
    }
    torch.save(payload, path)
    return path


def read_checkpoint(path):
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not an omnivfi checkpoint")
    if payload.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')!r}")
    return payload


def load_checkpoint(path, guard=None, ftb=None):
    """Rebuild the model stored at ``path``.

    Passing ``guard``/``ftb`` asserts the expected ablation flags; a mismatch
    raises ``CheckpointError``. Returns ``(model, payload)``.
    """
    payload = read_checkpoint(path)
    arch = payload["architecture"]
    for name, want in (("guard", guard), ("ftb", ftb)):
        if want is not None and bool(want) != arch[name]:
            raise CheckpointError(f"checkpoint has {name}={arch[name]}, expected {bool(want)}")
    if arch["levels"] != len(arch["channels"]):
        raise CheckpointError("checkpoint levels disagree with its channel schedule")
    model = OmniVFINet(arch["channels"], guard=arch["guard"], ftb=arch["ftb"])
    try:
        model.load_state_dict(payload["state_dict"], strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"weights do not match the recorded architecture: {exc}") from exc
    return model, payload
