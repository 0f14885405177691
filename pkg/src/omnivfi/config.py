"""Plain-text ``dotted.key=value`` configuration and the training config."""
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .loss import ConfigError, WssL1Config
from .model.network import DEFAULT_CHANNELS


def _coerce(text):
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_kv(text):
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _coerce(value)
    return out


def read_kv(path):
    return parse_kv(Path(path).read_text())


@dataclass(frozen=True)
class Ablation:
    guard: bool = True
    ftb: bool = True


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 8
    lr_init: float = 1e-4
    lr_final: float = 1e-5
    schedule: str = "cosine"
    seed: int = 0
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    ckpt_every: int = 10
    val_every: int = 0
    deterministic: bool = True
    channels: tuple = DEFAULT_CHANNELS
    ablation: Ablation = field(default_factory=Ablation)
    loss: WssL1Config = field(default_factory=WssL1Config)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if not 0 < self.lr_final <= self.lr_init:
            raise ConfigError("need 0 < train.lr_final <= train.lr_init")
        if self.schedule != "cosine":
            raise ConfigError(f"unsupported schedule {self.schedule!r}")

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    def fingerprint(self, exclude=()):
        """Hash of the canonical JSON form; ``exclude`` drops top-level keys."""
        d = {k: v for k, v in self.to_dict().items() if k not in exclude}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_ablation(self, guard, ftb):
        return replace(self, ablation=Ablation(bool(guard), bool(ftb)))

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["ablation"] = Ablation(**d.get("ablation", {}))
        d["loss"] = WssL1Config(**d.get("loss", {}))
        if "channels" in d:
            d["channels"] = tuple(d["channels"])
        return cls(**d)

    @classmethod
    def from_kv(cls, kv, base=None):
        """Overlay ``train.*``, ``ablation.*``, ``loss.*`` and ``model.channels`` keys on ``base``."""
        d = (base or cls()).to_dict()
        train_keys = {f.name for f in fields(cls)} - {"ablation", "loss", "channels"}
        for key, value in kv.items():
            section, _, name = key.partition(".")
            if section == "train" and name in train_keys:
                d[name] = value
            elif section == "ablation" and name in ("guard", "ftb"):
                d["ablation"][name] = bool(value)
            elif section == "loss" and name in ("huber_delta", "reduction"):
                d["loss"][name] = value
            elif key == "model.channels":
                d["channels"] = [int(c) for c in str(value).split(",")]
            elif section == "layout":
                continue
            else:
                raise ConfigError(f"unknown config key {key!r}")
        return cls.from_dict(d)


FULL = TrainConfig()
TOY = TrainConfig(epochs=200, batch_size=4, lr_init=1e-3, lr_final=1e-4, ckpt_every=50)
