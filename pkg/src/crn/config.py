"""Run configuration: defaults, config-file parsing, and seeded RNG streams.

Config files are line-oriented ``key = value`` text. ``#`` starts a comment
(full line or trailing), blank lines are ignored, and keys are dotted section
paths such as ``train.lr``. Values are coerced by the type of the target
field; booleans accept true/false/yes/no/1/0, lists are comma separated.
Precedence is defaults < file < command-line flags.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError


def stream_seed(root_seed: int, name: str) -> np.random.SeedSequence:
    """Derive an independent seed stream from the root seed and a name.

    Streams are keyed by name, not by creation order, so adding a new
    consumer never perturbs existing streams.
    """
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    key = (
        int.from_bytes(digest[0:4], "little"),
        int.from_bytes(digest[4:8], "little"),
    )
    return np.random.SeedSequence(entropy=root_seed & 0xFFFFFFFFFFFFFFFF, spawn_key=key)


def stream_rng(root_seed: int, name: str) -> np.random.Generator:
    """Generator for a named stream of the root seed."""
    return np.random.Generator(np.random.PCG64(stream_seed(root_seed, name)))


@dataclass
class WorldConfig:
    n_classes: int = 60
    n_categories: int = 12
    d_v: int = 64           # detector feature dimension
    d_e: int = 32           # word embedding dimension
    d_image: int = 64       # scene feature dimension
    proto_noise: float = 0.12
    embed_noise: float = 0.12
    cross_floor: float = 0.5  # within-category cosine must stay above this


@dataclass
class DetectorNoise:
    miss_rate: float = 0.0
    confusion_rate: float = 0.0
    feature_sigma: float = 0.0


@dataclass
class DataConfig:
    n_train: int = 5000
    n_val: int = 500
    n_test: int = 1000
    max_objects: int = 3
    captions_per_scene: int = 2
    novel_count: int = 8
    novel_classes: list[str] = field(default_factory=list)  # empty -> pick novel_count
    pseudo_count: int = 20
    image_noise: float = 0.02
    novel_scene_rate: float = 0.5  # fraction of test scenes holding one novel object
    max_detections: int = 10
    miss_rate: float = 0.0
    confusion_rate: float = 0.0
    feature_sigma: float = 0.0

    def detector_noise(self) -> DetectorNoise:
        return DetectorNoise(self.miss_rate, self.confusion_rate, self.feature_sigma)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    optimizer: str = "adam"  # "adam" or "sgd"
    epochs: int = 10
    batch_size: int = 32
    clip_norm: float = 5.0
    det_weight: float = 1.0
    hidden: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> None:
        if self.lr < 0 or self.epochs <= 0 or self.batch_size <= 0:
            raise ConfigError("train: lr/epochs/batch_size must be positive")
        if self.det_weight < 0:
            raise ConfigError("train: det_weight must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"train: unknown optimizer {self.optimizer!r}")


@dataclass
class RevisionConfig:
    tau_p: float = 0.15
    tau_s: float = 0.3
    dedup: bool = True

    def validate(self) -> None:
        if not 0.0 <= self.tau_p <= 1.0:
            raise ConfigError(f"revise: tau_p {self.tau_p} outside [0, 1]")
        if not -1.0 <= self.tau_s <= 1.0:
            raise ConfigError(f"revise: tau_s {self.tau_s} outside [-1, 1]")


@dataclass
class EvalConfig:
    max_len: int = 16
    sweep_grid: list[float] = field(
        default_factory=lambda: [round(0.05 * i, 2) for i in range(20)]
    )


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "out"
    jobs: int = 1
    world: WorldConfig = field(default_factory=WorldConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    revise: RevisionConfig = field(default_factory=RevisionConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        self.train.validate()
        self.revise.validate()


_SECTIONS = {"world", "data", "train", "revise", "eval"}
_TOP_KEYS = {"seed", "out", "jobs"}


def _coerce(raw: str, target_type, key: str):
    raw = raw.strip()
    if target_type is bool:
        low = raw.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ConfigError(f"{key}: cannot parse {raw!r} as bool")
    if target_type is int:
        try:
            return int(raw, 0)
        except ValueError:
            raise ConfigError(f"{key}: cannot parse {raw!r} as int") from None
    if target_type is float:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: cannot parse {raw!r} as float") from None
    if target_type is str:
        return raw
    # list fields: comma separated, element type from the default factory
    origin = getattr(target_type, "__origin__", None)
    if origin is list:
        elem = target_type.__args__[0]
        if not raw:
            return []
        return [_coerce(part, elem, key) for part in raw.split(",")]
    raise ConfigError(f"{key}: unsupported config field type {target_type}")


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse config text into a flat {dotted key: raw value} dict."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value.strip()
    return values


def load_config(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    """Load a config file on top of defaults (or an existing config)."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    values = parse_config_text(path.read_text(), source=str(path))
    config = base if base is not None else RunConfig()
    for key, raw in values.items():
        set_config_key(config, key, raw)
    return config


def set_config_key(config: RunConfig, key: str, raw: str) -> None:
    """Apply one dotted-key assignment with type coercion."""
    if key in _TOP_KEYS:
        target, attr = config, key
    elif "." in key:
        section, _, attr = key.partition(".")
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section {section!r} in key {key!r}")
        target = getattr(config, section)
    else:
        raise ConfigError(f"unknown config key {key!r}")
    fields = {f.name: f for f in dataclasses.fields(target)}
    if attr not in fields:
        raise ConfigError(f"unknown config key {key!r}")
    current = getattr(target, attr)
    declared = fields[attr].type
    # resolve the runtime type: prefer the current value's type for scalars
    if isinstance(current, bool):
        ftype = bool
    elif isinstance(current, int):
        ftype = int
    elif isinstance(current, float):
        ftype = float
    elif isinstance(current, str):
        ftype = str
    elif isinstance(current, list):
        ftype = list[float] if "float" in str(declared) else list[str]
    else:
        raise ConfigError(f"{key}: unsupported field type")
    setattr(target, attr, _coerce(raw, ftype, key))
