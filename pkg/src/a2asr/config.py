"""Experiment configuration: TOML sections per module, flag overrides, hashing."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

import toml

from .data import CorpusSpec
from .decode import DecodeConfig
from .errors import ConfigError
from .losses import LossConfig


@dataclass
class ModelSection:
    d_model: int = 32
    n_heads: int = 2
    d_ff: int = 64
    enc_layers: int = 2
    dec_layers: int = 2
    d_dec: int = 0
    dec_heads: int = 0
    dec_ff: int = 0
    stack: int = 2
    dropout: float = 0.0
    adapter_kind: str = "none"
    adapter_placement: str = "encoder"
    adapter_bottleneck: int = 8
    adapter_grouping: str = "individual"
    adapter_residual: str = "single"


@dataclass
class OptimConfig:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    warmup: int = 400
    peak_scale: float = 1.0
    grad_clip: float = 5.0
    accum: int = 1


@dataclass
class TrainSection:
    epochs: int = 10
    batch_size: int = 16
    sampling: str = "random"
    per_language: int = 4
    seed: int = 0
    precision: str = "float32"
    min_count: int = 1
    ckpt_every: int = 1
    keep_last: int = 5
    avg_last: int = 3
    lm_transfer: bool = False
    freeze_transferred: bool = False
    monolingual: bool = False
    valid_beam: int = 1


@dataclass
class LMSection:
    layers: int = 2
    epochs: int = 4
    batch_size: int = 32
    sentences_per_language: int = 3000
    peak_scale: float = 1.0
    warmup: int = 200
    seed: int = 1


@dataclass
class TrainConfig:
    data: CorpusSpec = field(default_factory=CorpusSpec)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossConfig = field(default_factory=LossConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainSection = field(default_factory=TrainSection)
    lm: LMSection = field(default_factory=LMSection)

    def validate(self) -> "TrainConfig":
        t = self.train
        if t.sampling not in ("random", "balanced"):
            raise ConfigError(f"train.sampling must be random or balanced, got {t.sampling!r}")
        if t.epochs < 1 or t.batch_size < 1 or t.per_language < 1:
            raise ConfigError("epochs, batch_size and per_language must be positive")
        if t.precision not in ("float32", "float64"):
            raise ConfigError("train.precision must be float32 or float64")
        if self.optim.accum < 1 or self.optim.warmup < 1 or self.optim.grad_clip <= 0:
            raise ConfigError("optim.accum and optim.warmup must be >= 1, grad_clip > 0")
        m = self.model
        if m.adapter_kind not in ("none", "lang", "dual"):
            raise ConfigError(f"model.adapter_kind must be none, lang or dual, got {m.adapter_kind!r}")
        if m.adapter_placement not in ("encoder", "decoder", "both"):
            raise ConfigError(f"bad model.adapter_placement {m.adapter_placement!r}")
        if m.adapter_grouping not in ("individual", "by_family", "by_script") and not m.adapter_grouping.startswith("{"):
            raise ConfigError(f"bad model.adapter_grouping {m.adapter_grouping!r}")
        return self


# sections that determine a trained model; decoding settings are excluded
TRAINING_SECTIONS = ("data", "model", "loss", "optim", "train", "lm")
_SECTION_TYPES = {
    "data": CorpusSpec,
    "model": ModelSection,
    "loss": LossConfig,
    "decode": DecodeConfig,
    "optim": OptimConfig,
    "train": TrainSection,
    "lm": LMSection,
}


def to_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def from_dict(raw: dict) -> TrainConfig:
    """Build a validated config; unknown sections or keys are rejected."""
    kwargs = {}
    for section, values in raw.items():
        cls = _SECTION_TYPES.get(section)
        if cls is None:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(values, dict):
            raise ConfigError(f"section [{section}] must be a table")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown keys in [{section}]: {unknown}")
        try:
            kwargs[section] = cls(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid [{section}]: {exc}") from exc
    return TrainConfig(**kwargs).validate()


def _coerce(text: str, current):
    if isinstance(current, bool):
        low = text.lower()
        if low not in ("true", "false", "1", "0"):
            raise ConfigError(f"expected a boolean, got {text!r}")
        return low in ("true", "1")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, list):
        items = [s for s in text.split(",") if s.strip()]
        kind = type(current[0]) if current else str
        return [kind(s.strip()) for s in items]
    return text


def apply_overrides(cfg: TrainConfig, overrides) -> TrainConfig:
    """Apply ``section.key=value`` strings (or a dict of dotted keys)."""
    raw = to_dict(cfg)
    items = overrides.items() if isinstance(overrides, dict) else (o.split("=", 1) for o in overrides)
    for item in items:
        try:
            key, value = item
        except ValueError:
            raise ConfigError(f"override {item!r} is not section.key=value") from None
        section, _, name = key.lstrip("-").partition(".")
        if section not in raw or name not in raw[section]:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            raw[section][name] = _coerce(value, raw[section][name]) if isinstance(value, str) else copy.deepcopy(value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from exc
    return from_dict(raw)


def load_config(path) -> TrainConfig:
    try:
        raw = toml.load(path)
    except (toml.TomlDecodeError, OSError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return from_dict(raw)


def dump_config(cfg: TrainConfig) -> str:
    return toml.dumps(to_dict(cfg))


def config_hash(cfg: TrainConfig, sections=None) -> str:
    """Stable digest over the canonical JSON form of the config (or some sections)."""
    raw = to_dict(cfg)
    if sections is not None:
        raw = {k: raw[k] for k in sections}
    canon = json.dumps(raw, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]
