"""Run configuration: nested key-value text with sections.

Sections are ``data``, ``model``, ``train``, ``augment`` and ``loss`` (the
last carries the 5x5 penalty grid as semicolon-separated rows). Every key
has a default, so a minimal file only names the manifest. The canonical
re-serialization of a parsed config is what checkpoints embed and hash.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields, replace

from .backbone import NetworkConfig
from .data import AugmentationPolicy
from .errors import ConfigError
from .losses import LOSS_KINDS, PenaltyMatrix, default_penalty_matrix


@dataclass(frozen=True)
class DataConfig:
    manifest: str = ""
    image_size: int = 224
    channels: int = 3

    def __post_init__(self):
        if self.image_size < 1 or self.channels < 1:
            raise ConfigError("image_size and channels must be positive")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 24
    seed: int = 0
    checkpoint_every: int = 5

    def __post_init__(self):
        # lr == 0 is allowed: a frozen run is a useful diagnostic baseline
        if self.lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.epochs < 1 or self.batch_size < 1 or self.checkpoint_every < 1:
            raise ConfigError("epochs, batch_size and checkpoint_every must be >= 1")


@dataclass(frozen=True)
class LossConfig:
    """Objective selection.

    The grade-distance loss is affine in the probabilities, so a network
    trained from scratch can saturate into a constant prediction where its
    softmax gradients vanish; ``warmup_epochs`` trains under cross-entropy
    first (a stand-in for starting from pretrained features) before
    switching to the configured kind.
    """

    kind: str = "ordinal"
    penalty: PenaltyMatrix = field(default_factory=default_penalty_matrix)
    warmup_epochs: int = 0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if self.warmup_epochs < 0:
            raise ConfigError(f"warmup_epochs must be >= 0, got {self.warmup_epochs}")


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    loss: LossConfig = field(default_factory=LossConfig)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def canonical_text(cfg: RunConfig) -> str:
    """Deterministic full serialization: sorted sections, sorted keys."""
    sections = {
        "augment": {f.name: getattr(cfg.augment, f.name) for f in fields(cfg.augment)},
        "data": {f.name: getattr(cfg.data, f.name) for f in fields(cfg.data)},
        "loss": {
            "kind": cfg.loss.kind,
            "warmup_epochs": cfg.loss.warmup_epochs,
            "penalty_matrix": "; ".join(
                ",".join(_fmt(x) for x in row) for row in cfg.loss.penalty.values
            ),
        },
        "model": {f.name: getattr(cfg.model, f.name) for f in fields(cfg.model)},
        "train": {f.name: getattr(cfg.train, f.name) for f in fields(cfg.train)},
    }
    out = io.StringIO()
    for sec in sorted(sections):
        out.write(f"[{sec}]\n")
        for key in sorted(sections[sec]):
            out.write(f"{key} = {_fmt(sections[sec][key])}\n")
        out.write("\n")
    return out.getvalue()


def config_hash(cfg: RunConfig) -> bytes:
    return hashlib.sha256(canonical_text(cfg).encode()).digest()


_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _convert(section: str, key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in _BOOL:
                raise ValueError(f"not a boolean: {raw!r}")
            return _BOOL[raw.lower()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(","))
        return raw
    except ValueError as e:
        raise ConfigError(f"[{section}] {key}: {e}") from e


def _parse_section(parser, name: str, proto):
    if not parser.has_section(name):
        return proto
    values = {}
    defaults = {f.name: getattr(proto, f.name) for f in fields(proto)}
    for key, raw in parser.items(name):
        if key not in defaults:
            raise ConfigError(f"unknown key [{name}] {key}")
        values[key] = _convert(name, key, raw, defaults[key])
    try:
        return replace(proto, **values)
    except ConfigError:
        raise
    except Exception as e:
        raise ConfigError(f"invalid [{name}] section: {e}") from e


def _parse_penalty(raw: str) -> PenaltyMatrix:
    try:
        rows = [[float(x) for x in row.split(",")] for row in raw.split(";") if row.strip()]
        return PenaltyMatrix.from_rows(rows)
    except ConfigError:
        raise
    except Exception as e:
        raise ConfigError(f"[loss] penalty_matrix: {e}") from e


def parse_run_config_text(text: str) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"config parse error: {e}") from e
    known = {"data", "model", "train", "augment", "loss"}
    for sec in parser.sections():
        if sec not in known:
            raise ConfigError(f"unknown config section [{sec}]")

    loss = LossConfig()
    if parser.has_section("loss"):
        kind = loss.kind
        penalty = loss.penalty
        warmup = loss.warmup_epochs
        for key, raw in parser.items("loss"):
            if key == "kind":
                kind = raw.strip()
            elif key == "penalty_matrix":
                penalty = _parse_penalty(raw)
            elif key == "warmup_epochs":
                warmup = _convert("loss", key, raw, 0)
            else:
                raise ConfigError(f"unknown key [loss] {key}")
        loss = LossConfig(kind=kind, penalty=penalty, warmup_epochs=warmup)

    data = _parse_section(parser, "data", DataConfig())
    model = _parse_section(parser, "model", NetworkConfig())
    # the loader geometry is the single source of truth unless the model
    # section explicitly overrides it
    explicit_model_keys = set(parser.options("model")) if parser.has_section("model") else set()
    if "input_size" not in explicit_model_keys:
        model = replace(model, input_size=data.image_size)
    elif model.input_size != data.image_size:
        raise ConfigError(
            f"[model] input_size {model.input_size} contradicts [data] image_size {data.image_size}"
        )
    if "in_channels" not in explicit_model_keys:
        model = replace(model, in_channels=data.channels)
    elif model.in_channels != data.channels:
        raise ConfigError(
            f"[model] in_channels {model.in_channels} contradicts [data] channels {data.channels}"
        )

    cfg = RunConfig(
        data=data,
        model=model,
        train=_parse_section(parser, "train", TrainConfig()),
        augment=_parse_section(parser, "augment", AugmentationPolicy()),
        loss=loss,
    )
    cfg.model.validate()
    return cfg


def parse_run_config(path) -> RunConfig:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_run_config_text(text)
