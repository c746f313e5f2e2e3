"""Experiment configuration: one TOML file of record per experiment.

Every tunable default in the package is overridable here. Validation
errors carry the dotted field path so a typo in a deep section is easy to
locate. Unknown keys are rejected rather than ignored.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .corruptions import CorruptionSpec
from .detector import DetectorConfig
from .engine import MethodConfig
from .layers import ArchSpec
from .streams import StreamSpec


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    train_dataset: str = ""
    test_dataset: str = ""
    weights: str = ""
    stats: str = ""


@dataclass
class TrainConfig:
    epochs: int = 6
    lr: float = 0.01
    batch_size: int = 128
    momentum: float = 0.9


@dataclass
class DatasetConfig:
    n_train: int = 4000
    n_test: int = 10000
    n_classes: int = 10
    image_size: int = 16
    noise: float = 0.02
    train_seed: int = 100
    test_seed: int = 200


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/exp"
    arch: ArchSpec = field(default_factory=ArchSpec)
    paths: PathsConfig = field(default_factory=PathsConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    method: MethodConfig = field(default_factory=MethodConfig)
    stream: StreamSpec = field(default_factory=lambda: StreamSpec(domain_sequence=[]))
    detector: DetectorConfig | None = None
    stream_seed_explicit: bool = False

    def resolve(self):
        """Fill derived defaults after overrides are applied."""
        if not self.stream_seed_explicit:
            self.stream.seed = self.seed
        p = self.paths
        p.train_dataset = p.train_dataset or os.path.join(self.out_dir, "data", "train")
        p.test_dataset = p.test_dataset or os.path.join(self.out_dir, "data", "test")
        p.weights = p.weights or os.path.join(self.out_dir, "model.dat")
        p.stats = p.stats or os.path.join(self.out_dir, "stats.dat")
        return self

    def validate(self):
        _check(self.arch.validate, "arch")
        _check(self.method.validate, "method")
        _check(lambda: self.stream.validate(), "stream")
        if self.detector is not None:
            _check(self.detector.validate, "detector")
            if len(self.stream.domain_sequence) < 2:
                raise ConfigError(
                    "detector: continual mode requires ≥2 entries in stream.domains"
                )
        if self.train.epochs < 0:
            raise ConfigError("train.epochs: must be ≥ 0")
        if self.train.lr <= 0:
            raise ConfigError("train.lr: must be positive")
        if self.train.batch_size < 2:
            raise ConfigError("train.batch_size: must be ≥ 2")
        if self.dataset.n_train < self.dataset.n_classes or self.dataset.n_test < self.dataset.n_classes:
            raise ConfigError("dataset: need at least one sample per class in each split")
        return self


def _check(fn, section):
    try:
        fn()
    except ValueError as e:
        raise ConfigError(f"{section}: {e}") from None


def _section(raw, name, allowed):
    body = raw.get(name, {})
    if not isinstance(body, dict):
        raise ConfigError(f"{name}: expected a table")
    for key in body:
        if key not in allowed:
            raise ConfigError(f"{name}.{key}: unknown key (allowed: {sorted(allowed)})")
    return body


def _coerce(section, key, value, kind):
    try:
        if kind is float:
            return float(value)
        if kind is int:
            if isinstance(value, bool) or isinstance(value, float) and value != int(value):
                raise TypeError
            return int(value)
        if kind is str:
            if not isinstance(value, str):
                raise TypeError
            return value
    except (TypeError, ValueError):
        pass
    where = f"{section}.{key}" if section else key
    raise ConfigError(f"{where}: expected {kind.__name__}, got {value!r}")


def _fill(obj, section, body, fields):
    for key, kind in fields.items():
        if key in body:
            setattr(obj, key, _coerce(section, key, body[key], kind))


def _parse_domains(raw_stream):
    entries = raw_stream.get("domains", [])
    if not isinstance(entries, list):
        raise ConfigError("stream.domains: expected an array of tables")
    out = []
    for i, entry in enumerate(entries):
        name = f"stream.domains[{i}]"
        if not isinstance(entry, dict):
            raise ConfigError(f"{name}: expected a table")
        for key in entry:
            if key not in ("kind", "severity", "budget", "seed"):
                raise ConfigError(f"{name}.{key}: unknown key")
        if "kind" not in entry or "budget" not in entry:
            raise ConfigError(f"{name}: needs 'kind' and 'budget'")
        spec = CorruptionSpec(
            kind=_coerce(name, "kind", entry["kind"], str),
            severity=_coerce(name, "severity", entry.get("severity", 5), int),
            seed=_coerce(name, "seed", entry.get("seed", 0), int),
        )
        _check(spec.validate, name)
        out.append((spec, _coerce(name, "budget", entry["budget"], int)))
    return out


TOP_KEYS = {"seed", "out_dir", "arch", "paths", "train", "dataset", "method", "stream", "detector"}


def load_config(path, seed_override=None, out_override=None):
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    return parse_config(raw, seed_override=seed_override, out_override=out_override)


def parse_config(raw, seed_override=None, out_override=None):
    for key in raw:
        if key not in TOP_KEYS:
            raise ConfigError(f"{key}: unknown top-level key (allowed: {sorted(TOP_KEYS)})")
    cfg = ExperimentConfig()
    if "seed" in raw:
        cfg.seed = _coerce("", "seed", raw["seed"], int)
    if "out_dir" in raw:
        cfg.out_dir = _coerce("", "out_dir", raw["out_dir"], str)

    body = _section(raw, "arch", {"in_channels", "image_size", "kernel", "pool", "n_classes", "conv_channels"})
    _fill(cfg.arch, "arch", body, {"in_channels": int, "image_size": int, "kernel": int, "pool": int, "n_classes": int})
    if "conv_channels" in body:
        chans = body["conv_channels"]
        if not isinstance(chans, list) or len(chans) != 2:
            raise ConfigError("arch.conv_channels: expected a 2-element array")
        cfg.arch.conv_channels = tuple(_coerce("arch", "conv_channels", c, int) for c in chans)

    body = _section(raw, "paths", {"train_dataset", "test_dataset", "weights", "stats"})
    _fill(cfg.paths, "paths", body, {"train_dataset": str, "test_dataset": str, "weights": str, "stats": str})

    body = _section(raw, "train", {"epochs", "lr", "batch_size", "momentum"})
    _fill(cfg.train, "train", body, {"epochs": int, "lr": float, "batch_size": int, "momentum": float})

    body = _section(raw, "dataset", {"n_train", "n_test", "n_classes", "image_size", "noise", "train_seed", "test_seed"})
    _fill(
        cfg.dataset,
        "dataset",
        body,
        {"n_train": int, "n_test": int, "n_classes": int, "image_size": int, "noise": float, "train_seed": int, "test_seed": int},
    )

    body = _section(raw, "method", {"variant", "alpha", "theta", "lr", "momentum", "da_layer_selection"})
    _fill(
        cfg.method,
        "method",
        body,
        {"variant": str, "alpha": float, "theta": float, "lr": float, "momentum": float, "da_layer_selection": str},
    )

    body = _section(raw, "stream", {"ordering", "delta", "batch_size", "seed", "domains"})
    _fill(cfg.stream, "stream", body, {"ordering": str, "delta": float, "batch_size": int})
    if "seed" in body:
        cfg.stream.seed = _coerce("stream", "seed", body["seed"], int)
        cfg.stream_seed_explicit = True
    cfg.stream.domain_sequence = _parse_domains(body)

    if "detector" in raw:
        body = _section(raw, "detector", {"p", "q", "tau", "warmup", "cooldown"})
        cfg.detector = DetectorConfig()
        _fill(cfg.detector, "detector", body, {"p": int, "q": int, "tau": float, "warmup": int, "cooldown": int})

    if seed_override is not None:
        cfg.seed = int(seed_override)
    if out_override is not None:
        cfg.out_dir = str(out_override)
    return cfg.resolve().validate()
