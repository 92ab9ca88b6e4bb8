"""Flat key=value run configuration shared by every CLI command."""

from __future__ import annotations

from dataclasses import dataclass, fields

from .network import FUSION_MODES


class ConfigError(ValueError):
    """Unknown key, bad value or malformed config file."""


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "out"
    data_dir: str = "data"
    # dataset
    family: str = "legged-table"
    parts: int = 4
    jitter: float = 0.08
    points: int = 1024
    levels: int = 3
    train_shapes: int = 200
    test_shapes: int = 50
    # model
    feature_dim: int = 64
    head_hidden: int = 32
    fusion: str = "cross"
    one_hot: bool = False
    stop_grad: bool = True
    two_dir: bool = False
    learning_rate: float = 0.1
    iterations: int = 2000
    decay_factor: float = 0.1
    batch_size: int = 8
    augment: bool = True
    log_every: int = 100
    # clustering
    bandwidth: float = 0.1
    push_scale: float = 0.05
    epsilon: float = 1e-8
    cluster_max_iter: int = 300
    cluster_tol: float = 1e-6

    def validate(self) -> "RunConfig":
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        for key in ("parts", "points", "levels", "train_shapes", "test_shapes",
                    "feature_dim", "head_hidden", "batch_size"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive")
        if self.iterations < 0:
            raise ConfigError("iterations must be non-negative")
        if self.bandwidth <= 0 or self.push_scale < 0:
            raise ConfigError("bandwidth must be positive and push_scale non-negative")
        return self


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {kind}") from None


def parse_config_file(path) -> dict:
    """Parse a key=value file ('#' starts a comment)."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            values[key.strip()] = _coerce(key.strip(), value)
    return values


def parse_overrides(pairs) -> dict:
    """Parse repeated --set key=value overrides."""
    values = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, _, value = pair.partition("=")
        values[key.strip()] = _coerce(key.strip(), value)
    return values


def load_config(path=None, overrides=None) -> RunConfig:
    """Defaults, then file values, then CLI overrides."""
    values = {}
    if path is not None:
        values.update(parse_config_file(path))
    values.update(parse_overrides(overrides))
    return RunConfig(**values).validate()
