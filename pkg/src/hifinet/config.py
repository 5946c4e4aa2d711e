"""Flat ``key = value`` run configuration files.

One setting per line, ``#`` starts a comment.  Values are parsed according
to the declared type of the key: booleans accept true/false/yes/no/1/0,
triples are comma separated.  Unknown keys are rejected.
"""
from __future__ import annotations

import typing
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .data import DegradationSpec
from .tensor import ConfigError
from .train import TrainConfig

REQUIRED = ("learning_rate",)


@dataclass
class DataConfig:
    synthetic: bool = False
    synthetic_count: int = 32
    synthetic_size: int = 64
    attenuation: tuple[float, float, float] = (1.0, 0.6, 0.5)
    beta: float = 0.3
    ambient: tuple[float, float, float] = (0.1, 0.45, 0.55)
    noise: float = 0.01
    degradation_seed: int = 0
    degraded_dir: str = ""
    gt_dir: str = ""
    output_dir: str = "runs/hifi"
    resume: str = ""

    def degradation(self) -> DegradationSpec:
        return DegradationSpec(tuple(self.attenuation), self.beta, tuple(self.ambient),
                               self.noise, self.degradation_seed)

    def to_dict(self) -> dict:
        return asdict(self)


def _parse_value(key: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw.strip('"').strip("'")
        if typing.get_origin(kind) is tuple:
            parts = [float(v) for v in raw.strip("()[]").split(",")]
            if len(parts) != len(typing.get_args(kind)):
                raise ValueError(raw)
            return tuple(parts)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(kind, '__name__', kind)}") from None
    raise ConfigError(f"{key}: unsupported type {kind}")


def parse_pairs(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{key}: given twice (line {lineno})")
        out[key] = value
    return out


def _field_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def parse_config(text: str) -> tuple[TrainConfig, DataConfig]:
    raw = parse_pairs(text)
    train_types = _field_types(TrainConfig)
    data_types = _field_types(DataConfig)
    unknown = sorted(set(raw) - set(train_types) - set(data_types))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    for key in REQUIRED:
        if key not in raw:
            raise ConfigError(f"{key}: required setting is missing")
    train_kw = {k: _parse_value(k, v, train_types[k]) for k, v in raw.items() if k in train_types}
    data_kw = {k: _parse_value(k, v, data_types[k]) for k, v in raw.items() if k in data_types}
    data = DataConfig(**data_kw)
    data.degradation()
    return TrainConfig(**train_kw), data


def load_config(path) -> tuple[TrainConfig, DataConfig]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def format_config(*parts) -> str:
    lines = []
    for part in parts:
        for key, value in part.to_dict().items():
            if isinstance(value, tuple):
                value = ", ".join(repr(v) for v in value)
            elif isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{key} = {value}")
    return "\n".join(lines)


def defaults_text() -> str:
    """A complete config file with every default written out."""
    return format_config(TrainConfig(), DataConfig())

