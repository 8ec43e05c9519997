"""Flat JSON configuration shared by every command.

One namespace covers the generator and training settings; ``seed`` drives
both.  Unknown or ill-typed keys are rejected by name.
"""

from __future__ import annotations

import json
import typing
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .synth import GeneratorConfig
from .training import TrainConfig


@dataclass
class CliConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        out = asdict(self.generator)
        out.update(asdict(self.train))
        return {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(out.items())}


def _field_types() -> dict[str, tuple[str, type]]:
    out = {}
    for section, cls in (("generator", GeneratorConfig), ("train", TrainConfig)):
        hints = typing.get_type_hints(cls)
        for f in fields(cls):
            out.setdefault(f.name, (section, hints[f.name]))
    return out


FIELDS = _field_types()


def _coerce(key: str, value, kind):
    if kind is bool:
        if isinstance(value, bool):
            return value
    elif kind is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif kind is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif kind is str:
        if isinstance(value, str):
            return value
    elif typing.get_origin(kind) is tuple:
        inner = typing.get_args(kind)
        if isinstance(value, (list, tuple)) and len(value) == len(inner):
            return tuple(_coerce(key, v, t) for v, t in zip(value, inner))
    raise ConfigError(f"config key {key!r}: {value!r} is not a valid {getattr(kind, '__name__', kind)}")


def parse_override(text: str) -> tuple[str, object]:
    """``key=value``; the value is parsed as JSON when possible, else kept as a string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(path=None, overrides: dict | None = None) -> CliConfig:
    """Defaults, then the JSON file (may be empty), then ``overrides``."""
    values: dict = {}
    if path is not None:
        text = Path(path).read_text()
        if text.strip():
            try:
                values = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: malformed JSON: {exc.msg}") from exc
            if not isinstance(values, dict):
                raise ConfigError(f"{path}: top level must be an object")
    values = {**values, **(overrides or {})}
    cfg = CliConfig()
    for key, value in values.items():
        if key not in FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        kind = FIELDS[key][1]
        value = _coerce(key, value, kind)
        for section in (cfg.generator, cfg.train):
            if hasattr(section, key):
                setattr(section, key, value)
    cfg.generator.validate()
    cfg.train.validate()
    return cfg
