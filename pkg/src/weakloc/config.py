"""Run configuration: INI file with one section per module, plus overrides."""
from __future__ import annotations

import configparser
import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .localizer import LocalizerConfig
from .model import ModelConfig
from .synthgen import SynthConfig
from .trainer import TrainConfig

SECTIONS = {"model": ModelConfig, "train": TrainConfig, "localizer": LocalizerConfig, "synth": SynthConfig}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    localizer: LocalizerConfig = field(default_factory=LocalizerConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    # keys given explicitly (file or overrides), as "section.key"
    explicit: set[str] = field(default_factory=set)


def _parse_bool(raw: str) -> bool:
    v = raw.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _coerce(tp, raw: Any):
    if not isinstance(raw, str):
        return raw
    args = typing.get_args(tp)
    if typing.get_origin(tp) in (typing.Union, types.UnionType) and type(None) in args:
        if raw.strip().lower() in ("", "none", "null"):
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], raw)
    if typing.get_origin(tp) is tuple:
        return tuple(float(x) for x in raw.split(","))
    if tp is bool:
        return _parse_bool(raw)
    if tp in (int, float, str):
        return tp(raw.strip())
    raise ValueError(f"unsupported type {tp}")


def build(cls, values: Mapping[str, Any], section: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in values.items():
        key = key.replace("-", "_")
        if key not in names:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        try:
            kwargs[key] = _coerce(hints[key], raw)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from None
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def load_run_config(path: str | Path | None = None,
                    overrides: Mapping[str, Mapping[str, Any]] | None = None) -> RunConfig:
    """Merge an optional INI file with per-section overrides and validate everything."""
    merged: dict[str, dict[str, Any]] = {s: {} for s in SECTIONS}
    if path is not None:
        parser = configparser.ConfigParser()
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            merged[section].update(parser[section])
    for section, values in (overrides or {}).items():
        merged[section].update({k: v for k, v in values.items() if v is not None})
    built = {s: build(cls, merged[s], s) for s, cls in SECTIONS.items()}
    explicit = {f"{s}.{k.replace('-', '_')}" for s, vals in merged.items() for k in vals}
    return RunConfig(explicit=explicit, **built)
