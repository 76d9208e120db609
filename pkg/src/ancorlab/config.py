"""Plain-text nested configuration.

Files hold one ``dotted.key = value`` pair per line ('#' starts a comment):

    train.preset = ancor
    train.epochs = 100
    train.contrastive.temperature = 0.2
    data.subclasses = 4,4,4,4
    eval.mode = all-way

Keys mirror the dataclass tree under RunConfig; unknown keys are errors, and
values are coerced to the type of the field they replace. CLI flags are
applied after the file, so flags win.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .data import HierarchySpec
from .errors import ConfigError
from .fewshot import EvalConfig
from .trainer import TrainConfig

_BOOL_WORDS = {"true": True, "1": True, "yes": True, "on": True,
               "false": False, "0": False, "no": False, "off": False}


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: HierarchySpec = field(default_factory=HierarchySpec)
    eval: EvalConfig = field(default_factory=EvalConfig)


def _coerce(current, raw: str, key: str):
    raw = raw.strip()
    if isinstance(current, bool):
        if raw.lower() not in _BOOL_WORDS:
            raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
        return _BOOL_WORDS[raw.lower()]
    try:
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            return tuple(int(p) for p in raw.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(current).__name__}") from None
    return raw


def _set_path(obj, path: list[str], raw: str, full_key: str):
    name = path[0]
    names = {f.name for f in dataclasses.fields(obj)}
    if name not in names:
        raise ConfigError(f"unknown config key {full_key!r}")
    current = getattr(obj, name)
    if len(path) == 1:
        if dataclasses.is_dataclass(current):
            raise ConfigError(f"{full_key!r} is a section, not a value")
        new = _coerce(current, raw, full_key)
    else:
        if not dataclasses.is_dataclass(current):
            raise ConfigError(f"unknown config key {full_key!r}")
        new = _set_path(current, path[1:], raw, full_key)
    return dataclasses.replace(obj, **{name: new})


def apply_entries(cfg: RunConfig, entries: dict[str, str]) -> RunConfig:
    for key, value in entries.items():
        cfg = _set_path(cfg, key.split("."), value, key)
    return cfg


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, str]:
    entries: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"{origin}:{lineno}: empty key")
        entries[key] = value.strip()
    return entries


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Default config, updated by the file (if any), then by the overrides."""
    cfg = RunConfig()
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = apply_entries(cfg, parse_config_text(fh.read(), origin=str(path)))
    if overrides:
        cfg = apply_entries(cfg, overrides)
    return cfg


def config_entries(cfg: RunConfig) -> dict[str, object]:
    """Flat dotted-key snapshot; re-applying it reproduces the config."""
    out: dict[str, object] = {}

    def walk(obj, prefix: str):
        for f in dataclasses.fields(obj):
            val = getattr(obj, f.name)
            key = f"{prefix}{f.name}"
            if dataclasses.is_dataclass(val):
                walk(val, key + ".")
            elif isinstance(val, tuple):
                out[key] = ",".join(str(v) for v in val)
            else:
                out[key] = val
    walk(cfg, "")
    return out
