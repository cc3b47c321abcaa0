"""Layered run configuration: built-in defaults < INI file < command-line flags.

Every section maps onto one config dataclass; keys are its field names.
Tuples are written comma-separated and mappings as ``key:value`` pairs.
"""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from typing import Any, Mapping

from .external import EndpointConfig
from .grpo import GrpoConfig
from .heuristic import HeuristicConfig
from .env import SensingConfig, TaskModelConfig
from .scenegen import CorruptionConfig, GenConfig, SegGenConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    task: str = "detection"
    n_scenes: int = 50
    policy: str = "random"
    reward_mode: str = "combined"
    iou_thr: float = 0.5
    grid_side: int = 3
    decode: str = "sample"
    eval_samples: int = 1


SECTIONS = {
    "run": RunConfig,
    "generator": GenConfig,
    "seg_generator": SegGenConfig,
    "corruption": CorruptionConfig,
    "sensing": SensingConfig,
    "task_model": TaskModelConfig,
    "heuristic": HeuristicConfig,
    "grpo": GrpoConfig,
    "endpoint": EndpointConfig,
}


@dataclass(frozen=True)
class Config:
    run: RunConfig = field(default_factory=RunConfig)
    generator: GenConfig = field(default_factory=GenConfig)
    seg_generator: SegGenConfig = field(default_factory=SegGenConfig)
    corruption: CorruptionConfig = field(default_factory=CorruptionConfig)
    sensing: SensingConfig = field(default_factory=SensingConfig)
    task_model: TaskModelConfig = field(default_factory=TaskModelConfig)
    heuristic: HeuristicConfig = field(default_factory=HeuristicConfig)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    endpoint: EndpointConfig = field(default_factory=EndpointConfig)

    def with_values(self, values: Mapping[tuple[str, str], str]) -> "Config":
        """Apply ``{(section, key): text}`` overrides, coercing by the field's default type."""
        cfg = self
        grouped: dict[str, dict[str, Any]] = {}
        for (sec, key), text in values.items():
            if sec not in SECTIONS:
                raise ConfigError(f"unknown config section [{sec}]")
            current = getattr(cfg, sec)
            names = {f.name for f in fields(current)}
            if key not in names:
                raise ConfigError(f"unknown key {key!r} in [{sec}]")
            grouped.setdefault(sec, {})[key] = _coerce(getattr(current, key), text, f"{sec}.{key}")
        for sec, kv in grouped.items():
            try:
                cfg = replace(cfg, **{sec: replace(getattr(cfg, sec), **kv)})
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{sec}]: {exc}") from None
        return cfg

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for sec in SECTIONS:
            obj = getattr(self, sec)
            cp[sec] = {f.name: _format(getattr(obj, f.name)) for f in fields(obj)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue().rstrip("\n") + "\n"

    def as_dict(self) -> dict:
        out = {}
        for sec in SECTIONS:
            obj = getattr(self, sec)
            out[sec] = {f.name: _jsonable(getattr(obj, f.name)) for f in fields(obj)}
        return out

    def header(self) -> str:
        """The effective config as ``#``-prefixed lines, for CSV report headers."""
        return "".join(f"# {line}\n" if line else "#\n" for line in self.to_ini().splitlines())


def _jsonable(v):
    if isinstance(v, tuple):
        return list(v)
    if isinstance(v, Mapping):
        return dict(v)
    return v


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, Mapping):
        return ",".join(f"{k}:{x!r}" for k, x in v.items())
    if isinstance(v, float):
        return repr(v)
    return str(v)


_BOOL = {"1": True, "yes": True, "true": True, "on": True, "0": False, "no": False, "false": False, "off": False}


def _coerce(default, text: str, name: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            return _BOOL[text.lower()]
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(float(x) for x in text.split(",") if x.strip())
        if isinstance(default, Mapping):
            out = {}
            for part in (p for p in text.split(",") if p.strip()):
                k, v = part.split(":")
                out[k.strip()] = float(v)
            return out
        return text
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad value {text!r} for {name}: {exc}") from None


def read_ini(text: str) -> dict[tuple[str, str], str]:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config file: {exc}") from None
    return {(sec, k): v for sec in cp.sections() for k, v in cp[sec].items()}


def load_config(path=None, overrides: Mapping[tuple[str, str], str] | None = None) -> Config:
    cfg = Config()
    if path is not None:
        try:
            with open(path, encoding="utf-8") as f:
                cfg = cfg.with_values(read_ini(f.read()))
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from None
    if overrides:
        cfg = cfg.with_values(overrides)
    return cfg
