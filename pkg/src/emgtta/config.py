"""Run configuration: one YAML document covering every module's knobs.

The JSON schema is derived from the dataclasses below, so a typo or a wrong
type is reported with its field path before anything runs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import re
import types
import typing
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import yaml

from .align import AlignConfig
from .evaluation import AdabnSettings, CalibrationSettings
from .meta import MetaConfig
from .tcn import TcnConfig
from .training import TrainConfig

CONFIG_ENV = "EMGTTA_CONFIG"


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path or '<root>'}: {message}")
        self.path = path


@dataclass(frozen=True)
class SynthSection:
    sessions: int = 10
    classes: int = 7
    reps: int = 9
    drift_gain: float = 2.0
    drift_offset: float = 0.7
    drift_rotation: float = 0.2
    drift_noise: float = 0.0
    sampling_rate: float = 25.0
    gesture_s: float = 4.0
    rest_s: float = 4.0
    template_scale: float = 3.0
    template_density: float = 0.25
    noise_std: float = 0.25
    amplitude_jitter: float = 0.2
    channel_corr: float = 0.5


@dataclass(frozen=True)
class SplitSection:
    n_source: int = 5
    train_fraction: float = 0.7


@dataclass(frozen=True)
class ReplaySection:
    capacity_seconds: float = 120.0
    stride: int | None = None


@dataclass(frozen=True)
class StatsSection:
    gmm_components: int = 8
    class_conditional: bool = True


@dataclass(frozen=True)
class MetaSection:
    epochs: int = 10
    settings: MetaConfig = MetaConfig()


@dataclass(frozen=True)
class ProtocolSection:
    reps: int = 7
    mode: str = "balanced"
    vote_seconds: float = 0.401
    adabn: AdabnSettings = AdabnSettings()
    align: AlignConfig = AlignConfig(steps=60, lr=0.2, der_weight=0.03)
    calibration: CalibrationSettings = CalibrationSettings()


@dataclass(frozen=True)
class ReportSection:
    """Sweep grids for the figure exports of ``emgtta report``."""

    adabn_reps: tuple[int, ...] = (1, 2, 4, 7)
    adabn_alphas: tuple[float, ...] = (0.0, 0.25, 0.5, 1.0)
    trace_cadence_s: float = 10.0
    align_reps: tuple[int, ...] = (7,)
    calibration_reps: tuple[int, ...] = (1, 7)
    calibration_der_weight: float = 0.1
    buffer_seconds: tuple[float, ...] = (0.0, 15.0, 60.0, 120.0)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    synth: SynthSection = SynthSection()
    model: TcnConfig = TcnConfig(channels=16, blocks=3, lora_block=0)
    train: TrainConfig = TrainConfig(epochs=6, window=150)
    split: SplitSection = SplitSection()
    replay: ReplaySection = ReplaySection()
    stats: StatsSection = StatsSection()
    meta: MetaSection = MetaSection()
    protocol: ProtocolSection = ProtocolSection()
    report: ReportSection = ReportSection()

    def __post_init__(self):
        if not 1 <= self.split.n_source < self.synth.sessions:
            raise ConfigError("split.n_source", f"must be in 1..{self.synth.sessions - 1} for {self.synth.sessions} sessions")

    def to_dict(self) -> dict:
        return _to_plain(self)

    def digest(self) -> str:
        """Short hash of the fully resolved configuration."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------- schema


def _type_schema(tp) -> dict:
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        inner = _type_schema(args[0]) if len(args) == 1 else {"anyOf": [_type_schema(a) for a in args]}
        return {"anyOf": [inner, {"type": "null"}]}
    if origin is tuple:
        return {"type": "array", "items": _type_schema(typing.get_args(tp)[0])}
    if dataclasses.is_dataclass(tp):
        return schema_for(tp)
    if tp is bool:
        return {"type": "boolean"}
    if tp is int:
        return {"type": "integer"}
    if tp is float:
        return {"type": "number"}
    if tp is str:
        return {"type": "string"}
    raise TypeError(f"no schema for {tp!r}")


def schema_for(cls) -> dict:
    hints = typing.get_type_hints(cls)
    props = {f.name: _type_schema(hints[f.name]) for f in dataclasses.fields(cls)}
    return {"type": "object", "properties": props, "additionalProperties": False}


# value constraints beyond the types, keyed by field path
BOUNDS = {
    "seed": {"minimum": 0},
    "synth.sessions": {"minimum": 2},
    "synth.classes": {"minimum": 1},
    "synth.reps": {"minimum": 1},
    "synth.sampling_rate": {"exclusiveMinimum": 0},
    "synth.gesture_s": {"exclusiveMinimum": 0},
    "synth.rest_s": {"minimum": 0},
    "synth.noise_std": {"minimum": 0},
    "split.n_source": {"minimum": 1},
    "split.train_fraction": {"exclusiveMinimum": 0, "exclusiveMaximum": 1},
    "replay.capacity_seconds": {"minimum": 0},
    "stats.gmm_components": {"minimum": 1},
    "meta.epochs": {"minimum": 0},
    "protocol.reps": {"minimum": 1},
    "protocol.mode": {"enum": ["balanced", "unbalanced"]},
    "protocol.vote_seconds": {"minimum": 0},
    "protocol.adabn.speed": {"minimum": 0},
    "protocol.adabn.alpha": {"anyOf": [{"type": "null"}, {"minimum": 0, "maximum": 1}]},
    "protocol.align.steps": {"minimum": 0},
    "protocol.align.lr": {"minimum": 0},
    "protocol.calibration.steps": {"minimum": 0},
    "protocol.calibration.lr": {"minimum": 0},
    "report.trace_cadence_s": {"exclusiveMinimum": 0},
    "report.adabn_reps": {"items": {"minimum": 1}},
    "report.adabn_alphas": {"items": {"minimum": 0, "maximum": 1}},
    "report.align_reps": {"items": {"minimum": 1}},
    "report.calibration_reps": {"items": {"minimum": 1}},
    "report.buffer_seconds": {"items": {"minimum": 0}},
}


def schema() -> dict:
    s = schema_for(RunConfig)
    for dotted, extra in BOUNDS.items():
        node = s
        for key in dotted.split("."):
            node = node["properties"][key]
        node.setdefault("allOf", []).append(extra)
    s["$schema"] = "https://json-schema.org/draft/2020-12/schema"
    s["title"] = "emgtta run configuration"
    return s


# ---------------------------------------------------------------- (de)serialization


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    return obj


def _build(cls, data: dict, path: str):
    hints = typing.get_type_hints(cls)
    base = cls()
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        tp = hints[f.name]
        if dataclasses.is_dataclass(tp):
            merged = {**_to_plain(getattr(base, f.name)), **value}
            value = _build(tp, merged, f"{path}.{f.name}" if path else f.name)
        elif typing.get_origin(tp) is tuple:
            item = typing.get_args(tp)[0]
            value = tuple(float(v) if item is float else v for v in value)
        elif tp is float and isinstance(value, int):
            value = float(value)
        kwargs[f.name] = value
    try:
        return dataclasses.replace(base, **kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as e:
        # narrow to the offending field when the message names one
        named = [f.name for f in dataclasses.fields(cls) if re.search(rf"\b{f.name}\b", str(e))]
        if len(named) == 1:
            path = f"{path}.{named[0]}" if path else named[0]
        raise ConfigError(path, str(e)) from e


def from_dict(data: dict | None) -> RunConfig:
    data = data or {}
    validator = jsonschema.Draft202012Validator(schema())
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = [str(p) for p in err.absolute_path]
        if err.validator == "additionalProperties":
            extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
            path.append(extra[0])
        raise ConfigError(".".join(path), err.message)
    return _build(RunConfig, data, "")


def set_path(data: dict, dotted: str, value) -> dict:
    """Set ``a.b.c`` in a nested dict (used for command-line overrides)."""
    keys = dotted.split(".")
    cur = data
    for k in keys[:-1]:
        cur = cur.setdefault(k, {})
        if not isinstance(cur, dict):
            raise ConfigError(dotted, "cannot override inside a non-mapping value")
    cur[keys[-1]] = value
    return data


def load(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a YAML config (default: ``$EMGTTA_CONFIG`` if set) and apply overrides."""
    path = path or os.environ.get(CONFIG_ENV)
    data: dict = {}
    if path:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError("", f"cannot read config file {path}: {e.strerror}") from e
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as e:
            raise ConfigError("", f"invalid YAML in {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError("", "config document must be a mapping")
    for k, v in (overrides or {}).items():
        set_path(data, k, v)
    return from_dict(data)


def dump(config: RunConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=True)
