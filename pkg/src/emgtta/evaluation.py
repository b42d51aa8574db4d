"""Current-session vs other-session adaptation protocol."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .adabn import adapt_buffer
from .align import AlignConfig, ConfigurationError, SourceStats, adapt_align
from .data import ProtocolSplit, SessionDataset, make_buffer
from .meta import calibrate
from .metrics import active_accuracy, majority_vote, raw_accuracy, vote_window
from .replay import ExemplarBuffer
from .tcn import TcnModel, forward

METHODS = ("none", "adabn", "align-mom", "align-cc", "align-gmm", "meta")


@dataclass(frozen=True)
class AdabnSettings:
    speed: float = 20.0
    alpha: float | None = None
    horizon: int | None = None


@dataclass(frozen=True)
class CalibrationSettings:
    steps: int = 20
    lr: float = 1.0
    der_weight: float = 0.0
    clip: float | None = 1.0


@dataclass(frozen=True)
class ProtocolConfig:
    method: str = "none"
    reps: int = 7
    mode: str = "balanced"
    seed: int = 0
    vote_seconds: float = 0.401
    adabn: AdabnSettings = AdabnSettings()
    align: AlignConfig = field(default_factory=AlignConfig)
    calibration: CalibrationSettings = CalibrationSettings()
    evaluate_source: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; expected one of {METHODS}")


def score(model: TcnModel, session: SessionDataset, bn="eval", vote_seconds: float = 0.401) -> dict[str, float]:
    """Raw, active-gesture and majority-voted active-gesture accuracy."""
    logits = forward(model, session.signal, bn=bn).data[0]
    pred = logits.argmax(axis=0)
    voted = majority_vote(pred, vote_window(session.sampling_rate, vote_seconds), model.config.classes)
    return {
        "raw": raw_accuracy(pred, session.labels),
        "active": active_accuracy(pred, session.labels),
        "voted": active_accuracy(voted, session.labels),
    }


def _mean_scores(scores: Sequence[dict]) -> dict[str, float]:
    return {k: float(np.nanmean([s[k] for s in scores])) for k in scores[0]} if scores else {}


@dataclass
class SessionResult:
    session_id: int
    buffer_samples: int
    current: dict
    other: dict
    base_current: dict
    base_other: dict
    source: dict | None = None
    base_source: dict | None = None
    partial: bool = False


@dataclass
class EvalReport:
    method: str
    seed: int
    config_digest: str
    sessions: list[SessionResult] = field(default_factory=list)

    def aggregate(self, key: str = "voted") -> dict[str, float]:
        def mean(attr):
            vals = [getattr(s, attr)[key] for s in self.sessions if getattr(s, attr) is not None]
            return float(np.nanmean(vals)) if vals else float("nan")

        out = {name: mean(name) for name in ("current", "other", "base_current", "base_other")}
        if any(s.source is not None for s in self.sessions):
            out["source"] = mean("source")
            out["base_source"] = mean("base_source")
        return out

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "config_digest": self.config_digest,
            "aggregate": self.aggregate(),
            "sessions": [asdict(s) for s in self.sessions],
        }

    def to_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=True) + "\n", encoding="utf-8")
        return path


def adapt(
    model: TcnModel,
    buffer: SessionDataset,
    config: ProtocolConfig,
    stats: SourceStats | None = None,
    replay: ExemplarBuffer | None = None,
    horizon: int | None = None,
):
    """(adapted model, BN mode, partial flag) for one adaptation buffer."""
    method = config.method
    if method == "none":
        return model, "eval", False
    if method == "adabn":
        s = config.adabn
        bn = adapt_buffer(model, buffer, s.speed, s.horizon or horizon, s.alpha)
        return model, bn.frozen(), False
    if method.startswith("align-"):
        if stats is None:
            raise ConfigurationError(f"method {method!r} needs cached source statistics")
        cfg = AlignConfig(**{**asdict(config.align), "mode": method.split("-", 1)[1]})
        res = adapt_align(model, buffer, stats, cfg)
        return res.model, "eval", res.partial
    c = config.calibration
    if c.der_weight > 0 and (replay is None or len(replay) == 0):
        raise ConfigurationError("calibration with a replay weight needs an exemplar buffer")
    res = calibrate(model, buffer, c.steps, c.lr, replay, c.der_weight, clip=c.clip)
    return res.model, "eval", res.partial


def run_protocol(
    model: TcnModel,
    split: ProtocolSplit,
    config: ProtocolConfig,
    stats: SourceStats | None = None,
    replay: ExemplarBuffer | None = None,
    config_digest: str = "",
) -> EvalReport:
    """Adapt on a buffer of each target session, then score the remainder
    (current) and every other target session in full (other).

    Each session starts from the same ``model``; nothing carries over.
    """
    if config.method.startswith("align-") and not model.has_adapters:
        raise ConfigurationError("alignment methods need a model with injected adapters")
    if config.method == "meta" and not model.has_adapters:
        raise ConfigurationError("meta calibration needs a model with injected adapters")
    start = model.digest()
    vs = config.vote_seconds
    report = EvalReport(config.method, config.seed, config_digest)
    base_full = {s.session_id: score(model, s, vote_seconds=vs) for s in split.target}
    base_src = [score(model, s, vote_seconds=vs) for s in split.source_val] if config.evaluate_source else None
    for i, session in enumerate(split.target):
        if model.digest() != start:
            raise RuntimeError("model state leaked between target sessions")
        buffer, remainder = make_buffer(session, config.mode, config.reps, config.seed * 1000 + i)
        adapted, bn, partial = adapt(model, buffer, config, stats, replay, horizon=session.n_samples)
        others = [s for s in split.target if s.session_id != session.session_id]
        result = SessionResult(
            session.session_id,
            buffer.n_samples,
            current=score(adapted, remainder, bn, vs),
            other=_mean_scores([score(adapted, s, bn, vs) for s in others]),
            base_current=score(model, remainder, vote_seconds=vs),
            base_other=_mean_scores([base_full[s.session_id] for s in others]),
            partial=partial,
        )
        if base_src is not None:
            result.source = _mean_scores([score(adapted, s, bn, vs) for s in split.source_val])
            result.base_source = _mean_scores(base_src)
        report.sessions.append(result)
    return report


def intra_inter(model: TcnModel, split: ProtocolSplit, vote_seconds: float = 0.401) -> tuple[float, float]:
    """Mean voted accuracy on source validation (intra) and target sessions (inter)."""
    intra = np.mean([score(model, s, vote_seconds=vote_seconds)["voted"] for s in split.source_val])
    inter = np.mean([score(model, s, vote_seconds=vote_seconds)["voted"] for s in split.target])
    return float(intra), float(inter)


# ---------------------------------------------------------------- figure exports


def write_rows(path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    """CSV with LF line endings; floats written with repr for exact round trips."""
    path = Path(path)
    with path.open("w", newline="\n", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return path
