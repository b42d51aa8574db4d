"""End-to-end stages shared by the CLI and the acceptance experiments."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .align import SourceStats, collect_source_stats
from .config import RunConfig
from .data import DriftFamily, ProtocolSplit, SessionDataset, SynthConfig, split_protocol, synth_sessions
from .evaluation import EvalReport, ProtocolConfig, run_protocol
from .meta import meta_train
from .replay import ExemplarBuffer, capacity_windows, fill_buffer
from .tcn import TcnModel, build, inject_lora
from .training import train_source


def make_sessions(run: RunConfig, drift: bool = True) -> list[SessionDataset]:
    s = run.synth
    cfg = SynthConfig(
        sampling_rate=s.sampling_rate,
        gesture_s=s.gesture_s,
        rest_s=s.rest_s,
        template_scale=s.template_scale,
        template_density=s.template_density,
        noise_std=s.noise_std,
        amplitude_jitter=s.amplitude_jitter,
        channel_corr=s.channel_corr,
    )
    family = DriftFamily(s.drift_gain, s.drift_offset, s.drift_rotation, s.drift_noise) if drift else DriftFamily()
    return synth_sessions(s.sessions, s.classes, s.reps, family, seed=run.seed, config=cfg)


def make_split(run: RunConfig, sessions) -> ProtocolSplit:
    return split_protocol(
        sessions, run.split.n_source, run.split.train_fraction, gap=run.model.receptive_field
    )


def train_base(run: RunConfig, split: ProtocolSplit) -> TcnModel:
    train_cfg = dataclasses.replace(run.train, seed=run.seed)
    model, _ = train_source(build(run.model, run.seed), split.source_train, train_cfg)
    return model


def make_replay(run: RunConfig, model: TcnModel, split: ProtocolSplit) -> ExemplarBuffer:
    rate = split.source_train[0].sampling_rate
    cap = capacity_windows(run.replay.capacity_seconds, rate, model.config.receptive_field)
    return fill_buffer(model, split.source_train, cap, run.seed, run.replay.stride)


def make_stats(run: RunConfig, adapted: TcnModel, split: ProtocolSplit, replay: ExemplarBuffer | None) -> SourceStats:
    return collect_source_stats(
        adapted, split.source_train, run.stats.gmm_components, run.seed, run.stats.class_conditional, replay
    )


def make_meta(run: RunConfig, adapted: TcnModel, split: ProtocolSplit, replay=None, curve_path=None):
    return meta_train(
        adapted, split.source_train, run.meta.settings, run.meta.epochs, run.seed, replay, curve_path
    )


def protocol_config(run: RunConfig, method: str, **overrides) -> ProtocolConfig:
    p = run.protocol
    fields = dict(
        reps=p.reps,
        mode=p.mode,
        vote_seconds=p.vote_seconds,
        adabn=p.adabn,
        align=p.align,
        calibration=p.calibration,
    )
    fields.update(overrides)
    # projections and sampling always follow the run seed
    fields["align"] = dataclasses.replace(fields["align"], seed=run.seed)
    return ProtocolConfig(method=method, seed=run.seed, **fields)


@dataclass
class Workbench:
    """Every artifact a protocol run may need, built lazily from one config."""

    run: RunConfig
    _split: ProtocolSplit | None = None
    _base: TcnModel | None = None
    _replay: ExemplarBuffer | None = None
    _stats: SourceStats | None = None
    _meta: TcnModel | None = None

    @property
    def split(self) -> ProtocolSplit:
        if self._split is None:
            self._split = make_split(self.run, make_sessions(self.run))
        return self._split

    @property
    def base(self) -> TcnModel:
        if self._base is None:
            self._base = train_base(self.run, self.split)
        return self._base

    @property
    def adapted(self) -> TcnModel:
        return inject_lora(self.base, self.run.model.lora_rank, self.run.seed)

    @property
    def replay(self) -> ExemplarBuffer:
        if self._replay is None:
            self._replay = make_replay(self.run, self.base, self.split)
        return self._replay

    @property
    def stats(self) -> SourceStats:
        if self._stats is None:
            self._stats = make_stats(self.run, self.adapted, self.split, self.replay)
        return self._stats

    @property
    def meta(self) -> TcnModel:
        if self._meta is None:
            self._meta, _ = make_meta(self.run, self.adapted, self.split)
        return self._meta

    def evaluate(self, method: str, **overrides) -> EvalReport:
        cfg = protocol_config(self.run, method, **overrides)
        if method == "none" or method == "adabn":
            model, stats = self.base, None
        elif method == "meta":
            model, stats = self.meta, None
        else:
            model, stats = self.adapted, self.stats
        return run_protocol(model, self.split, cfg, stats, self.replay, self.run.digest())
