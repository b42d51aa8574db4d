"""Causal adaptive batch normalization.

Each BN layer keeps its source running moments untouched and accumulates
target moments online (Welford).  The moments used for normalization are a
convex blend of the two, with a weight that can grow with the amount of
target data seen.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import SessionDataset
from .metrics import active_accuracy, majority_vote, vote_window
from .tcn import TcnModel, forward


class ContractError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


def batch_stats(activations) -> tuple[np.ndarray, np.ndarray]:
    """Population mean and variance per channel over batch and time axes."""
    z = np.asarray(activations, dtype=np.float64)
    if z.ndim != 3:
        raise ContractError(f"expected activations [B, C, U], got shape {z.shape}")
    if z.shape[0] * z.shape[2] == 0:
        raise ContractError("batch statistics of an empty tensor are undefined")
    mean = z.mean(axis=(0, 2))
    var = ((z - mean[None, :, None]) ** 2).mean(axis=(0, 2))
    return mean, var


def alpha_schedule(t: float, horizon: float, speed: float) -> float:
    """Blend weight min(1, speed * t / horizon)."""
    if t < 0 or horizon < 1 or speed <= 0:
        raise ContractError(f"alpha_schedule needs t >= 0, horizon >= 1, speed > 0 (got {t}, {horizon}, {speed})")
    return min(1.0, speed * t / horizon)


@dataclass
class BnState:
    """Source running moments plus online accumulators for one BN layer."""

    ema_mean: np.ndarray
    ema_var: np.ndarray
    count: int = 0
    mean: np.ndarray | None = None
    m2: np.ndarray | None = None
    alpha: float = 0.0
    speed: float = 1.0
    horizon: int = 1

    def __post_init__(self):
        self.ema_mean = np.asarray(self.ema_mean, dtype=np.float64).copy()
        self.ema_var = np.asarray(self.ema_var, dtype=np.float64).copy()
        if self.mean is None:
            self.reset()

    def reset(self) -> None:
        self.count = 0
        self.mean = np.zeros_like(self.ema_mean)
        self.m2 = np.zeros_like(self.ema_mean)

    @property
    def var(self) -> np.ndarray:
        """Online population variance; zero before any sample."""
        if self.count == 0:
            return np.zeros_like(self.m2)
        return self.m2 / self.count


def welford_update(state: BnState, sample) -> BnState:
    """Fold one per-channel sample z[C] into the online moments (in place)."""
    z = np.asarray(sample, dtype=np.float64)
    state.count += 1
    delta = z - state.mean
    state.mean = state.mean + delta / state.count
    state.m2 = state.m2 + delta * (z - state.mean)
    return state


def welford_merge(state: BnState, block) -> BnState:
    """Fold a block of samples [C, n] at once (pairwise combination, in place).

    Equivalent to ``n`` calls of :func:`welford_update` up to rounding.
    """
    z = np.asarray(block, dtype=np.float64)
    n = z.shape[1]
    if n == 0:
        return state
    b_mean = z.mean(axis=1)
    b_m2 = ((z - b_mean[:, None]) ** 2).sum(axis=1)
    total = state.count + n
    delta = b_mean - state.mean
    state.mean = state.mean + delta * (n / total)
    state.m2 = state.m2 + b_m2 + delta**2 * (state.count * n / total)
    state.count = total
    return state


def blend(state: BnState) -> tuple[np.ndarray, np.ndarray]:
    """(mean, var) to normalize with: (1 - alpha) * source + alpha * online."""
    a = state.alpha
    if not 0.0 <= a <= 1.0:
        raise ContractError(f"blend weight must lie in [0, 1], got {a}")
    if a == 0.0:
        return state.ema_mean.copy(), state.ema_var.copy()
    if a == 1.0:
        return state.mean.copy(), state.var.copy()
    return (1 - a) * state.ema_mean + a * state.mean, (1 - a) * state.ema_var + a * state.var


class AdaptiveBn:
    """Per-layer BN states bound to a model, usable as a ``forward`` BN mode.

    ``alpha`` is either a fixed weight or ``None`` for the count-based schedule.
    The model's running statistics are copied, never written.
    """

    def __init__(self, model: TcnModel, speed: float = 1.0, horizon: int = 1, alpha: float | None = None):
        if alpha is not None and not 0.0 <= alpha <= 1.0:
            raise ContractError(f"blend weight must lie in [0, 1], got {alpha}")
        self.fixed_alpha = alpha
        self.states = {
            name: BnState(mean, var, speed=speed, horizon=max(1, int(horizon)))
            for name, (mean, var) in model.bn_stats.items()
        }

    def _refresh_alpha(self, state: BnState) -> None:
        if self.fixed_alpha is not None:
            state.alpha = self.fixed_alpha if state.count > 0 else 0.0
        else:
            state.alpha = alpha_schedule(state.count, state.horizon, state.speed)

    def reset(self) -> None:
        for s in self.states.values():
            s.reset()
            s.alpha = 0.0

    def frozen(self):
        """BN mode that normalizes with the current blend and learns nothing."""
        stats = {name: blend(s) for name, s in self.states.items()}
        return lambda name, z: stats[name]

    def absorbing(self):
        """BN mode that first merges the activations it sees, then blends.

        One forward pass over a buffer adapts every layer in order, each on
        activations already normalized by the adapted layers beneath it.
        """

        def mode(name, z):
            s = self.states[name]
            welford_merge(s, np.moveaxis(z, 1, 0).reshape(z.shape[1], -1))
            self._refresh_alpha(s)
            return blend(s)

        return mode

    def streaming(self, skip: int):
        """BN mode for one causal chunk: normalize with the pre-chunk blend,
        then queue the activations after ``skip`` context steps for merging."""
        pending: dict[str, np.ndarray] = {}

        def mode(name, z):
            pending[name] = np.moveaxis(z[:, :, skip:], 1, 0).reshape(z.shape[1], -1)
            return blend(self.states[name])

        def commit():
            for name, block in pending.items():
                s = self.states[name]
                welford_merge(s, block)
                self._refresh_alpha(s)
            pending.clear()

        return mode, commit


def adapt_buffer(
    model: TcnModel,
    buffer: SessionDataset,
    speed: float = 1.0,
    horizon: int | None = None,
    alpha: float | None = None,
) -> AdaptiveBn:
    """Accumulate target moments over ``buffer`` in one pass; returns the states.

    ``horizon`` defaults to the buffer length; with ``alpha=None`` the blend
    weight follows the schedule at t = number of buffer samples.
    """
    if buffer.n_samples < model.config.receptive_field:
        raise InsufficientDataError(
            f"buffer has {buffer.n_samples} samples, fewer than the receptive field {model.config.receptive_field}"
        )
    bn = AdaptiveBn(model, speed, horizon or buffer.n_samples, alpha)
    forward(model, buffer.signal, bn=bn.absorbing())
    return bn


@dataclass
class OnlineTrace:
    t: np.ndarray
    alpha: np.ndarray
    error: np.ndarray
    other_error: np.ndarray | None = None

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="\n", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            header = ["t_samples", "alpha", "error_current"]
            if self.other_error is not None:
                header.append("error_other")
            w.writerow(header)
            for i in range(self.t.size):
                row = [int(self.t[i]), repr(float(self.alpha[i])), repr(float(self.error[i]))]
                if self.other_error is not None:
                    row.append(repr(float(self.other_error[i])))
                w.writerow(row)
        return path


def adapt_stream(
    model: TcnModel,
    stream: SessionDataset,
    speed: float = 1.0,
    cadence: int | None = None,
    horizon: int | None = None,
    alpha: float | None = None,
    others: Sequence[SessionDataset] = (),
    vote: bool = True,
) -> OnlineTrace:
    """Classify ``stream`` chunk by chunk while adapting BN causally.

    Each chunk of ``cadence`` samples is classified with the moments gathered
    before it, then folded into them.  The trace reports, after each chunk,
    the running active-gesture error on the stream so far and, when
    ``others`` are given, the error of the current state on those sessions.
    """
    rf = model.config.receptive_field
    if stream.n_samples < rf:
        raise InsufficientDataError(f"stream has {stream.n_samples} samples, fewer than the receptive field {rf}")
    cadence = cadence or rf
    horizon = horizon or stream.n_samples
    bn = AdaptiveBn(model, speed, horizon, alpha)
    ctx = rf - 1
    preds = np.empty(stream.n_samples, dtype=np.int64)
    ts, alphas, errs, other_errs = [], [], [], []
    window = vote_window(stream.sampling_rate)
    n_classes = model.config.classes
    for start in range(0, stream.n_samples, cadence):
        stop = min(start + cadence, stream.n_samples)
        lo = max(0, start - ctx)
        mode, commit = bn.streaming(start - lo)
        logits = forward(model, stream.signal[:, lo:stop], bn=mode).data[0]
        preds[start:stop] = logits[:, start - lo :].argmax(axis=0)
        commit()
        seen = majority_vote(preds[:stop], window, n_classes) if vote else preds[:stop]
        acc = active_accuracy(seen, stream.labels[:stop])
        ts.append(stop)
        alphas.append(next(iter(bn.states.values())).alpha)
        errs.append(np.nan if np.isnan(acc) else 1.0 - acc)
        if others:
            frozen = bn.frozen()
            other_errs.append(1.0 - float(np.nanmean([session_accuracy(model, s, frozen, vote) for s in others])))
    return OnlineTrace(
        np.array(ts), np.array(alphas), np.array(errs), np.array(other_errs) if others else None
    )


def session_accuracy(model: TcnModel, session: SessionDataset, bn="eval", vote: bool = True, params=None) -> float:
    """Active-gesture accuracy of ``model`` on a whole session (majority voted)."""
    logits = forward(model, session.signal, bn=bn, params=params).data[0]
    pred = logits.argmax(axis=0)
    if vote:
        pred = majority_vote(pred, vote_window(session.sampling_rate), model.config.classes)
    return active_accuracy(pred, session.labels)
