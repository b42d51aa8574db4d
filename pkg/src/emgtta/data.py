"""Session data model, CSV ingestion, a synthetic drift generator and protocol splits.

A session is one continuous recording: a ``[channels, T]`` signal, one class
label per sample (0 is rest) and one repetition id per sample.  Repetition
ids number the gesture bouts of a session from 1; a bout is a gesture
segment together with the rest period that follows it, and any rest before
the first gesture carries id 0.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import expm
from scipy.signal import lfilter

N_CHANNELS = 14
N_CLASSES = 8
REST = 0


class DataError(ValueError):
    pass


class ParseError(DataError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


@dataclass(frozen=True, eq=False)
class SessionDataset:
    session_id: int
    signal: np.ndarray
    labels: np.ndarray
    reps: np.ndarray
    sampling_rate: float = 2000.0
    # ids of every session whose samples ended up in this object
    origin: frozenset = field(default=frozenset())

    def __post_init__(self):
        signal = np.asarray(self.signal, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        reps = np.asarray(self.reps, dtype=np.int64)
        object.__setattr__(self, "signal", signal)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "reps", reps)
        if not self.origin:
            object.__setattr__(self, "origin", frozenset({self.session_id}))
        if signal.ndim != 2:
            raise DataError(f"signal must be [channels, T], got shape {signal.shape}")
        t = signal.shape[1]
        if labels.shape != (t,) or reps.shape != (t,):
            raise DataError(
                f"labels/reps must have length {t}, got {labels.shape} and {reps.shape}"
            )
        if labels.size and (labels.min() < 0 or labels.max() >= N_CLASSES):
            raise DataError(f"labels must lie in 0..{N_CLASSES - 1}")
        if (reps < 0).any():
            raise DataError("repetition ids must be non-negative")

    @property
    def n_samples(self) -> int:
        return self.signal.shape[1]

    @property
    def n_channels(self) -> int:
        return self.signal.shape[0]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sampling_rate

    def segment(self, start: int, stop: int) -> "SessionDataset":
        return SessionDataset(
            self.session_id,
            self.signal[:, start:stop].copy(),
            self.labels[start:stop].copy(),
            self.reps[start:stop].copy(),
            self.sampling_rate,
            self.origin,
        )

    def bouts(self) -> dict[int, tuple[int, np.ndarray]]:
        """rep id -> (gesture class, sample indices) for every bout with id > 0."""
        out = {}
        for rep in np.unique(self.reps):
            if rep == 0:
                continue
            idx = np.flatnonzero(self.reps == rep)
            active = self.labels[idx][self.labels[idx] != REST]
            cls = int(np.bincount(active).argmax()) if active.size else REST
            out[int(rep)] = (cls, idx)
        return out

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.signal, self.labels, self.reps):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


def concat_sessions(parts: Sequence[SessionDataset], session_id: int | None = None) -> SessionDataset:
    if not parts:
        raise DataError("nothing to concatenate")
    origin = frozenset().union(*(p.origin for p in parts))
    return SessionDataset(
        parts[0].session_id if session_id is None else session_id,
        np.concatenate([p.signal for p in parts], axis=1),
        np.concatenate([p.labels for p in parts]),
        np.concatenate([p.reps for p in parts]),
        parts[0].sampling_rate,
        origin,
    )


# ---------------------------------------------------------------- CSV


def csv_header(n_channels: int = N_CHANNELS) -> str:
    return ",".join(["t"] + [f"ch{c + 1:02d}" for c in range(n_channels)] + ["label", "rep"])


def save_session(session: SessionDataset, path) -> Path:
    path = Path(path)
    rows = session.signal.T
    lines = [csv_header(session.n_channels)]
    for t in range(session.n_samples):
        vals = ",".join(repr(float(v)) for v in rows[t])
        lines.append(f"{t},{vals},{session.labels[t]},{session.reps[t]}")
    path.write_bytes(("\n".join(lines) + "\n").encode("utf-8"))
    return path


def load_session(path, sampling_rate: float = 2000.0, session_id: int | None = None) -> SessionDataset:
    """Parse a session CSV; rest and transient samples are kept as recorded."""
    path = Path(path)
    text = path.read_bytes().decode("utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError(path, 1, "empty file")
    expected = csv_header(N_CHANNELS)
    header = lines[0].rstrip("\r")
    n_cols = len(header.split(","))
    if header != expected:
        got = n_cols - 3
        raise ParseError(
            path, 1, f"expected header with {N_CHANNELS} channels ({expected!r}), got {got} channel columns"
        )
    n = len(lines) - 1
    signal = np.empty((N_CHANNELS, n))
    labels = np.empty(n, dtype=np.int64)
    reps = np.empty(n, dtype=np.int64)
    prev_t = None
    for i, line in enumerate(lines[1:]):
        lineno = i + 2
        cols = line.split(",")
        if len(cols) != n_cols:
            raise ParseError(path, lineno, f"expected {n_cols} columns, got {len(cols)}")
        try:
            t = int(cols[0])
            signal[:, i] = [float(c) for c in cols[1:-2]]
            label = int(cols[-2])
            rep = int(cols[-1])
        except ValueError as exc:
            raise ParseError(path, lineno, f"malformed value: {exc}") from None
        if prev_t is not None and t <= prev_t:
            raise ParseError(path, lineno, f"time {t} does not increase (previous {prev_t})")
        if not 0 <= label < N_CLASSES:
            raise ParseError(path, lineno, f"unknown label {label}")
        if rep < 0:
            raise ParseError(path, lineno, f"negative repetition id {rep}")
        prev_t = t
        labels[i] = label
        reps[i] = rep
    if session_id is None:
        found = re.findall(r"\d+", path.stem)
        session_id = int(found[-1]) if found else 0
    return SessionDataset(session_id, signal, labels, reps, sampling_rate)


# ---------------------------------------------------------------- synthetic sessions


def _ring_generator(n: int) -> np.ndarray:
    s = np.zeros((n, n))
    for c in range(n):
        s[c, (c + 1) % n] += 1.0
        s[(c + 1) % n, c] -= 1.0
    return s


@dataclass(frozen=True, eq=False)
class DriftSpec:
    """Per-session acquisition drift: x' = R(angle) (gain * x) + offset + noise."""

    gain: np.ndarray
    offset: np.ndarray
    rotation: float = 0.0
    noise_scale: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "gain", np.asarray(self.gain, dtype=np.float64))
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=np.float64))
        if (self.gain <= 0).any():
            raise DataError("drift gains must be positive")
        if abs(self.rotation) >= np.pi / 4:
            raise DataError("rotation angle magnitude must be below pi/4")
        if self.noise_scale < 0:
            raise DataError("noise scale must be non-negative")

    @classmethod
    def identity(cls, channels: int = N_CHANNELS) -> "DriftSpec":
        return cls(np.ones(channels), np.zeros(channels))

    def mixing(self) -> np.ndarray:
        n = self.gain.size
        if self.rotation == 0.0:
            return np.eye(n)
        return expm(self.rotation * _ring_generator(n))

    def apply(self, signal: np.ndarray) -> np.ndarray:
        out = self.mixing() @ (self.gain[:, None] * signal) + self.offset[:, None]
        if self.noise_scale > 0:
            rng = np.random.default_rng(self.seed)
            out = out + self.noise_scale * rng.normal(size=out.shape)
        return out


@dataclass(frozen=True)
class DriftFamily:
    """Distribution of per-session drifts.

    Each channel gain is ``gain ** u`` with u uniform in [-1, 1], offsets are
    ``offset * N(0, 1)``, the mixing angle is ``rotation * U(-1, 1)``.
    """

    gain: float = 1.0
    offset: float = 0.0
    rotation: float = 0.0
    noise: float = 0.0

    def sample(self, rng: np.random.Generator, channels: int, seed: int) -> DriftSpec:
        u = rng.uniform(-1.0, 1.0, size=channels)
        gain = self.gain**u
        offset = self.offset * rng.normal(size=channels)
        angle = self.rotation * rng.uniform(-1.0, 1.0)
        return DriftSpec(gain, offset, float(angle), self.noise, seed)


@dataclass(frozen=True)
class SynthConfig:
    sampling_rate: float = 25.0
    channels: int = N_CHANNELS
    gesture_s: float = 4.0
    rest_s: float = 4.0
    ramp_s: float = 0.5
    baseline: float = 0.3
    template_scale: float = 1.0
    amplitude_jitter: float = 0.2
    noise_std: float = 0.25
    ar: tuple[float, float] = (1.2, -0.5)
    channel_corr: float = 0.5
    template_density: float = 0.6


def _core(seed: int, classes: int, cfg: SynthConfig):
    rng = np.random.default_rng([seed, 0xC0DE])
    raw = np.abs(rng.normal(size=(classes, cfg.channels)))
    raw *= rng.random(size=raw.shape) < cfg.template_density
    raw += 0.05
    templates = cfg.template_scale * raw / np.linalg.norm(raw, axis=1, keepdims=True) * np.sqrt(cfg.channels) / 2
    baseline = cfg.baseline * (0.5 + rng.random(cfg.channels))
    ring = np.arange(cfg.channels)
    dist = np.minimum(np.abs(ring[:, None] - ring[None, :]), cfg.channels - np.abs(ring[:, None] - ring[None, :]))
    cov = cfg.channel_corr**dist
    chol = np.linalg.cholesky(cov + 1e-9 * np.eye(cfg.channels))
    return templates, baseline, chol


def _profile(n_on: int, n_off: int, ramp: int) -> np.ndarray:
    p = np.zeros(n_on + n_off)
    p[:n_on] = 1.0
    if ramp > 1:
        k = np.hanning(2 * ramp + 1)
        k /= k.sum()
        padded = np.concatenate([np.zeros(ramp), p, np.zeros(ramp)])
        p = np.convolve(padded, k, mode="same")[ramp:-ramp]
    return p


def synth_sessions(
    n_sessions: int = 10,
    classes: int = 7,
    reps: int = 6,
    drift: DriftFamily | Sequence[DriftSpec] | None = None,
    seed: int = 0,
    config: SynthConfig | None = None,
) -> list[SessionDataset]:
    """Generate drifted sessions sharing one class-conditional generative core.

    Every gesture class has a fixed channel-envelope template.  A bout is a
    smoothed on/off profile scaling that template (gesture), followed by rest;
    AR(2) noise with ring-correlated channels is added throughout.  Bouts
    appear in a random order, ``reps`` per class.
    """
    if n_sessions < 2:
        raise DataError("need at least two sessions")
    if not 1 <= classes <= N_CLASSES - 1:
        raise DataError(f"classes must be in 1..{N_CLASSES - 1}")
    cfg = config or SynthConfig()
    drift = DriftFamily() if drift is None else drift
    if not isinstance(drift, DriftFamily) and len(drift) != n_sessions:
        raise DataError(f"expected {n_sessions} drift specs, got {len(drift)}")
    templates, baseline, chol = _core(seed, classes, cfg)
    fs = cfg.sampling_rate
    n_on = int(round(cfg.gesture_s * fs))
    n_off = int(round(cfg.rest_s * fs))
    ramp = int(round(cfg.ramp_s * fs))
    profile = _profile(n_on, n_off, ramp)
    a1, a2 = cfg.ar
    gain = np.sqrt((1 + a2) * ((1 - a2) ** 2 - a1**2) / (1 - a2))

    sessions = []
    for s in range(n_sessions):
        rng = np.random.default_rng([seed, s])
        order = rng.permutation(np.repeat(np.arange(1, classes + 1), reps))
        n_total = order.size * (n_on + n_off) + n_off
        env = np.zeros((cfg.channels, n_total))
        labels = np.zeros(n_total, dtype=np.int64)
        rep_ids = np.zeros(n_total, dtype=np.int64)
        t0 = n_off
        for b, cls in enumerate(order):
            amp = 1.0 + cfg.amplitude_jitter * rng.uniform(-1.0, 1.0)
            seg = slice(t0, t0 + n_on + n_off)
            env[:, seg] += amp * templates[cls - 1][:, None] * profile[None, :]
            labels[t0 : t0 + n_on] = cls
            rep_ids[seg] = b + 1
            t0 += n_on + n_off
        white = chol @ rng.normal(size=(cfg.channels, n_total))
        noise = lfilter([gain], [1.0, -a1, -a2], white, axis=1)
        signal = baseline[:, None] + env + cfg.noise_std * noise
        if isinstance(drift, DriftFamily):
            spec = drift.sample(rng, cfg.channels, seed=int(rng.integers(2**31)))
        else:
            spec = drift[s]
        signal = spec.apply(signal)
        sessions.append(SessionDataset(s + 1, signal, labels, rep_ids, fs))
    return sessions


# ---------------------------------------------------------------- protocol


@dataclass(frozen=True)
class ProtocolSplit:
    source_train: list[SessionDataset]
    source_val: list[SessionDataset]
    target: list[SessionDataset]

    def __post_init__(self):
        source_ids = set().union(*(s.origin for s in self.source_train + self.source_val))
        target_ids = set().union(*(s.origin for s in self.target))
        if source_ids & target_ids:
            raise DataError(f"target sessions {sorted(source_ids & target_ids)} leaked into source data")


def split_protocol(
    sessions: Sequence[SessionDataset],
    n_source: int | None = None,
    train_fraction: float = 0.7,
    gap: int = 0,
) -> ProtocolSplit:
    """First sessions are source (split by time into train/val), the rest target.

    ``gap`` samples are dropped between train and validation so that no
    validation window's receptive field reaches back into training data.
    """
    sessions = list(sessions)
    if len(sessions) < 2:
        raise DataError(f"need at least 2 sessions for a source/target split, got {len(sessions)}")
    n_source = len(sessions) // 2 if n_source is None else n_source
    if not 1 <= n_source < len(sessions):
        raise DataError(f"n_source must be in 1..{len(sessions) - 1}")
    train, val = [], []
    for s in sessions[:n_source]:
        cut = int(round(train_fraction * s.n_samples))
        train.append(s.segment(0, cut))
        val.append(s.segment(min(cut + gap, s.n_samples), s.n_samples))
    return ProtocolSplit(train, val, sessions[n_source:])


def make_buffer(
    session: SessionDataset,
    mode: str,
    repetitions: int,
    seed: int = 0,
) -> tuple[SessionDataset, SessionDataset]:
    """Split a session into an adaptation buffer and the held-out remainder.

    ``balanced`` takes ``repetitions`` bouts of every gesture class;
    ``unbalanced`` takes ``repetitions`` bouts regardless of class.  Selected
    bouts are streamed in random order; the remainder keeps session order.
    """
    if mode not in ("balanced", "unbalanced"):
        raise DataError(f"unknown buffer mode {mode!r}")
    bouts = session.bouts()
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[int]] = {}
    for rep, (cls, _) in bouts.items():
        by_class.setdefault(cls, []).append(rep)
    if mode == "balanced":
        short = {c: len(r) for c, r in sorted(by_class.items()) if len(r) < repetitions}
        if short:
            raise DataError(
                f"balanced buffer needs {repetitions} repetitions per class; available: "
                + ", ".join(f"class {c}: {len(r)}" for c, r in sorted(by_class.items()))
            )
        chosen = [r for c in sorted(by_class) for r in rng.choice(by_class[c], repetitions, replace=False)]
    else:
        if repetitions > len(bouts):
            raise DataError(f"unbalanced buffer needs {repetitions} repetitions; session has {len(bouts)}")
        chosen = list(rng.choice(sorted(bouts), repetitions, replace=False))
    chosen = [int(r) for r in rng.permutation(chosen)]
    in_buffer = np.concatenate([bouts[r][1] for r in chosen]) if chosen else np.array([], dtype=np.int64)
    mask = np.ones(session.n_samples, dtype=bool)
    mask[in_buffer] = False
    rest_idx = np.flatnonzero(mask)

    def take(idx):
        return SessionDataset(
            session.session_id,
            session.signal[:, idx],
            session.labels[idx],
            session.reps[idx],
            session.sampling_rate,
            session.origin,
        )

    return take(in_buffer), take(rest_idx)
