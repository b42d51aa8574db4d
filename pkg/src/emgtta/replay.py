"""Exemplar memory of source windows with the source model's logits."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import SessionDataset
from .tcn import TcnModel, forward


def capacity_windows(seconds: float, sampling_rate: float, window: int) -> int:
    """Number of ``window``-sample exemplars that hold ``seconds`` of signal."""
    if seconds < 0:
        raise ValueError("buffer capacity must be non-negative")
    return int(round(seconds * sampling_rate / window))


@dataclass
class ExemplarBuffer:
    """Reservoir of (window [channels, length], label, logits [classes]) entries."""

    capacity: int
    windows: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    logits: list = field(default_factory=list)
    seen: int = 0

    def __len__(self) -> int:
        return len(self.windows)

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if not self.windows:
            raise ValueError("exemplar buffer is empty")
        return np.stack(self.windows), np.asarray(self.labels, dtype=np.int64), np.stack(self.logits)

    def digest(self) -> str:
        h = hashlib.sha256()
        for w, y, z in zip(self.windows, self.labels, self.logits):
            h.update(np.ascontiguousarray(w).tobytes())
            h.update(int(y).to_bytes(8, "little", signed=True))
            h.update(np.ascontiguousarray(z).tobytes())
        return h.hexdigest()


def reservoir_insert(buffer: ExemplarBuffer, window, label: int, logits, rng: np.random.Generator) -> ExemplarBuffer:
    """Classic reservoir step; every item seen so far is kept with equal probability."""
    buffer.seen += 1
    if buffer.capacity <= 0:
        return buffer
    entry = (np.array(window, dtype=np.float64), int(label), np.array(logits, dtype=np.float64))
    if len(buffer) < buffer.capacity:
        buffer.windows.append(entry[0])
        buffer.labels.append(entry[1])
        buffer.logits.append(entry[2])
        return buffer
    j = int(rng.integers(0, buffer.seen))
    if j < buffer.capacity:
        buffer.windows[j], buffer.labels[j], buffer.logits[j] = entry
    return buffer


def snapshot_logits(model: TcnModel, windows) -> np.ndarray:
    """Last-timestep logits [n, classes] of ``model`` with running BN statistics."""
    windows = np.asarray(windows, dtype=np.float64)
    return forward(model, windows, bn="eval").data[:, :, -1].copy()


def window_label(labels: np.ndarray) -> int:
    """Majority label; ties go to the smaller class id."""
    return int(np.bincount(labels).argmax())


def fill_buffer(
    model: TcnModel,
    sessions: Sequence[SessionDataset],
    capacity: int,
    seed: int = 0,
    stride: int | None = None,
) -> ExemplarBuffer:
    """Stream receptive-field windows from ``sessions`` through a reservoir.

    Windows start every ``stride`` samples (default: half a window).  Logits
    are taken from ``model`` in one batch after sampling.
    """
    length = model.config.receptive_field
    stride = stride or max(1, length // 2)
    rng = np.random.default_rng([seed, 0xDE5])
    buf = ExemplarBuffer(capacity)
    placeholder = np.zeros(model.config.classes)
    for s in sessions:
        for start in range(0, s.n_samples - length + 1, stride):
            reservoir_insert(
                buf, s.signal[:, start : start + length], window_label(s.labels[start : start + length]), placeholder, rng
            )
    if len(buf):
        logits = snapshot_logits(model, np.stack(buf.windows))
        buf.logits = [row for row in logits]
    return buf
