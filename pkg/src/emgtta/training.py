"""Supervised source training of the TCN backbone."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import SessionDataset
from .tcn import TcnModel, forward, update_running_stats

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 6
    batch_size: int = 16
    window: int = 200
    windows_per_epoch: int = 256
    lr: float = 3e-3
    seed: int = 0


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, g in grads.items():
            m = self.m.get(k, 0.0) * b1 + (1 - b1) * g
            v = self.v.get(k, 0.0) * b2 + (1 - b2) * g * g
            self.m[k], self.v[k] = m, v
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            params[k] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def sample_windows(
    sessions: Sequence[SessionDataset], n: int, length: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """``n`` random crops [n, channels, length] with their labels [n, length]."""
    usable = [s for s in sessions if s.n_samples >= length]
    if not usable:
        raise ValueError(f"no session is at least {length} samples long")
    weights = np.array([s.n_samples - length + 1 for s in usable], dtype=np.float64)
    which = rng.choice(len(usable), size=n, p=weights / weights.sum())
    xs = np.empty((n, usable[0].n_channels, length))
    ys = np.empty((n, length), dtype=np.int64)
    for i, j in enumerate(which):
        s = usable[j]
        start = int(rng.integers(0, s.n_samples - length + 1))
        xs[i] = s.signal[:, start : start + length]
        ys[i] = s.labels[start : start + length]
    return xs, ys


def warmup_mask(batch: int, length: int, skip: int) -> np.ndarray:
    """Loss weights that ignore the first ``skip`` steps (zero-padded context)."""
    w = np.ones((batch, length))
    w[:, : min(skip, length - 1)] = 0.0
    return w


def train_source(
    model: TcnModel,
    sessions: Sequence[SessionDataset],
    config: TrainConfig = TrainConfig(),
    trainable: Sequence[str] | None = None,
) -> tuple[TcnModel, list[float]]:
    """Fit ``model`` (a copy is returned) with Adam on random windows.

    BN runs on batch statistics and its running statistics track them by EMA.
    """
    model = model.copy()
    rng = np.random.default_rng(config.seed)
    names = list(model.params) if trainable is None else list(trainable)
    opt = Adam(config.lr)
    skip = model.config.receptive_field - 1
    steps = max(1, config.windows_per_epoch // config.batch_size)
    history = []
    for epoch in range(config.epochs):
        losses = []
        for _ in range(steps):
            xs, ys = sample_windows(sessions, config.batch_size, config.window, rng)
            tape = ad.Tape()
            variables = {k: tape.variable(model.named_arrays()[k], copy=False) for k in names}
            capture: dict = {}
            logits = forward(model, xs, bn="train", params=variables, capture=capture)
            loss = ad.cross_entropy(logits, ys, axis=1, weights=warmup_mask(*ys.shape, skip))
            gm = ad.backward(tape, loss, list(variables.values()))
            grads = {k: gm[v].data for k, v in variables.items()}
            opt.step(model.named_arrays(), grads)
            update_running_stats(model, capture["batch_stats"])
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
        log.debug("epoch %d loss %.4f", epoch, history[-1])
    return model, history
