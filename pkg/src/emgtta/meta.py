"""Gradient-based meta-learning over session tasks with adapter-only inner loops.

The algorithms are written against a small learner interface: ``slow`` and
``fast`` parameter dicts (numpy arrays) plus ``loss(params, data)`` returning
a scalar Tensor.  The inner loop only moves ``fast``; the outer update moves
both.  :class:`TcnLearner` binds this to the TCN (backbone = slow, adapters =
fast); tests use small analytic learners.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import SecondOrderUnavailable, Tensor
from .align import clip_gradients, der_loss
from .data import SessionDataset, make_buffer
from .metrics import active_accuracy
from .replay import ExemplarBuffer
from .tcn import TcnModel, forward
from .training import warmup_mask

log = logging.getLogger(__name__)


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class MetaConfig:
    inner_steps: int = 4
    inner_lr: float = 0.05
    outer_lr: float = 0.01
    order: str = "first"
    shots: int = 1
    query_bouts: int = 14
    der_weight: float = 0.0
    clip: float | None = None

    def __post_init__(self):
        if self.inner_steps < 0:
            raise ContractError("inner_steps must be >= 0")
        if self.inner_lr < 0 or self.outer_lr <= 0:
            raise ContractError("learning rates must be positive")
        if self.order not in ("first", "second"):
            raise ContractError(f"order must be 'first' or 'second', got {self.order!r}")
        if self.shots < 1:
            raise ContractError("shots must be >= 1")


@dataclass
class TaskSplit:
    session_id: int
    support: object
    query: object

    def __post_init__(self):
        sup, qry = self.support, self.query
        if isinstance(sup, SessionDataset) and isinstance(qry, SessionDataset):
            overlap = set(np.unique(sup.reps)) & set(np.unique(qry.reps)) - {0}
            if overlap:
                raise ContractError(f"support and query share repetitions {sorted(overlap)}")


class Learner(Protocol):
    slow: dict[str, np.ndarray]
    fast: dict[str, np.ndarray]

    def loss(self, params: dict[str, Tensor], data) -> Tensor: ...


# ---------------------------------------------------------------- TCN binding


def sequence_loss(model: TcnModel, data: SessionDataset, params=None) -> Tensor:
    """Per-timestep cross-entropy over a whole sequence, skipping the warm-up."""
    logits = forward(model, data.signal, bn="eval", params=params)
    labels = data.labels[None]
    w = warmup_mask(1, data.n_samples, model.config.receptive_field - 1)
    return ad.cross_entropy(logits, labels, axis=1, weights=w)


class TcnLearner:
    """Backbone parameters are slow, adapters fast; BN uses running statistics."""

    def __init__(self, model: TcnModel, replay: ExemplarBuffer | None = None, der_weight: float = 0.0):
        if not model.has_adapters:
            raise ContractError("meta-learning needs injected adapters")
        self.model = model
        self.slow = model.params
        self.fast = model.adapters
        self.der_weight = der_weight
        self._replay = replay.arrays() if der_weight > 0 and replay is not None and len(replay) else None
        if der_weight > 0 and self._replay is None:
            raise ContractError("a positive replay weight needs a non-empty exemplar buffer")

    def loss(self, params, data) -> Tensor:
        loss = sequence_loss(self.model, data, params)
        if self._replay is not None:
            w, y, z = self._replay
            loss = ad.add(loss, ad.scalar_mul(der_loss(self.model, w, y, z, params=params), self.der_weight))
        return loss

    def accuracy(self, fast: dict[str, np.ndarray], data: SessionDataset) -> float:
        p = {k: Tensor(v) for k, v in fast.items()}
        pred = forward(self.model, data.signal, bn="eval", params=p).data[0].argmax(axis=0)
        return active_accuracy(pred, data.labels)

    def to_model(self, slow=None, fast=None) -> TcnModel:
        out = self.model.copy()
        if slow is not None:
            out.params = {k: np.array(v) for k, v in slow.items()}
        if fast is not None:
            out.adapters = {k: np.array(v) for k, v in fast.items()}
        return out


# ---------------------------------------------------------------- inner loop


@dataclass
class InnerResult:
    fast: dict  # numpy arrays (first order) or Tensors on the tape (second order)
    grads: list = field(default_factory=list)
    losses: list[float] = field(default_factory=list)


def inner_adapt(
    learner: Learner,
    support,
    steps: int,
    lr: float,
    slow: dict | None = None,
    fast: dict | None = None,
    tape: ad.Tape | None = None,
    clip: float | None = None,
) -> InnerResult:
    """``steps`` plain gradient steps on the fast parameters.

    Without ``tape`` the steps run on numpy copies and the result is a plain
    dict of arrays.  With ``tape`` (and ``slow``/``fast`` Tensors recorded on
    it) the unroll, including every gradient, is recorded so it can be
    differentiated again.  ``clip`` bounds the global gradient norm of each
    step and is only available without a tape.
    """
    if clip is not None and tape is not None:
        raise ContractError("gradient clipping is not supported for recorded unrolls")
    if support is None or (isinstance(support, SessionDataset) and support.n_samples == 0):
        raise ContractError("inner adaptation needs a non-empty support set")
    slow = learner.slow if slow is None else slow
    fast = learner.fast if fast is None else fast
    res = InnerResult({})
    if tape is None:
        cur = {k: np.array(v, dtype=np.float64) for k, v in fast.items()}
        for _ in range(steps):
            t = ad.Tape()
            fv = {k: t.variable(v) for k, v in cur.items()}
            loss = learner.loss({**slow, **fv}, support)
            gm = ad.backward(t, loss, list(fv.values()))
            g = clip_gradients({k: gm[v].data for k, v in fv.items()}, clip)
            cur = {k: cur[k] - lr * g[k] for k in cur}
            res.losses.append(loss.item())
        res.fast = cur
        return res
    cur = dict(fast)
    for _ in range(steps):
        loss = learner.loss({**slow, **cur}, support)
        gs = ad.grad(loss, list(cur.values()), create_graph=True)
        g = dict(zip(cur, gs))
        res.grads.append(g)
        cur = {k: ad.sub(v, ad.scalar_mul(g[k], lr)) for k, v in cur.items()}
        res.losses.append(loss.item())
    res.fast = cur
    return res


# ---------------------------------------------------------------- outer loop


def meta_gradient(learner: Learner, task: TaskSplit, config: MetaConfig) -> tuple[dict, float, dict]:
    """(gradient w.r.t. slow+fast, query loss, adapted fast) for one task."""
    tape = ad.Tape()
    slow_v = {k: tape.variable(v) for k, v in learner.slow.items()}
    if config.order == "second":
        fast_v = {k: tape.variable(v) for k, v in learner.fast.items()}
        inner = inner_adapt(learner, task.support, config.inner_steps, config.inner_lr, slow_v, fast_v, tape)
        q = learner.loss({**slow_v, **inner.fast}, task.query)
        inner_grads = [g for step in inner.grads for g in step.values()]
        try:
            gm = ad.grad_of_grad(tape, q, inner_grads, list(slow_v.values()) + list(fast_v.values()))
        except SecondOrderUnavailable as e:
            raise ContractError(f"second-order meta-gradient unavailable: {e}") from e
        grads = {k: gm[v].data for k, v in {**slow_v, **fast_v}.items()}
        adapted = {k: v.data for k, v in inner.fast.items()}
    else:
        inner = inner_adapt(learner, task.support, config.inner_steps, config.inner_lr)
        fast_v = {k: tape.variable(v) for k, v in inner.fast.items()}
        q = learner.loss({**slow_v, **fast_v}, task.query)
        gm = ad.backward(tape, q, list(slow_v.values()) + list(fast_v.values()))
        grads = {k: gm[v].data for k, v in {**slow_v, **fast_v}.items()}
        adapted = inner.fast
    return grads, q.item(), adapted


@dataclass
class StepInfo:
    query_losses: list[float]
    adapted: list[dict]


def meta_step(learner: Learner, tasks: Sequence[TaskSplit], config: MetaConfig) -> StepInfo:
    """One outer update of slow and fast parameters (in place) by the summed
    post-adaptation query-loss gradient."""
    if not tasks:
        raise ContractError("meta_step needs at least one task")
    total: dict[str, np.ndarray] = {}
    info = StepInfo([], [])
    for task in tasks:
        grads, q, adapted = meta_gradient(learner, task, config)
        for k, g in grads.items():
            total[k] = total[k] + g if k in total else g
        info.query_losses.append(q)
        info.adapted.append(adapted)
    total = clip_gradients(total, config.clip)
    for k, g in total.items():
        target = learner.slow if k in learner.slow else learner.fast
        target[k] = target[k] - config.outer_lr * g
    return info


def session_task(session: SessionDataset, shots: int, query_bouts: int, rng: np.random.Generator) -> TaskSplit:
    """Support = ``shots`` repetitions per class; query = other repetitions."""
    seed = int(rng.integers(2**31))
    support, rest = make_buffer(session, "balanced", shots, seed)
    n_left = len(rest.bouts())
    query, _ = make_buffer(rest, "unbalanced", min(query_bouts, n_left), seed + 1)
    return TaskSplit(session.session_id, support, query)


def meta_train(
    model: TcnModel,
    sessions: Sequence[SessionDataset],
    config: MetaConfig,
    epochs: int = 10,
    seed: int = 0,
    replay: ExemplarBuffer | None = None,
    curve_path=None,
) -> tuple[TcnModel, list[dict]]:
    """Meta-train a copy of ``model``; each epoch is one outer step over all sessions."""
    if len(sessions) < 2:
        warnings.warn("meta-training on a single session degenerates to joint training", stacklevel=2)
    learner = TcnLearner(model.copy(), replay, config.der_weight)
    rng = np.random.default_rng([seed, 0x3E7A])
    curve = []
    for epoch in range(epochs):
        tasks = [session_task(s, config.shots, config.query_bouts, rng) for s in sessions]
        info = meta_step(learner, tasks, config)
        accs = [learner.accuracy(a, t.query) for a, t in zip(info.adapted, tasks)]
        curve.append(
            {
                "epoch": epoch,
                "meta_loss": float(np.mean(info.query_losses)),
                "query_accuracy": {str(t.session_id): float(a) for t, a in zip(tasks, accs)},
            }
        )
        log.debug("meta epoch %d loss %.4f", epoch, curve[-1]["meta_loss"])
    if curve_path is not None:
        Path(curve_path).write_text(
            json.dumps({"config": asdict(config), "seed": seed, "curve": curve}, indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
    return learner.to_model(), curve


@dataclass
class CalibrationResult:
    model: TcnModel
    losses: list[float]
    partial: bool = False


def calibrate(
    model: TcnModel,
    shots: SessionDataset,
    steps: int,
    lr: float,
    replay: ExemplarBuffer | None = None,
    der_weight: float = 0.0,
    n_classes: int | None = None,
    clip: float | None = None,
) -> CalibrationResult:
    """Few-shot adaptation of the adapters on labeled target data.

    Adds ``der_weight`` times the replay loss when a buffer is given.  Missing
    gesture classes do not stop calibration but set ``partial``.
    """
    learner = TcnLearner(model, replay if der_weight > 0 else None, der_weight if replay is not None else 0.0)
    inner = inner_adapt(learner, shots, steps, lr, clip=clip)
    n_classes = model.config.classes if n_classes is None else n_classes
    present = set(np.unique(shots.labels).tolist())
    partial = not set(range(1, n_classes)) <= present
    if partial:
        log.info("calibration data lacks classes %s", sorted(set(range(1, n_classes)) - present))
    return CalibrationResult(learner.to_model(fast=inner.fast), inner.losses, partial)
