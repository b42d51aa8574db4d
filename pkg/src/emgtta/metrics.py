"""Per-timestep accuracy metrics and causal majority-vote smoothing."""

from __future__ import annotations

import numpy as np

from .data import REST


def active_accuracy(predictions, labels, rest: int = REST) -> float:
    """Accuracy over timesteps whose true label is a gesture.

    Returns ``nan`` when there is no active timestep (undefined metric).
    """
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"predictions {predictions.shape} and labels {labels.shape} differ in shape")
    active = labels != rest
    if not active.any():
        return float("nan")
    return float(np.mean(predictions[active] == labels[active]))


def raw_accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"predictions {predictions.shape} and labels {labels.shape} differ in shape")
    return float(np.mean(predictions == labels)) if labels.size else float("nan")


def vote_window(sampling_rate: float, seconds: float = 0.401) -> int:
    """Odd window length (samples) covering about ``seconds``."""
    w = max(1, int(round(seconds * sampling_rate)))
    return w if w % 2 else w + 1


def majority_vote(predictions, window: int, n_classes: int | None = None) -> np.ndarray:
    """Causal sliding mode over the last ``window`` predictions.

    Ties go to whichever tied class occurred most recently.  The first
    ``window - 1`` outputs use the available prefix.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError(f"vote window must be odd and >= 1, got {window}")
    pred = np.asarray(predictions, dtype=np.int64)
    if window == 1 or pred.size == 0:
        return pred.copy()
    n_classes = int(pred.max()) + 1 if n_classes is None else max(n_classes, int(pred.max()) + 1)
    t = np.arange(pred.size)
    onehot = np.zeros((pred.size + 1, n_classes), dtype=np.int64)
    onehot[t + 1, pred] = 1
    csum = np.cumsum(onehot, axis=0)
    counts = csum[1:] - csum[np.maximum(t + 1 - window, 0)]
    seen = np.where(onehot[1:] == 1, t[:, None], -1)
    last_seen = np.maximum.accumulate(seen, axis=0)
    # count dominates; among equal counts the most recent class wins
    score = counts * (pred.size + 1) + last_seen
    return np.argmax(score, axis=1)
