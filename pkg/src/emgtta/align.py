"""Test-time alignment of latent features to cached source statistics.

Only the low-rank adapter parameters are optimized.  Features are the output
of the adapter-carrying block, sampled every quarter receptive field.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import REST, SessionDataset
from .gmm import GmmModel, fit_gmm, sample_gmm
from .replay import ExemplarBuffer
from .store import read_npz, write_npz
from .tcn import TcnModel, forward

REST_GROUP, GESTURE_GROUP = 0, 1
GROUP_NAMES = {REST_GROUP: "R", GESTURE_GROUP: "G"}
STATS_VERSION = 1


class ContractError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


# ---------------------------------------------------------------- containers


@dataclass
class SourceStats:
    layer: int
    mean: np.ndarray
    cov: np.ndarray
    class_moments: dict[int, tuple[np.ndarray, np.ndarray]] | None = None
    gmm: GmmModel | None = None
    exemplars: ExemplarBuffer | None = None

    def save(self, path):
        header = {"format": "emgtta-source-stats", "version": STATS_VERSION, "layer": self.layer}
        arrays = {"mean": self.mean, "cov": self.cov}
        if self.class_moments is not None:
            for k, (m, c) in self.class_moments.items():
                arrays[f"class/{GROUP_NAMES[k]}/mean"] = m
                arrays[f"class/{GROUP_NAMES[k]}/cov"] = c
        if self.gmm is not None:
            arrays["gmm/weights"] = self.gmm.weights
            arrays["gmm/means"] = self.gmm.means
            arrays["gmm/variances"] = self.gmm.variances
            header["gmm_var_floor"] = self.gmm.var_floor
        if self.exemplars is not None:
            header["exemplar_capacity"] = self.exemplars.capacity
            header["exemplar_seen"] = self.exemplars.seen
            if len(self.exemplars):
                w, y, z = self.exemplars.arrays()
                arrays["exemplars/windows"], arrays["exemplars/labels"], arrays["exemplars/logits"] = w, y, z
        return write_npz(path, arrays, header)

    @classmethod
    def load(cls, path) -> "SourceStats":
        header, a = read_npz(path)
        if header.get("format") != "emgtta-source-stats":
            raise ConfigurationError(f"{path} is not a source statistics cache")
        if header["version"] > STATS_VERSION:
            raise ConfigurationError(f"statistics cache version {header['version']} is newer than supported")
        classes = None
        if "class/R/mean" in a or "class/G/mean" in a:
            classes = {
                k: (a[f"class/{n}/mean"], a[f"class/{n}/cov"])
                for k, n in GROUP_NAMES.items()
                if f"class/{n}/mean" in a
            }
        gmm = None
        if "gmm/weights" in a:
            gmm = GmmModel(a["gmm/weights"], a["gmm/means"], a["gmm/variances"], header["gmm_var_floor"])
        ex = None
        if "exemplar_capacity" in header:
            ex = ExemplarBuffer(header["exemplar_capacity"], seen=header["exemplar_seen"])
            if "exemplars/windows" in a:
                ex.windows = list(a["exemplars/windows"])
                ex.labels = [int(v) for v in a["exemplars/labels"]]
                ex.logits = list(a["exemplars/logits"])
        return cls(header["layer"], a["mean"], a["cov"], classes, gmm, ex)


class TargetBuffer:
    """Ring buffer of the most recent ``capacity`` feature vectors."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ContractError("buffer capacity must be >= 1")
        self.capacity, self.dim = capacity, dim
        self._z = np.zeros((capacity, dim))
        self._k = np.zeros(capacity, dtype=np.int64)
        self._n = 0

    def __len__(self) -> int:
        return min(self._n, self.capacity)

    def push(self, z, group: int | None = None) -> None:
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (self.dim,):
            raise ContractError(f"feature must have dimension {self.dim}, got shape {z.shape}")
        i = self._n % self.capacity
        self._z[i] = z
        self._k[i] = -1 if group is None else group
        self._n += 1

    def features(self) -> np.ndarray:
        """Stored vectors, oldest first."""
        if self._n <= self.capacity:
            return self._z[: self._n].copy()
        i = self._n % self.capacity
        return np.concatenate([self._z[i:], self._z[:i]])

    def groups(self) -> np.ndarray:
        if self._n <= self.capacity:
            return self._k[: self._n].copy()
        i = self._n % self.capacity
        return np.concatenate([self._k[i:], self._k[:i]])


# ---------------------------------------------------------------- statistics and losses


def fit_source_stats(features) -> tuple[np.ndarray, np.ndarray]:
    """Mean and population covariance of feature rows [n, d]."""
    z = np.asarray(features, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ContractError(f"need at least 2 feature vectors [n, d], got shape {z.shape}")
    mu = z.mean(axis=0)
    c = z - mu
    cov = c.T @ c / z.shape[0]
    return mu, 0.5 * (cov + cov.T)


def _moments(z: Tensor) -> tuple[Tensor, Tensor]:
    n = z.shape[0]
    mu = ad.mean(z, axis=0)
    c = ad.sub(z, mu)
    return mu, ad.scalar_mul(ad.matmul(ad.transpose(c, (1, 0)), c), 1.0 / n)


def moment_loss(features, mean, cov, lam_mean: float = 1.0, lam_cov: float = 1.0) -> Tensor:
    """lam_mean * |mean(Z) - mean|^2 + lam_cov * |cov(Z) - cov|_F^2."""
    z = ad.as_tensor(features)
    if z.ndim != 2 or z.shape[0] == 0:
        raise ContractError(f"moment loss needs a non-empty [n, d] buffer, got shape {z.shape}")
    mu, sigma = _moments(z)
    loss = ad.scalar_mul(ad.squared_error(mu, np.asarray(mean)), lam_mean)
    return ad.add(loss, ad.scalar_mul(ad.frobenius_sq(ad.sub(sigma, np.asarray(cov))), lam_cov))


def pseudo_label(logits, rest: int = REST) -> np.ndarray | int:
    """Rest group if the rest logit is strictly the largest, else gesture group.

    ``logits`` is [C] or [n, C].
    """
    z = np.asarray(logits, dtype=np.float64)
    others = np.delete(z, rest, axis=-1).max(axis=-1)
    out = np.where(z[..., rest] > others, REST_GROUP, GESTURE_GROUP)
    return int(out) if out.ndim == 0 else out


def class_conditional_loss(
    features, groups, class_moments, lam_mean: float = 1.0, lam_cov: float = 1.0
) -> tuple[Tensor, bool]:
    """Sum of per-group moment losses over the groups present in ``groups``.

    Returns ``(loss, partial)`` where ``partial`` flags that a group is absent.
    """
    z = ad.as_tensor(features)
    groups = np.asarray(groups)
    if z.shape[0] == 0:
        raise ContractError("class-conditional loss needs a non-empty buffer")
    total = None
    present = 0
    for k in (REST_GROUP, GESTURE_GROUP):
        idx = np.flatnonzero(groups == k)
        if idx.size == 0:
            continue
        present += 1
        m, c = class_moments[k]
        term = moment_loss(ad.slice_(z, idx), m, c, lam_mean, lam_cov)
        total = term if total is None else ad.add(total, term)
    return total, present < 2


def swd(a, b, n_projections: int = 64, seed: int = 0) -> Tensor:
    """Sliced 2-Wasserstein distance between two point sets [n, d] and [m, d].

    The larger set is subsampled (seeded) to the size of the smaller.  The
    result is the mean over random unit directions of the RMS difference of
    the sorted projections.
    """
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ContractError(f"swd needs [n, d] sets of equal dimension, got {a.shape} and {b.shape}")
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ContractError("swd needs non-empty sets")
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(a.shape[1], n_projections))
    dirs /= np.linalg.norm(dirs, axis=0, keepdims=True)
    n = min(a.shape[0], b.shape[0])
    if a.shape[0] > n:
        a = ad.slice_(a, np.sort(rng.choice(a.shape[0], n, replace=False)))
    if b.shape[0] > n:
        b = ad.slice_(b, np.sort(rng.choice(b.shape[0], n, replace=False)))
    pa = ad.sort(ad.matmul(a, dirs), axis=0)
    pb = ad.sort(ad.matmul(b, dirs), axis=0)
    d = ad.sub(pa, pb)
    w2 = ad.sqrt(ad.mean(ad.mul(d, d), axis=0))
    return ad.mean(w2)


def der_loss(
    model: TcnModel,
    windows,
    labels,
    stored_logits,
    params=None,
    start_block: int = 0,
) -> Tensor:
    """Replay loss on exemplars: squared logit drift plus cross-entropy.

    Both terms use the last timestep of each window and are averaged over the
    buffer.  ``windows`` may be inputs of ``start_block`` (cached activations).
    """
    windows = np.asarray(windows) if not isinstance(windows, Tensor) else windows
    if windows.shape[0] == 0:
        raise ContractError("replay loss needs a non-empty exemplar buffer")
    logits = forward(model, windows, bn="eval", params=params, start_block=start_block)
    last = ad.slice_(logits, (slice(None), slice(None), -1))
    n = last.shape[0]
    drift = ad.scalar_mul(ad.squared_error(last, np.asarray(stored_logits)), 1.0 / n)
    return ad.add(drift, ad.cross_entropy(last, labels, axis=1))


# ---------------------------------------------------------------- feature extraction


def feature_stride(model: TcnModel) -> int:
    return max(1, model.config.receptive_field // 4)


def block_input(model: TcnModel, signal, bn="eval") -> np.ndarray:
    """Activations entering the adapter block (frozen part of the network)."""
    m = model.config.lora_block
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if m == 0:
        return x
    return forward(model, x, bn=bn, stop_block=m - 1).data


def sample_positions(n_samples: int, model: TcnModel) -> np.ndarray:
    rf = model.config.receptive_field
    return np.arange(min(rf - 1, max(n_samples - 1, 0)), n_samples, feature_stride(model))


def _rows(z: Tensor, positions) -> Tensor:
    # [1, d, T] -> [n, d]; index in two steps to keep numpy's axis order
    return ad.transpose(ad.slice_(ad.slice_(z, 0), (slice(None), positions)), (1, 0))


def latent_features(model: TcnModel, signal, params=None, bn="eval", positions=None) -> Tensor:
    """Adapter-block output at ``positions`` as rows [n, d] (differentiable in params)."""
    m = model.config.lora_block
    x = block_input(model, signal, bn)
    z = forward(model, x, bn=bn, params=params, start_block=m, stop_block=m)
    pos = sample_positions(z.shape[2], model) if positions is None else positions
    return _rows(z, pos)


def collect_source_stats(
    model: TcnModel,
    sessions: Sequence[SessionDataset],
    n_components: int = 8,
    seed: int = 0,
    class_conditional: bool = True,
    exemplars: ExemplarBuffer | None = None,
) -> SourceStats:
    """Feature summaries of the source model on source sessions."""
    feats, groups = [], []
    for s in sessions:
        pos = sample_positions(s.n_samples, model)
        feats.append(latent_features(model, s.signal, positions=pos).data)
        groups.append(np.where(s.labels[pos] == REST, REST_GROUP, GESTURE_GROUP))
    z = np.concatenate(feats)
    k = np.concatenate(groups)
    mu, cov = fit_source_stats(z)
    classes = None
    if class_conditional:
        classes = {g: fit_source_stats(z[k == g]) for g in (REST_GROUP, GESTURE_GROUP) if (k == g).sum() >= 2}
    gmm = fit_gmm(z, n_components, seed) if n_components > 0 else None
    return SourceStats(model.config.lora_block, mu, cov, classes, gmm, exemplars)


# ---------------------------------------------------------------- adaptation


@dataclass(frozen=True)
class AlignConfig:
    mode: str = "gmm"
    align_weight: float = 1.0
    der_weight: float = 1.0
    steps: int = 30
    lr: float = 0.05
    lam_mean: float = 1.0
    lam_cov: float = 1.0
    projections: int = 64
    seed: int = 0
    clip: float | None = 1.0


@dataclass
class AlignResult:
    model: TcnModel
    losses: list[float] = field(default_factory=list)
    partial: bool = False


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float | None) -> dict[str, np.ndarray]:
    """Rescale ``grads`` jointly so their global norm is at most ``max_norm``."""
    if max_norm is None:
        return grads
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if norm <= max_norm:
        return grads
    return {k: g * (max_norm / norm) for k, g in grads.items()}


def adapt_align(model: TcnModel, prefix: SessionDataset, stats: SourceStats, config: AlignConfig) -> AlignResult:
    """Plain gradient descent on the adapters minimizing the alignment objective.

    ``align_weight * L_align(mode) + der_weight * L_replay``; the backbone and
    BN statistics are never written.
    """
    if not model.has_adapters:
        raise ConfigurationError("alignment requires injected adapters")
    if config.mode not in ("mom", "cc", "gmm"):
        raise ConfigurationError(f"unknown alignment mode {config.mode!r}")
    if stats.layer != model.config.lora_block:
        raise ConfigurationError(f"statistics were cached at block {stats.layer}, adapters sit at {model.config.lora_block}")
    if config.mode == "cc" and not stats.class_moments:
        raise ConfigurationError("mode 'cc' needs class-conditional source moments")
    if config.mode == "gmm" and stats.gmm is None:
        raise ConfigurationError("mode 'gmm' needs a fitted source GMM")
    use_der = config.der_weight > 0
    if use_der and (stats.exemplars is None or len(stats.exemplars) == 0):
        raise ConfigurationError("a positive replay weight needs a non-empty exemplar buffer")

    out = model.copy()
    result = AlignResult(out)
    if config.align_weight == 0 and not use_der:
        return result

    m = model.config.lora_block
    x_in = block_input(model, prefix.signal)
    pos = sample_positions(x_in.shape[2], model)
    groups = None
    if config.mode == "cc":
        logits = forward(model, x_in, start_block=m).data[0]
        groups = pseudo_label(logits[:, pos].T)
    if use_der:
        ex_w, ex_y, ex_z = stats.exemplars.arrays()
        ex_in = block_input(model, ex_w)
    for step in range(config.steps):
        tape = ad.Tape()
        phi = {k: tape.variable(v) for k, v in out.adapters.items()}
        loss = None
        if config.align_weight != 0:
            z = forward(out, x_in, params=phi, start_block=m, stop_block=m)
            feats = _rows(z, pos)
            if config.mode == "mom":
                la = moment_loss(feats, stats.mean, stats.cov, config.lam_mean, config.lam_cov)
            elif config.mode == "cc":
                la, result.partial = class_conditional_loss(
                    feats, groups, stats.class_moments, config.lam_mean, config.lam_cov
                )
            else:
                step_seed = [config.seed, step]
                ref = sample_gmm(stats.gmm, feats.shape[0], seed=np.random.SeedSequence(step_seed).generate_state(1)[0])
                la = swd(ref, feats, config.projections, seed=int(np.random.SeedSequence(step_seed + [1]).generate_state(1)[0]))
            loss = ad.scalar_mul(la, config.align_weight)
        if use_der:
            ld = ad.scalar_mul(der_loss(out, ex_in, ex_y, ex_z, params=phi, start_block=m), config.der_weight)
            loss = ld if loss is None else ad.add(loss, ld)
        gm = ad.backward(tape, loss, list(phi.values()))
        grads = clip_gradients({k: gm[v].data for k, v in phi.items()}, config.clip)
        for k, g in grads.items():
            out.adapters[k] = out.adapters[k] - config.lr * g
        result.losses.append(loss.item())
    return result
