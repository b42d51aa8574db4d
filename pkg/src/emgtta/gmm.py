"""Diagonal-covariance Gaussian mixtures fitted by EM."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp


class GmmError(ValueError):
    pass


@dataclass
class GmmModel:
    weights: np.ndarray  # [K]
    means: np.ndarray  # [K, d]
    variances: np.ndarray  # [K, d] diagonal entries
    var_floor: float = 1e-6
    log_likelihood: list[float] = field(default_factory=list)
    reseeded: list[int] = field(default_factory=list)
    degenerate: bool = False

    @property
    def n_components(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def covariances(self) -> np.ndarray:
        """Full [K, d, d] covariance matrices (diagonal)."""
        k, d = self.variances.shape
        out = np.zeros((k, d, d))
        idx = np.arange(d)
        out[:, idx, idx] = self.variances
        return out

    def log_prob(self, x: np.ndarray) -> np.ndarray:
        """Per-sample, per-component log(weight * density) [n, K]."""
        x = np.asarray(x, dtype=np.float64)
        diff = x[:, None, :] - self.means[None]
        quad = (diff**2 / self.variances[None]).sum(axis=2)
        logdet = np.log(self.variances).sum(axis=1)
        return np.log(self.weights)[None] - 0.5 * (quad + logdet[None] + self.dim * np.log(2 * np.pi))

    def score(self, x: np.ndarray) -> float:
        """Mean log-likelihood per sample."""
        return float(logsumexp(self.log_prob(x), axis=1).mean())


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        i = int(rng.choice(len(x), p=d2 / total)) if total > 0 else int(rng.integers(len(x)))
        centers.append(x[i])
        d2 = np.minimum(d2, ((x - x[i]) ** 2).sum(axis=1))
    return np.stack(centers)


def _m_step(x, resp, var_floor):
    nk = resp.sum(axis=0)
    weights = nk / nk.sum()
    safe = np.maximum(nk, 1e-300)[:, None]
    means = resp.T @ x / safe
    second = resp.T @ (x * x) / safe
    variances = np.maximum(second - means**2, var_floor)
    return weights, means, variances


def fit_gmm(
    features,
    n_components: int = 8,
    seed: int = 0,
    max_iter: int = 200,
    tol: float = 1e-8,
    var_floor: float = 1e-6,
    min_weight: float = 1e-6,
) -> GmmModel:
    """EM with k-means++ seeding.

    A component whose weight falls below ``min_weight`` is re-seeded once at
    the worst-explained sample; if it collapses again the model is flagged
    ``degenerate`` and fitting stops.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise GmmError(f"features must be [n, d], got shape {x.shape}")
    n, d = x.shape
    if n < n_components:
        raise GmmError(f"need at least {n_components} samples for {n_components} components, got {n}")
    rng = np.random.default_rng([seed, 0x6A])
    centers = _kmeanspp(x, n_components, rng)
    nearest = ((x[:, None, :] - centers[None]) ** 2).sum(axis=2).argmin(axis=1)
    resp = np.zeros((n, n_components))
    resp[np.arange(n), nearest] = 1.0
    weights, means, variances = _m_step(x, resp, var_floor)
    # a k-means++ center always owns at least itself, but guard anyway
    weights = np.maximum(weights, 1e-12)
    weights /= weights.sum()
    gmm = GmmModel(weights, means, variances, var_floor)
    reseeded: set[int] = set()
    prev = -np.inf
    for _ in range(max_iter):
        lp = gmm.log_prob(x)
        norm = logsumexp(lp, axis=1)
        ll = float(norm.mean())
        gmm.log_likelihood.append(ll)
        resp = np.exp(lp - norm[:, None])
        weights, means, variances = _m_step(x, resp, var_floor)
        small = np.flatnonzero(weights < min_weight)
        if small.size:
            if reseeded.intersection(small.tolist()):
                gmm.degenerate = True
                warnings.warn("GMM component collapsed twice; stopping with a degenerate fit", stacklevel=2)
                break
            worst = np.argsort(norm)[: small.size]
            for j, i in zip(small, worst):
                means[j] = x[i]
                variances[j] = np.maximum(x.var(axis=0), var_floor)
                weights[j] = 1.0 / n_components
                reseeded.add(int(j))
                gmm.reseeded.append(len(gmm.log_likelihood))
            weights /= weights.sum()
            prev = -np.inf
        gmm.weights, gmm.means, gmm.variances = weights, means, variances
        if abs(ll - prev) <= tol * max(1.0, abs(ll)):
            break
        prev = ll
    return gmm


def sample_gmm(gmm: GmmModel, n: int, seed: int = 0) -> np.ndarray:
    """``n`` i.i.d. draws [n, d]; deterministic per seed."""
    if n < 1:
        raise GmmError("number of samples must be >= 1")
    rng = np.random.default_rng(seed)
    comp = rng.choice(gmm.n_components, size=n, p=gmm.weights)
    return gmm.means[comp] + np.sqrt(gmm.variances[comp]) * rng.normal(size=(n, gmm.dim))
