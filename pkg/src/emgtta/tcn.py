"""Dilated causal TCN classifier with batch norm, residuals and low-rank adapters.

Parameters live in plain numpy arrays on :class:`TcnModel`.  :func:`forward`
is functional: any parameter can be overridden by a taped Tensor, which is
how training, statistical alignment and meta-learning choose what to
differentiate.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .store import read_npz, write_npz

CHECKPOINT_VERSION = 1


class ModelStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class TcnConfig:
    input_channels: int = 14
    blocks: int = 5
    channels: int = 40
    kernel_size: int = 3
    dilation_base: int = 2
    classes: int = 8
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    lora_rank: int = 4
    lora_block: int = 2

    def __post_init__(self):
        for name in ("input_channels", "blocks", "channels", "kernel_size", "dilation_base", "classes", "lora_rank"):
            if getattr(self, name) < 1:
                raise ValueError(f"TcnConfig.{name} must be >= 1")
        if not 0 <= self.lora_block < self.blocks:
            raise ValueError(f"TcnConfig.lora_block must be in [0, {self.blocks - 1}]")
        if self.bn_eps <= 0:
            raise ValueError("TcnConfig.bn_eps must be positive")

    @classmethod
    def reference(cls) -> "TcnConfig":
        """Five 40-channel blocks, kernel 3, dilation 1..16: 47,008 parameters."""
        return cls()

    @property
    def receptive_field(self) -> int:
        return receptive_field(self)

    def dilation(self, block: int) -> int:
        return self.dilation_base**block


def receptive_field(config: TcnConfig) -> int:
    """1 + sum over blocks of 2 (K - 1) base**m: two causal convs per block."""
    k, base = config.kernel_size, config.dilation_base
    return 1 + sum(2 * (k - 1) * base**m for m in range(config.blocks))


def _bn_names(config: TcnConfig) -> list[str]:
    return [f"blocks.{m}.bn{j}" for m in range(config.blocks) for j in (1, 2)]


class TcnModel:
    """Backbone parameters, BN running statistics and optional adapters."""

    def __init__(self, config: TcnConfig, params: dict, bn_stats: dict, adapters: dict | None = None):
        self.config = config
        self.params = params
        self.bn_stats = bn_stats
        self.adapters = adapters or {}

    @property
    def has_adapters(self) -> bool:
        return bool(self.adapters)

    @property
    def bn_names(self) -> list[str]:
        return _bn_names(self.config)

    def copy(self) -> "TcnModel":
        return TcnModel(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            {k: (m.copy(), v.copy()) for k, (m, v) in self.bn_stats.items()},
            {k: v.copy() for k, v in self.adapters.items()},
        )

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {**self.params, **self.adapters}

    def digest(self, include=("params", "bn", "adapters")) -> str:
        h = hashlib.sha256()
        if "params" in include:
            for k in sorted(self.params):
                h.update(k.encode())
                h.update(np.ascontiguousarray(self.params[k]).tobytes())
        if "bn" in include:
            for k in sorted(self.bn_stats):
                h.update(k.encode())
                for a in self.bn_stats[k]:
                    h.update(np.ascontiguousarray(a).tobytes())
        if "adapters" in include:
            for k in sorted(self.adapters):
                h.update(k.encode())
                h.update(np.ascontiguousarray(self.adapters[k]).tobytes())
        return h.hexdigest()

    def backbone_digest(self) -> str:
        return self.digest(include=("params", "bn"))


def build(config: TcnConfig, seed: int = 0) -> TcnModel:
    """He-initialized convolutions; zero biases; unit BN scale; identity running stats."""
    rng = np.random.default_rng(seed)
    c, k = config.channels, config.kernel_size
    params: dict[str, np.ndarray] = {}
    for m in range(config.blocks):
        cin = config.input_channels if m == 0 else c
        pre = f"blocks.{m}"
        params[f"{pre}.conv1.weight"] = rng.normal(0.0, np.sqrt(2.0 / (cin * k)), size=(c, cin, k))
        params[f"{pre}.conv1.bias"] = np.zeros(c)
        params[f"{pre}.bn1.gamma"] = np.ones(c)
        params[f"{pre}.bn1.beta"] = np.zeros(c)
        params[f"{pre}.conv2.weight"] = rng.normal(0.0, np.sqrt(2.0 / (c * k)), size=(c, c, k))
        params[f"{pre}.conv2.bias"] = np.zeros(c)
        params[f"{pre}.bn2.gamma"] = np.ones(c)
        params[f"{pre}.bn2.beta"] = np.zeros(c)
        if cin != c:
            params[f"{pre}.proj.weight"] = rng.normal(0.0, np.sqrt(1.0 / cin), size=(c, cin, 1))
            params[f"{pre}.proj.bias"] = np.zeros(c)
    params["readout.weight"] = rng.normal(0.0, np.sqrt(1.0 / c), size=(config.classes, c))
    params["readout.bias"] = np.zeros(config.classes)
    bn_stats = {name: (np.zeros(c), np.ones(c)) for name in _bn_names(config)}
    return TcnModel(config, params, bn_stats)


def count_params(model: TcnModel) -> int:
    return int(sum(a.size for a in model.params.values()) + sum(a.size for a in model.adapters.values()))


def adapter_names(config: TcnConfig) -> list[str]:
    pre = f"blocks.{config.lora_block}"
    return [f"{pre}.{conv}.lora_{part}" for conv in ("conv1", "conv2") for part in ("A", "B")]


def inject_lora(model: TcnModel, rank: int | None = None, seed: int = 0) -> TcnModel:
    """Copy of ``model`` with low-rank adapters on both convs of the configured block.

    ``B`` starts at zero, so the adapted network computes exactly the base
    function until the adapters are trained.
    """
    if model.has_adapters:
        raise ModelStateError("model already carries adapters")
    cfg = model.config
    r = cfg.lora_rank if rank is None else int(rank)
    if r < 1:
        raise ValueError("adapter rank must be >= 1")
    rng = np.random.default_rng([seed, 0x10A])
    out = model.copy()
    m = cfg.lora_block
    for conv in ("conv1", "conv2"):
        cout, cin, _ = model.params[f"blocks.{m}.{conv}.weight"].shape
        out.adapters[f"blocks.{m}.{conv}.lora_A"] = rng.normal(0.0, 1.0 / np.sqrt(cin), size=(cin, r))
        out.adapters[f"blocks.{m}.{conv}.lora_B"] = np.zeros((r, cout))
    return out


def reset_lora(model: TcnModel) -> TcnModel:
    """Copy of ``model`` with every adapter removed."""
    if not model.has_adapters:
        warnings.warn("reset_lora: model has no adapters", stacklevel=2)
    out = model.copy()
    out.adapters = {}
    return out


# ---------------------------------------------------------------- forward

BnMode = str | Callable[[str, np.ndarray], tuple[np.ndarray, np.ndarray]]


def _bn(name, z, bn, p, model, capture):
    eps = model.config.bn_eps
    gamma = ad.reshape(p[f"{name}.gamma"], (1, -1, 1))
    beta = ad.reshape(p[f"{name}.beta"], (1, -1, 1))
    if bn == "train":
        mu = ad.mean(z, axis=(0, 2), keepdims=True)
        var = ad.var(z, axis=(0, 2), keepdims=True)
        if capture is not None:
            capture.setdefault("batch_stats", {})[name] = (mu.data.reshape(-1), var.data.reshape(-1))
        zhat = ad.div(ad.sub(z, mu), ad.sqrt(var + eps))
    else:
        if bn == "eval":
            mu, var = model.bn_stats[name]
        else:
            mu, var = bn(name, z.data)
        scale = 1.0 / np.sqrt(np.asarray(var) + eps)
        zhat = ad.mul(ad.sub(z, np.asarray(mu)[None, :, None]), scale[None, :, None])
    return ad.add(ad.mul(zhat, gamma), beta)


def _conv(x, p, pre, dilation):
    y = ad.conv1d(x, p[f"{pre}.weight"], dilation)
    y = ad.add(y, ad.reshape(p[f"{pre}.bias"], (1, -1, 1)))
    a_key = f"{pre}.lora_A"
    if a_key in p:
        delta = ad.transpose(ad.matmul(p[a_key], p[f"{pre}.lora_B"]), (1, 0))
        y = ad.add(y, ad.matmul(delta, x))
    return y


def _resolve(model: TcnModel, params: Mapping[str, Tensor] | None) -> dict[str, Tensor]:
    p = {k: Tensor(v) for k, v in model.params.items()}
    p.update({k: Tensor(v) for k, v in model.adapters.items()})
    if params:
        unknown = set(params) - set(p)
        if unknown:
            raise KeyError(f"unknown parameters {sorted(unknown)}")
        p.update(params)
    return p


def block_forward(model, m: int, x, p, bn: BnMode = "eval", capture=None) -> Tensor:
    pre = f"blocks.{m}"
    d = model.config.dilation(m)
    h = _conv(x, p, f"{pre}.conv1", d)
    h = ad.relu(_bn(f"{pre}.bn1", h, bn, p, model, capture))
    h = _conv(h, p, f"{pre}.conv2", d)
    h = ad.relu(_bn(f"{pre}.bn2", h, bn, p, model, capture))
    if f"{pre}.proj.weight" in p:
        res = ad.add(ad.conv1d(x, p[f"{pre}.proj.weight"], 1), ad.reshape(p[f"{pre}.proj.bias"], (1, -1, 1)))
    else:
        res = x
    return ad.relu(ad.add(h, res))


def forward(
    model: TcnModel,
    x,
    bn: BnMode = "eval",
    params: Mapping[str, Tensor] | None = None,
    capture: dict | None = None,
    start_block: int = 0,
    stop_block: int | None = None,
) -> Tensor:
    """Per-timestep logits [B, classes, T] for input [B, channels, T].

    ``bn`` is ``"train"`` (batch statistics), ``"eval"`` (running statistics)
    or a callable ``(layer_name, pre_norm_activations) -> (mean, var)`` that
    supplies the statistics for each BN layer as it is reached.  With
    ``stop_block`` the output of that block is returned instead of logits;
    ``start_block`` lets ``x`` be the input of a later block.
    """
    cfg = model.config
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if x.ndim == 2:
        x = ad.reshape(x, (1,) + x.shape)
    expected = cfg.input_channels if start_block == 0 else cfg.channels
    if x.ndim != 3 or x.shape[1] != expected:
        raise ad.ShapeError(f"expected input [B, {expected}, T], got {x.shape}")
    p = _resolve(model, params)
    h = x
    last = cfg.blocks - 1 if stop_block is None else stop_block
    for m in range(start_block, last + 1):
        h = block_forward(model, m, h, p, bn, capture)
        if capture is not None:
            capture[f"blocks.{m}"] = h
    if stop_block is not None:
        return h
    logits = ad.matmul(p["readout.weight"], h)
    return ad.add(logits, ad.reshape(p["readout.bias"], (1, -1, 1)))


def predict(model: TcnModel, signal: np.ndarray, bn: BnMode = "eval") -> np.ndarray:
    """Argmax class per timestep for one [channels, T] stream."""
    logits = forward(model, signal[None], bn=bn).data[0]
    return logits.argmax(axis=0)


def update_running_stats(model: TcnModel, batch_stats: dict, momentum: float | None = None) -> None:
    m = model.config.bn_momentum if momentum is None else momentum
    for name, (mu, var) in batch_stats.items():
        old_mu, old_var = model.bn_stats[name]
        model.bn_stats[name] = ((1 - m) * old_mu + m * mu, (1 - m) * old_var + m * var)


# ---------------------------------------------------------------- checkpoints

def save_model(model: TcnModel, path, provenance: dict | None = None) -> Path:
    """Checkpoint with the architecture (and optional provenance) in the header."""
    path = Path(path)
    header = {"format": "emgtta-tcn", "version": CHECKPOINT_VERSION, "config": asdict(model.config)}
    if provenance:
        header["provenance"] = provenance
    arrays = {}
    for k, v in model.params.items():
        arrays[f"param/{k}"] = v
    for k, (mu, var) in model.bn_stats.items():
        arrays[f"bn_mean/{k}"] = mu
        arrays[f"bn_var/{k}"] = var
    for k, v in model.adapters.items():
        arrays[f"adapter/{k}"] = v
    return write_npz(path, arrays, header)


def load_model(path) -> TcnModel:
    header, data = read_npz(path)
    if header.get("format") != "emgtta-tcn":
        raise ModelStateError(f"{path} is not a model checkpoint")
    if header["version"] > CHECKPOINT_VERSION:
        raise ModelStateError(f"checkpoint version {header['version']} is newer than supported")
    config = TcnConfig(**header["config"])
    params, means, vars_, adapters = {}, {}, {}, {}
    for key, value in data.items():
        kind, _, name = key.partition("/")
        if kind == "param":
            params[name] = value
        elif kind == "bn_mean":
            means[name] = value
        elif kind == "bn_var":
            vars_[name] = value
        elif kind == "adapter":
            adapters[name] = value
    bn_stats = {k: (means[k], vars_[k]) for k in means}
    return TcnModel(config, params, bn_stats, adapters)


__all__ = [
    "TcnConfig", "TcnModel", "ModelStateError", "build", "forward", "predict", "count_params",
    "receptive_field", "inject_lora", "reset_lora", "adapter_names", "save_model", "load_model",
    "update_running_stats", "block_forward",
]
