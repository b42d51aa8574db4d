"""Op kinds: numpy forward kernels and their vector-Jacobian products.

Backward rules only use recorded ops so that gradients are themselves
differentiable.  The three causal-convolution kinds (``conv1d`` and its two
adjoints) are closed under differentiation, which is what makes
second-order meta-gradients through the network possible.
"""

from __future__ import annotations

import numpy as np

from .core import Tensor, as_tensor, record, register, register_composite


# ---------------------------------------------------------------- helpers


def _sum_to_shape(a: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if a.shape == tuple(shape):
        return a
    lead = a.ndim - len(shape)
    if lead < 0:
        raise ValueError(f"cannot reduce shape {a.shape} to {shape}")
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(shape) if n == 1 and a.shape[lead + i] != 1
    )
    out = a.sum(axis=axes, keepdims=True) if axes else a
    return out.reshape(shape)


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _keepdims_shape(shape, axis) -> tuple[int, ...]:
    axes = _norm_axes(axis, len(shape))
    return tuple(1 if i in axes else n for i, n in enumerate(shape))


def sum_to(g: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if g.shape == shape:
        return g
    return record("sum_to", g, shape=shape)


def _bcast(g: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if g.shape == shape:
        return g
    return record("broadcast_to", g, shape=shape)


# ---------------------------------------------------------------- elementwise


def _add_vjp(g, inputs, out, attrs, needs):
    a, b = inputs
    return (sum_to(g, a.shape) if needs[0] else None, sum_to(g, b.shape) if needs[1] else None)


def _sub_vjp(g, inputs, out, attrs, needs):
    a, b = inputs
    return (
        sum_to(g, a.shape) if needs[0] else None,
        sum_to(record("neg", g), b.shape) if needs[1] else None,
    )


def _mul_vjp(g, inputs, out, attrs, needs):
    a, b = inputs
    return (
        sum_to(record("mul", g, b), a.shape) if needs[0] else None,
        sum_to(record("mul", g, a), b.shape) if needs[1] else None,
    )


def _div_vjp(g, inputs, out, attrs, needs):
    a, b = inputs
    ga = sum_to(record("div", g, b), a.shape) if needs[0] else None
    gb = None
    if needs[1]:
        gb = sum_to(record("neg", record("div", record("mul", g, out), b)), b.shape)
    return ga, gb


register("add", np.add, _add_vjp)
register("sub", np.subtract, _sub_vjp)
register("mul", np.multiply, _mul_vjp)
register("div", np.divide, _div_vjp)
register("neg", np.negative, lambda g, i, o, a, n: (record("neg", g),))
register(
    "scalar_mul",
    lambda x, c: x * c,
    lambda g, i, o, a, n: (record("scalar_mul", g, c=a["c"]),),
)


def _relu_vjp(g, inputs, out, attrs, needs):
    mask = (inputs[0].data > 0).astype(np.float64)
    return (record("mul", g, mask),)


register("relu", lambda x: np.maximum(x, 0.0), _relu_vjp)
register("exp", np.exp, lambda g, i, o, a, n: (record("mul", g, o),))
register("log", np.log, lambda g, i, o, a, n: (record("div", g, i[0]),))


def _sqrt_vjp(g, inputs, out, attrs, needs):
    # the derivative at exactly zero is taken as 0 (subgradient convention)
    zero = out.data == 0
    if zero.any():
        keep = np.where(zero, 0.0, 0.5)
        return (record("div", record("mul", g, keep), record("add", out, zero.astype(np.float64))),)
    return (record("div", record("scalar_mul", g, c=0.5), out),)


register("sqrt", np.sqrt, _sqrt_vjp)


# ---------------------------------------------------------------- shape ops


def _matmul_fwd(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"inner dimensions differ: {a.shape[-1]} vs {b.shape[-2]}")
    return np.matmul(a, b)


def _swap(t: Tensor) -> Tensor:
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return record("transpose", t, axes=tuple(axes))


def _matmul_vjp(g, inputs, out, attrs, needs):
    a, b = inputs
    ga = sum_to(record("matmul", g, _swap(b)), a.shape) if needs[0] else None
    gb = sum_to(record("matmul", _swap(a), g), b.shape) if needs[1] else None
    return ga, gb


register("matmul", _matmul_fwd, _matmul_vjp)


def _transpose_vjp(g, inputs, out, attrs, needs):
    inv = tuple(np.argsort(attrs["axes"]))
    return (record("transpose", g, axes=inv),)


register("transpose", lambda x, axes: np.transpose(x, axes), _transpose_vjp)
register(
    "reshape",
    lambda x, shape: np.reshape(x, shape),
    lambda g, i, o, a, n: (record("reshape", g, shape=i[0].shape),),
)
register(
    "broadcast_to",
    lambda x, shape: np.broadcast_to(x, shape).copy(),
    lambda g, i, o, a, n: (sum_to(g, i[0].shape),),
)
register(
    "sum_to",
    _sum_to_shape,
    lambda g, i, o, a, n: (_bcast(g, i[0].shape),),
)


def _sum_vjp(g, inputs, out, attrs, needs):
    x = inputs[0]
    if not attrs["keepdims"]:
        g = record("reshape", g, shape=_keepdims_shape(x.shape, attrs["axis"]))
    return (_bcast(g, x.shape),)


def _count(shape, axis) -> int:
    return int(np.prod([shape[a] for a in _norm_axes(axis, len(shape))]))


def _mean_vjp(g, inputs, out, attrs, needs):
    (gx,) = _sum_vjp(g, inputs, out, attrs, needs)
    return (record("scalar_mul", gx, c=1.0 / _count(inputs[0].shape, attrs["axis"])),)


def _var_vjp(g, inputs, out, attrs, needs):
    x = inputs[0]
    axis = attrs["axis"]
    n = _count(x.shape, axis)
    centered = record("sub", x, record("mean", x, axis=axis, keepdims=True))
    (gx,) = _sum_vjp(g, inputs, out, attrs, needs)
    return (record("scalar_mul", record("mul", gx, centered), c=2.0 / n),)


register("sum", lambda x, axis, keepdims: np.sum(x, axis=axis, keepdims=keepdims), _sum_vjp)
register("mean", lambda x, axis, keepdims: np.mean(x, axis=axis, keepdims=keepdims), _mean_vjp)
register("var", lambda x, axis, keepdims: np.var(x, axis=axis, keepdims=keepdims), _var_vjp)


def _concat_fwd(*arrays, axis):
    return np.concatenate(arrays, axis=axis)


def _concat_vjp(g, inputs, out, attrs, needs):
    axis = attrs["axis"] % g.ndim
    parts = []
    start = 0
    for t, need in zip(inputs, needs):
        stop = start + t.shape[axis]
        if need:
            key = tuple(slice(None) if i != axis else slice(start, stop) for i in range(g.ndim))
            parts.append(record("getitem", g, key=key))
        else:
            parts.append(None)
        start = stop
    return tuple(parts)


register("concat", _concat_fwd, _concat_vjp)


def _unslice_fwd(g, key, shape):
    out = np.zeros(shape)
    np.add.at(out, key, g)
    return out


register(
    "getitem",
    lambda x, key: np.array(x[key], dtype=np.float64),
    lambda g, i, o, a, n: (record("unslice", g, key=a["key"], shape=i[0].shape),),
)
register(
    "unslice",
    _unslice_fwd,
    lambda g, i, o, a, n: (record("getitem", g, key=a["key"]),),
)


def _full_index(indices: np.ndarray, axis: int) -> tuple:
    grids = list(np.ix_(*[np.arange(n) for n in indices.shape]))
    grids[axis] = indices
    return tuple(grids)


def _put_along_fwd(g, indices, axis, shape):
    out = np.zeros(shape)
    np.add.at(out, _full_index(indices, axis % len(shape)), g)
    return out


def _take_along_vjp(g, inputs, out, attrs, needs):
    return (
        record(
            "put_along", g, indices=attrs["indices"], axis=attrs["axis"], shape=inputs[0].shape
        ),
    )


register(
    "take_along",
    lambda x, indices, axis: np.take_along_axis(x, indices, axis=axis),
    _take_along_vjp,
)
register(
    "put_along",
    _put_along_fwd,
    lambda g, i, o, a, n: (record("take_along", g, indices=a["indices"], axis=a["axis"]),),
)


def _sort_prepare(x, axis):
    # stable: ties keep their original order, so the permutation is deterministic
    return {"axis": axis, "indices": np.argsort(x, axis=axis, kind="stable")}


register(
    "sort",
    lambda x, axis, indices: np.take_along_axis(x, indices, axis=axis),
    _take_along_vjp,
    prepare=_sort_prepare,
)


# ---------------------------------------------------------------- softmax family


def _log_softmax_fwd(x, axis):
    m = x.max(axis=axis, keepdims=True)
    shifted = x - m
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _log_softmax_vjp(g, inputs, out, attrs, needs):
    axis = attrs["axis"]
    probs = record("exp", out)
    total = record("sum", g, axis=axis, keepdims=True)
    return (record("sub", g, record("mul", probs, total)),)


def _softmax_fwd(x, axis):
    return np.exp(_log_softmax_fwd(x, axis))


def _softmax_vjp(g, inputs, out, attrs, needs):
    axis = attrs["axis"]
    inner = record("sum", record("mul", g, out), axis=axis, keepdims=True)
    return (record("mul", out, record("sub", g, inner)),)


register("log_softmax", _log_softmax_fwd, _log_softmax_vjp)
register("softmax", _softmax_fwd, _softmax_vjp)


# ---------------------------------------------------------------- causal dilated convolution


def _check_conv(x, w):
    if x.ndim != 3 or w.ndim != 3:
        raise ValueError(f"conv1d expects input [B, C, T] and kernel [Cout, Cin, K], got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv1d kernel expects {w.shape[1]} input channels, got {x.shape[1]}")


def _columns(x: np.ndarray, k: int, dilation: int) -> np.ndarray:
    b, c, t = x.shape
    pad = (k - 1) * dilation
    if k == 1:
        return x
    xp = np.concatenate([np.zeros((b, c, pad)), x], axis=2)
    cols = np.stack([xp[:, :, j * dilation : j * dilation + t] for j in range(k)], axis=2)
    return cols.reshape(b, c * k, t)


def _conv_fwd(x, w, dilation):
    _check_conv(x, w)
    co, ci, k = w.shape
    return np.matmul(w.reshape(co, ci * k), _columns(x, k, dilation))


def _conv_bx_fwd(g, w, dilation):
    # adjoint of conv1d in its input: a transposed (anti-causal) correlation
    co, ci, k = w.shape
    if g.ndim != 3 or g.shape[1] != co:
        raise ValueError(f"conv1d_bx expects [B, {co}, T] cotangent, got {g.shape}")
    b, _, t = g.shape
    m = np.matmul(w.reshape(co, ci * k).T, g).reshape(b, ci, k, t)
    if k == 1:
        return m[:, :, 0, :]
    pad = (k - 1) * dilation
    gxp = np.zeros((b, ci, t + pad))
    for j in range(k):
        gxp[:, :, j * dilation : j * dilation + t] += m[:, :, j, :]
    return gxp[:, :, pad:]


def _conv_bw_fwd(x, g, dilation, k):
    # adjoint of conv1d in its kernel
    if x.ndim != 3 or g.ndim != 3 or x.shape[0] != g.shape[0] or x.shape[2] != g.shape[2]:
        raise ValueError(f"conv1d_bw shape mismatch: input {x.shape}, cotangent {g.shape}")
    ci = x.shape[1]
    gw = np.tensordot(g, _columns(x, k, dilation), axes=([0, 2], [0, 2]))
    return gw.reshape(g.shape[1], ci, k)


def _conv_vjp(g, inputs, out, attrs, needs):
    x, w = inputs
    d = attrs["dilation"]
    gx = record("conv1d_bx", g, w, dilation=d) if needs[0] else None
    gw = record("conv1d_bw", x, g, dilation=d, k=w.shape[2]) if needs[1] else None
    return gx, gw


def _conv_bx_vjp(h, inputs, out, attrs, needs):
    g, w = inputs
    d = attrs["dilation"]
    gg = record("conv1d", h, w, dilation=d) if needs[0] else None
    gw = record("conv1d_bw", h, g, dilation=d, k=w.shape[2]) if needs[1] else None
    return gg, gw


def _conv_bw_vjp(h, inputs, out, attrs, needs):
    x, g = inputs
    d = attrs["dilation"]
    gx = record("conv1d_bx", g, h, dilation=d) if needs[0] else None
    gg = record("conv1d", x, h, dilation=d) if needs[1] else None
    return gx, gg


register("conv1d", _conv_fwd, _conv_vjp)
register("conv1d_bx", _conv_bx_fwd, _conv_bx_vjp)
register("conv1d_bw", _conv_bw_fwd, _conv_bw_vjp)


# ---------------------------------------------------------------- functional API


def add(a, b) -> Tensor:
    return record("add", a, b)


def sub(a, b) -> Tensor:
    return record("sub", a, b)


def mul(a, b) -> Tensor:
    return record("mul", a, b)


def div(a, b) -> Tensor:
    return record("div", a, b)


def scalar_mul(a, c: float) -> Tensor:
    return record("scalar_mul", a, c=float(c))


def matmul(a, b) -> Tensor:
    return record("matmul", a, b)


def relu(x) -> Tensor:
    return record("relu", x)


def exp(x) -> Tensor:
    return record("exp", x)


def log(x) -> Tensor:
    return record("log", x)


def sqrt(x) -> Tensor:
    return record("sqrt", x)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return record("sum", x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    return record("mean", x, axis=axis, keepdims=keepdims)


def var(x, axis=None, keepdims: bool = False) -> Tensor:
    return record("var", x, axis=axis, keepdims=keepdims)


def reshape(x, shape) -> Tensor:
    return record("reshape", x, shape=tuple(shape))


def transpose(x, axes) -> Tensor:
    return record("transpose", x, axes=tuple(axes))


def broadcast_to(x, shape) -> Tensor:
    return record("broadcast_to", x, shape=tuple(shape))


def concat(tensors, axis: int = 0) -> Tensor:
    return record("concat", *tensors, axis=axis)


def slice_(x, key) -> Tensor:
    return record("getitem", x, key=key)


def sort(x, axis: int = -1) -> Tensor:
    return record("sort", x, axis=axis)


def take_along(x, indices, axis: int) -> Tensor:
    return record("take_along", x, indices=np.asarray(indices), axis=axis)


def softmax(x, axis: int = -1) -> Tensor:
    return record("softmax", x, axis=axis)


def log_softmax(x, axis: int = -1) -> Tensor:
    return record("log_softmax", x, axis=axis)


def conv1d(x, w, dilation: int = 1) -> Tensor:
    """Causal dilated convolution of ``x`` [B, Cin, T] with ``w`` [Cout, Cin, K].

    The input is left-padded with ``(K - 1) * dilation`` zeros, so output step
    t only sees inputs at steps <= t.
    """
    return record("conv1d", x, w, dilation=int(dilation))


def cross_entropy(logits, labels, axis: int = 1, weights=None) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` along ``axis``.

    ``weights`` (same shape as ``labels``) masks or reweights positions; the
    result is normalized by their sum.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    idx = np.expand_dims(labels, axis)
    picked = take_along(log_softmax(logits, axis=axis), idx, axis=axis)
    nll = record("neg", reshape(picked, labels.shape))
    if weights is None:
        return mean(nll)
    weights = np.asarray(weights, dtype=np.float64)
    total = weights.sum()
    if total <= 0:
        raise ValueError("cross_entropy weights sum to zero")
    return scalar_mul(sum(mul(nll, weights)), 1.0 / total)


def squared_error(a, b) -> Tensor:
    diff = sub(a, b)
    return sum(mul(diff, diff))


def frobenius_sq(a) -> Tensor:
    a = as_tensor(a)
    return sum(mul(a, a))


register_composite("cross_entropy", cross_entropy)
register_composite("squared_error", squared_error)
register_composite("frobenius_sq", frobenius_sq)
register_composite("broadcast", broadcast_to)
register_composite("slice", lambda x, key: slice_(x, key))
register_composite("variance", lambda x, axis=None, keepdims=False: var(x, axis, keepdims))
