"""Tape, tensors and the reverse sweep.

Every differentiable value is a :class:`Tensor`.  A tensor that depends on a
watched variable carries a node id into the :class:`Tape` it was recorded on;
everything else is a constant.  Backward rules are themselves written with
recorded operations, so running :func:`backward` with ``create_graph=True``
leaves the gradient computation on the tape and it can be differentiated
again.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Iterator, Sequence

import numpy as np


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError, ValueError):
    pass


class UnsupportedOperation(AutodiffError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unsupported operation"


class ContractError(AutodiffError, ValueError):
    pass


class SecondOrderUnavailable(AutodiffError):
    pass


@dataclass(frozen=True)
class OpDef:
    """Forward kernel plus vector-Jacobian product for one op kind.

    ``vjp(g, inputs, out, attrs, needs)`` returns one gradient (or None) per
    input and must build its result from recorded ops only.
    """

    forward: Callable[..., np.ndarray]
    vjp: Callable[..., tuple]
    prepare: Callable[..., dict] | None = None


_OPS: dict[str, OpDef] = {}
_COMPOSITES: dict[str, Callable[..., "Tensor"]] = {}


def register(kind: str, forward, vjp, prepare=None) -> None:
    _OPS[kind] = OpDef(forward, vjp, prepare)


def register_composite(kind: str, fn) -> None:
    _COMPOSITES[kind] = fn


def op_kinds() -> list[str]:
    return sorted(set(_OPS) | set(_COMPOSITES))


@dataclass
class Node:
    kind: str
    inputs: tuple["Tensor", ...]
    attrs: dict[str, Any]
    value: np.ndarray


class Tape:
    """Append-only record of operations for one run."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._recording = True

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def recording(self) -> bool:
        return self._recording

    def variable(self, value, copy: bool = True) -> "Tensor":
        data = np.array(value, dtype=np.float64, copy=copy)
        node = Node("leaf", (), {}, data)
        self.nodes.append(node)
        return Tensor(data, self, len(self.nodes) - 1)

    def _append(self, kind: str, inputs: tuple["Tensor", ...], attrs: dict, value) -> int:
        self.nodes.append(Node(kind, inputs, attrs, value))
        return len(self.nodes) - 1

    def checkpoint(self) -> int:
        return len(self.nodes)

    def truncate(self, position: int) -> None:
        """Drop every node recorded after ``position``.

        Tensors produced after the checkpoint become dangling and must not be
        used again.
        """
        if not 0 <= position <= len(self.nodes):
            raise ContractError(f"checkpoint {position} outside tape of length {len(self.nodes)}")
        del self.nodes[position:]

    @contextmanager
    def paused(self) -> Iterator[None]:
        previous = self._recording
        self._recording = False
        try:
            yield
        finally:
            self._recording = previous

    def replay(self) -> list[np.ndarray]:
        """Re-run every recorded forward kernel from the leaves."""
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.kind == "leaf":
                values.append(node.value)
                continue
            args = [
                values[t.node] if t.tape is self and t.node is not None else t.data
                for t in node.inputs
            ]
            values.append(_OPS[node.kind].forward(*args, **node.attrs))
        return values


class Tensor:
    __slots__ = ("data", "tape", "node")
    __array_priority__ = 100

    def __init__(self, data, tape: Tape | None = None, node: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def requires_grad(self) -> bool:
        return self.node is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic sugar; every method goes through ``record``
    def __add__(self, other):
        return record("add", self, other)

    def __radd__(self, other):
        return record("add", other, self)

    def __sub__(self, other):
        return record("sub", self, other)

    def __rsub__(self, other):
        return record("sub", other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return record("scalar_mul", self, c=float(other))
        return record("mul", self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return record("scalar_mul", self, c=1.0 / float(other))
        return record("div", self, other)

    def __rtruediv__(self, other):
        return record("div", other, self)

    def __neg__(self):
        return record("neg", self)

    def __matmul__(self, other):
        return record("matmul", self, other)

    def __rmatmul__(self, other):
        return record("matmul", other, self)

    def __getitem__(self, key):
        return record("getitem", self, key=key)

    @property
    def T(self) -> "Tensor":
        return record("transpose", self, axes=tuple(reversed(range(self.ndim))))

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return record("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return record("mean", self, axis=axis, keepdims=keepdims)

    def var(self, axis=None, keepdims: bool = False) -> "Tensor":
        return record("var", self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return record("reshape", self, shape=tuple(shape))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return record("transpose", self, axes=tuple(axes) or tuple(reversed(range(self.ndim))))

    def relu(self) -> "Tensor":
        return record("relu", self)

    def exp(self) -> "Tensor":
        return record("exp", self)

    def log(self) -> "Tensor":
        return record("log", self)

    def sqrt(self) -> "Tensor":
        return record("sqrt", self)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _active_tape(inputs: Sequence[Tensor]) -> Tape | None:
    tape = None
    for t in inputs:
        if t.node is None:
            continue
        if tape is None:
            tape = t.tape
        elif t.tape is not tape:
            raise AutodiffError("inputs were recorded on different tapes")
    if tape is not None and not tape.recording:
        return None
    return tape


def record(kind: str, *inputs, **attrs) -> Tensor:
    """Apply op ``kind`` and append it to the tape of its inputs."""
    if kind in _COMPOSITES:
        return _COMPOSITES[kind](*inputs, **attrs)
    try:
        op = _OPS[kind]
    except KeyError:
        raise UnsupportedOperation(f"unsupported operation kind {kind!r}") from None
    tensors = tuple(as_tensor(x) for x in inputs)
    arrays = [t.data for t in tensors]
    if op.prepare is not None:
        attrs = op.prepare(*arrays, **attrs)
    try:
        value = op.forward(*arrays, **attrs)
    except (ValueError, IndexError) as exc:
        shapes = ", ".join(str(a.shape) for a in arrays)
        raise ShapeError(f"{kind}: incompatible input shapes ({shapes}): {exc}") from None
    tape = _active_tape(tensors)
    if tape is None:
        return Tensor(value)
    return Tensor(value, tape, tape._append(kind, tensors, attrs, value))


class GradientMap(dict):
    """node id -> gradient Tensor, also indexable by the Tensor itself."""

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            key = key.node
        return super().__getitem__(key)

    def __contains__(self, key) -> bool:
        if isinstance(key, Tensor):
            key = key.node
        return super().__contains__(key)

    def arrays(self) -> dict[int, np.ndarray]:
        return {k: v.data for k, v in self.items()}


def _accumulate(grads: dict[int, Tensor], node: int, g: Tensor) -> None:
    prev = grads.get(node)
    grads[node] = g if prev is None else record("add", prev, g)


def backward(
    tape: Tape,
    loss: Tensor,
    wrt: Iterable[Tensor | int],
    create_graph: bool = False,
) -> GradientMap:
    """Reverse sweep from ``loss``; returns d loss / d p for every p in ``wrt``.

    Parameters that the loss does not reach get zero gradients.  With
    ``create_graph`` the sweep is itself recorded so the returned gradients
    can be differentiated again.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    targets: dict[int, tuple[int, ...]] = {}
    for p in wrt:
        node = p.node if isinstance(p, Tensor) else int(p)
        if node is None:
            raise ContractError("cannot differentiate with respect to a constant")
        if isinstance(p, Tensor) and p.tape is not tape:
            raise ContractError("parameter belongs to a different tape")
        targets[node] = tape.nodes[node].value.shape
    result = GradientMap()
    if loss.node is None or loss.tape is not tape:
        for node, shape in targets.items():
            result[node] = Tensor(np.zeros(shape))
        return result

    lowest = min(targets, default=0)
    ctx = tape.paused() if not create_graph else _nullcontext()
    with ctx:
        seed = Tensor(np.ones_like(loss.data))
        grads: dict[int, Tensor] = {loss.node: seed}
        for idx in range(loss.node, lowest - 1, -1):
            g = grads.pop(idx, None)
            if g is None:
                continue
            if idx in targets:
                result[idx] = g
            node = tape.nodes[idx]
            if node.kind == "leaf":
                continue
            needs = tuple(
                t.node is not None and t.tape is tape and t.node >= lowest for t in node.inputs
            )
            if not any(needs):
                continue
            out = Tensor(node.value, tape, idx)
            parts = _OPS[node.kind].vjp(g, node.inputs, out, node.attrs, needs)
            for t, need, part in zip(node.inputs, needs, parts):
                if need and part is not None:
                    _accumulate(grads, t.node, part)
    for node, shape in targets.items():
        if node not in result:
            result[node] = Tensor(np.zeros(shape))
    return result


@contextmanager
def _nullcontext():
    yield


def grad(loss: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of ``loss`` with respect to each tensor in ``wrt``, in order."""
    tape = next((p.tape for p in wrt if p.tape is not None), None)
    if tape is None:
        raise ContractError("no watched variables to differentiate")
    gm = backward(tape, loss, wrt, create_graph=create_graph)
    return [gm[p.node] for p in wrt]


def grad_of_grad(
    tape: Tape,
    outer_loss: Tensor,
    inner_grads: GradientMap | Sequence[Tensor],
    wrt: Iterable[Tensor | int],
) -> GradientMap:
    """Differentiate ``outer_loss`` through previously recorded gradients.

    ``inner_grads`` must come from ``backward(..., create_graph=True)`` on the
    same tape; otherwise the Hessian-vector terms were never recorded.
    """
    values = inner_grads.values() if isinstance(inner_grads, dict) else inner_grads
    for g in values:
        if g.node is None and not g.data.any():
            continue
        if g.node is None or g.tape is not tape:
            raise SecondOrderUnavailable(
                "inner gradients were not recorded on this tape; "
                "recompute them with create_graph=True"
            )
    return backward(tape, outer_loss, wrt, create_graph=False)
