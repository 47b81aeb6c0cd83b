"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tape` owns an append-only list of :class:`Node` objects. Every
operation appends one node whose parents already live on the tape, so the tape
order is a topological order and the backward pass is a single reverse sweep.

Example::

    tape = Tape()
    x = tape.leaf(np.array([[3.0]]))
    y = x * x
    grads = tape.backward(y)
    grads[x]  # array([[6.]])
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from scipy.special import expit

logger = logging.getLogger(__name__)

DEFAULT_LEAKY_SLOPE = 0.2


class AutodiffError(ValueError):
    """Raised for invalid tape usage (unknown node, empty tape, bad seed...)."""


class ShapeError(AutodiffError):
    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


def _as_array(value: Any) -> np.ndarray:
    # np.ascontiguousarray would promote 0-d inputs to shape (1,)
    a = np.asarray(value, dtype=np.float64)
    return a if a.flags.c_contiguous else a.copy()


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (the inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


@dataclass(eq=False)
class Node:
    tape: "Tape"
    id: int
    op: str
    parents: tuple[int, ...]
    value: np.ndarray
    attrs: dict = field(default_factory=dict)
    adjoint: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(id={self.id}, op={self.op!r}, shape={self.shape})"

    def _lift(self, other: Any) -> "Node":
        if isinstance(other, Node):
            if other.tape is not self.tape:
                raise AutodiffError("cannot combine nodes from different tapes")
            return other
        return self.tape.const(other)

    def __add__(self, other):
        return self.tape.apply("add", self, self._lift(other))

    def __radd__(self, other):
        return self.tape.apply("add", self._lift(other), self)

    def __sub__(self, other):
        return self.tape.apply("sub", self, self._lift(other))

    def __rsub__(self, other):
        return self.tape.apply("sub", self._lift(other), self)

    def __mul__(self, other):
        return self.tape.apply("mul", self, self._lift(other))

    def __rmul__(self, other):
        return self.tape.apply("mul", self._lift(other), self)

    def __neg__(self):
        return self.tape.apply("neg", self)

    def __matmul__(self, other):
        return self.tape.apply("matmul", self, self._lift(other))

    def __rmatmul__(self, other):
        return self.tape.apply("matmul", self._lift(other), self)

    def __getitem__(self, key):
        return self.tape.apply("getitem", self, key=key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self.tape.apply("reshape", self, shape=tuple(shape))

    def sum(self, axis=None, keepdims=False):
        return self.tape.apply("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return self.tape.apply("mean", self, axis=axis, keepdims=keepdims)


# --------------------------------------------------------------------------
# Op registry. Each entry maps a tag to (forward, vjp). ``forward`` receives
# parent values and attrs; ``vjp`` receives (adjoint, output, parent values,
# attrs) and returns one adjoint per parent.


@dataclass(frozen=True)
class OpDef:
    forward: Callable[..., np.ndarray]
    vjp: Callable[..., tuple[np.ndarray, ...]]
    arity: int | None  # None: variadic


OPS: dict[str, OpDef] = {}


def register(name: str, arity: int | None):
    def deco(cls):
        OPS[name] = OpDef(cls.forward, cls.vjp, arity)
        return cls

    return deco


def _broadcast_shape(op: str, a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


@register("add", 2)
class _Add:
    @staticmethod
    def forward(a, b):
        _broadcast_shape("add", a, b)
        return a + b

    @staticmethod
    def vjp(g, out, a, b):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)


@register("sub", 2)
class _Sub:
    @staticmethod
    def forward(a, b):
        _broadcast_shape("sub", a, b)
        return a - b

    @staticmethod
    def vjp(g, out, a, b):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)


@register("mul", 2)
class _Mul:
    @staticmethod
    def forward(a, b):
        _broadcast_shape("mul", a, b)
        return a * b

    @staticmethod
    def vjp(g, out, a, b):
        return unbroadcast(g * b, a.shape), unbroadcast(g * a, b.shape)


@register("neg", 1)
class _Neg:
    @staticmethod
    def forward(a):
        return -a

    @staticmethod
    def vjp(g, out, a):
        return (-g,)


@register("matmul", 2)
class _Matmul:
    @staticmethod
    def forward(a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError("matmul", a.shape, b.shape)
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise ShapeError("matmul", a.shape, b.shape, detail="batch dims") from None
        return a @ b

    @staticmethod
    def vjp(g, out, a, b):
        ga = g @ np.swapaxes(b, -1, -2)
        gb = np.swapaxes(a, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)


@register("concat", None)
class _Concat:
    @staticmethod
    def forward(*xs, axis=-1):
        ref = xs[0]
        ax = axis % ref.ndim
        for x in xs[1:]:
            if x.ndim != ref.ndim or any(
                x.shape[d] != ref.shape[d] for d in range(ref.ndim) if d != ax
            ):
                raise ShapeError("concat", *(x.shape for x in xs))
        return np.concatenate(xs, axis=ax)

    @staticmethod
    def vjp(g, out, *xs, axis=-1):
        ax = axis % g.ndim
        bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]
        return tuple(np.split(g, bounds, axis=ax))


def _expand(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    elif axis is None and not keepdims:
        g = np.reshape(g, (1,) * len(shape))
    return np.broadcast_to(g, shape)


@register("sum", 1)
class _Sum:
    @staticmethod
    def forward(a, axis=None, keepdims=False):
        return np.asarray(a.sum(axis=axis, keepdims=keepdims), dtype=np.float64)

    @staticmethod
    def vjp(g, out, a, axis=None, keepdims=False):
        return (np.array(_expand(g, a.shape, axis, keepdims)),)


@register("mean", 1)
class _Mean:
    @staticmethod
    def forward(a, axis=None, keepdims=False):
        if a.size == 0:
            raise ShapeError("mean", a.shape, detail="empty input")
        return np.asarray(a.mean(axis=axis, keepdims=keepdims), dtype=np.float64)

    @staticmethod
    def vjp(g, out, a, axis=None, keepdims=False):
        count = a.size // max(out.size, 1)
        return (np.array(_expand(g, a.shape, axis, keepdims)) / count,)


@register("relu", 1)
class _Relu:
    @staticmethod
    def forward(a):
        return np.maximum(a, 0.0)

    @staticmethod
    def vjp(g, out, a):
        return (g * (a > 0),)


@register("leaky_relu", 1)
class _LeakyRelu:
    @staticmethod
    def forward(a, slope=DEFAULT_LEAKY_SLOPE):
        return np.where(a > 0, a, slope * a)

    @staticmethod
    def vjp(g, out, a, slope=DEFAULT_LEAKY_SLOPE):
        return (g * np.where(a > 0, 1.0, slope),)


@register("sigmoid", 1)
class _Sigmoid:
    @staticmethod
    def forward(a):
        return expit(a)

    @staticmethod
    def vjp(g, out, a):
        return (g * out * (1.0 - out),)


@register("softplus", 1)
class _Softplus:
    # log(1 + e^x) without overflow
    @staticmethod
    def forward(a):
        return np.logaddexp(0.0, a)

    @staticmethod
    def vjp(g, out, a):
        return (g * expit(a),)


@register("log", 1)
class _Log:
    @staticmethod
    def forward(a):
        return np.log(a)

    @staticmethod
    def vjp(g, out, a):
        return (g / a,)


@register("exp", 1)
class _Exp:
    @staticmethod
    def forward(a):
        return np.exp(a)

    @staticmethod
    def vjp(g, out, a):
        return (g * out,)


@register("softmax", 1)
class _Softmax:
    @staticmethod
    def forward(a, axis=-1):
        z = np.exp(a - a.max(axis=axis, keepdims=True))
        return z / z.sum(axis=axis, keepdims=True)

    @staticmethod
    def vjp(g, out, a, axis=-1):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)


@register("broadcast", 1)
class _Broadcast:
    @staticmethod
    def forward(a, shape):
        try:
            return np.array(np.broadcast_to(a, shape))
        except ValueError:
            raise ShapeError("broadcast", a.shape, tuple(shape)) from None

    @staticmethod
    def vjp(g, out, a, shape):
        return (unbroadcast(g, a.shape),)


@register("reshape", 1)
class _Reshape:
    @staticmethod
    def forward(a, shape):
        try:
            return a.reshape(shape)
        except ValueError:
            raise ShapeError("reshape", a.shape, tuple(shape)) from None

    @staticmethod
    def vjp(g, out, a, shape):
        return (g.reshape(a.shape),)


@register("getitem", 1)
class _GetItem:
    @staticmethod
    def forward(a, key):
        return np.array(a[key])

    @staticmethod
    def vjp(g, out, a, key):
        full = np.zeros_like(a)
        if _is_basic_index(key):
            full[key] += g
        else:
            np.add.at(full, key, g)
        return (full,)


def _is_basic_index(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)


@register("take", 1)
class _Take:
    """Gather from the flattened input: ``out = a.ravel()[index]``."""

    @staticmethod
    def forward(a, index):
        if index.size and (index.min() < 0 or index.max() >= a.size):
            raise ShapeError("take", a.shape, index.shape, detail="index out of range")
        return a.reshape(-1)[index]

    @staticmethod
    def vjp(g, out, a, index):
        flat = np.zeros(a.size)
        np.add.at(flat, index.reshape(-1), g.reshape(-1))
        return (flat.reshape(a.shape),)


@register("scatter_add", 1)
class _ScatterAdd:
    """``out = zeros(size); out[index] += a`` with repeated indices summed."""

    @staticmethod
    def forward(a, index, size):
        if index.shape != a.shape:
            raise ShapeError("scatter_add", a.shape, index.shape)
        out = np.zeros(size)
        np.add.at(out, index.reshape(-1), a.reshape(-1))
        return out

    @staticmethod
    def vjp(g, out, a, index, size):
        return (g[index],)


class Gradients:
    """Adjoints produced by one backward sweep; missing nodes read as zeros."""

    def __init__(self, tape: "Tape", adjoints: dict[int, np.ndarray]):
        self._tape = tape
        self._adjoints = adjoints

    def __getitem__(self, node: Node) -> np.ndarray:
        adj = self._adjoints.get(node.id)
        if adj is None:
            return np.zeros_like(node.value)
        return adj

    def __contains__(self, node: Node) -> bool:
        return node.id in self._adjoints


class Tape:
    """Append-only computation record.

    ``checked`` enables finiteness validation of leaf values at construction.
    A tape is single-writer; hand it between workers, do not share it.
    """

    def __init__(self, checked: bool = True):
        self.checked = checked
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def _append(self, op, parents, value, attrs=None) -> Node:
        node = Node(self, len(self.nodes), op, parents, value, attrs or {})
        self.nodes.append(node)
        return node

    def leaf(self, value, name: str | None = None) -> Node:
        arr = _as_array(value)
        if self.checked and not np.all(np.isfinite(arr)):
            raise AutodiffError(f"non-finite value in leaf {name or ''}".strip())
        return self._append("leaf", (), arr, {"name": name} if name else None)

    def const(self, value) -> Node:
        return self._append("const", (), _as_array(value))

    def node(self, node_id: int) -> Node:
        if not 0 <= node_id < len(self.nodes):
            raise AutodiffError(f"unknown node id {node_id}")
        return self.nodes[node_id]

    def apply(self, op: str, *inputs: Node, **attrs) -> Node:
        """Append ``op`` applied to ``inputs`` and return the new node."""
        spec = OPS.get(op)
        if spec is None:
            raise AutodiffError(f"unknown op {op!r}")
        if spec.arity is not None and len(inputs) != spec.arity:
            raise AutodiffError(f"{op} expects {spec.arity} inputs, got {len(inputs)}")
        for x in inputs:
            if x.tape is not self or x.id >= len(self.nodes) or self.nodes[x.id] is not x:
                raise AutodiffError(f"{op}: input {x!r} is not on this tape")
        value = spec.forward(*(x.value for x in inputs), **attrs)
        return self._append(op, tuple(x.id for x in inputs), value, attrs)

    def forward_op(self, op: str, inputs: Sequence[int], **attrs) -> int:
        """Id-based form of :meth:`apply`."""
        node = self.apply(op, *(self.node(i) for i in inputs), **attrs)
        return node.id

    def detach(self, node: Node) -> Node:
        """A parentless copy of ``node``; gradients stop here."""
        self.node(node.id)
        return self._append("detach", (), node.value)

    def checkpoint(self) -> int:
        return len(self.nodes)

    def rewind(self, mark: int) -> None:
        if not 0 <= mark <= len(self.nodes):
            raise AutodiffError(f"invalid checkpoint {mark}")
        del self.nodes[mark:]

    def backward(self, root: Node | int, seed=None) -> Gradients:
        """Reverse sweep from ``root``; returns adjoints of every ancestor.

        ``seed`` defaults to ones for a single-element root and must match the
        root shape otherwise.
        """
        if not self.nodes:
            raise AutodiffError("backward on an empty tape")
        root = self.node(root if isinstance(root, int) else root.id)
        if seed is None:
            if root.value.size != 1:
                raise AutodiffError(
                    f"seed required for non-scalar root of shape {root.shape}"
                )
            seed = np.ones_like(root.value)
        seed = _as_array(seed)
        if seed.shape != root.shape:
            raise ShapeError("backward", root.shape, seed.shape, detail="seed")

        for n in self.nodes:
            n.adjoint = None
        adjoints: dict[int, np.ndarray] = {root.id: seed}
        for node in reversed(self.nodes[: root.id + 1]):
            g = adjoints.get(node.id)
            if g is None:
                continue
            node.adjoint = g
            if not node.parents:
                continue
            spec = OPS[node.op]
            parent_vals = [self.nodes[p].value for p in node.parents]
            parent_grads = spec.vjp(g, node.value, *parent_vals, **node.attrs)
            for pid, pg in zip(node.parents, parent_grads):
                prev = adjoints.get(pid)
                adjoints[pid] = pg if prev is None else prev + pg
        return Gradients(self, adjoints)


# Functional front end -----------------------------------------------------


def add(a: Node, b) -> Node:
    return a + b


def sub(a: Node, b) -> Node:
    return a - b


def mul(a: Node, b) -> Node:
    return a * b


def matmul(a: Node, b) -> Node:
    return a @ b


def neg(a: Node) -> Node:
    return -a


def concat(nodes: Sequence[Node], axis: int = -1) -> Node:
    tape = nodes[0].tape
    return tape.apply("concat", *(nodes[0]._lift(n) for n in nodes), axis=axis)


def relu(a: Node) -> Node:
    return a.tape.apply("relu", a)


def leaky_relu(a: Node, slope: float = DEFAULT_LEAKY_SLOPE) -> Node:
    return a.tape.apply("leaky_relu", a, slope=slope)


def sigmoid(a: Node) -> Node:
    return a.tape.apply("sigmoid", a)


def softplus(a: Node) -> Node:
    return a.tape.apply("softplus", a)


def log(a: Node) -> Node:
    return a.tape.apply("log", a)


def exp(a: Node) -> Node:
    return a.tape.apply("exp", a)


def softmax(a: Node, axis: int = -1) -> Node:
    return a.tape.apply("softmax", a, axis=axis)


def broadcast(a: Node, shape: Sequence[int]) -> Node:
    return a.tape.apply("broadcast", a, shape=tuple(shape))


def take(a: Node, index: np.ndarray) -> Node:
    return a.tape.apply("take", a, index=np.asarray(index, dtype=np.int64))


def scatter_add(a: Node, index: np.ndarray, size: int) -> Node:
    return a.tape.apply(
        "scatter_add", a, index=np.asarray(index, dtype=np.int64), size=int(size)
    )


def detach(a: Node) -> Node:
    return a.tape.detach(a)
