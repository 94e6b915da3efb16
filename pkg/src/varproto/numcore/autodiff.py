"""Array-level reverse-mode differentiation on an explicit tape.

Values are float64 numpy arrays. A :class:`Tape` owns an append-only list of
nodes; every op that receives at least one :class:`Tensor` appends a node
holding its output value and a closure mapping the output gradient to input
gradients. Ops called on plain arrays compute values only.

>>> tape = Tape()
>>> x = tape.leaf(np.array(3.0))
>>> y = x * x
>>> tape.backward(y)[x.id]
array(6.)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .. import kernels
from ..errors import UsageError

LOG_CLAMP = 1e-12

Backward = Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    backward: Backward | None = None


@dataclass
class Tape:
    """Single-owner record of a computation, in topological order."""

    nodes: list[Node] = field(default_factory=list)
    grads: list[np.ndarray | None] = field(default_factory=list)

    def leaf(self, value, name: str = "leaf") -> "Tensor":
        value = np.array(value, dtype=np.float64)
        self.nodes.append(Node(name, (), value))
        return Tensor(self, len(self.nodes) - 1, value)

    def record(self, op: str, inputs: Sequence, value: np.ndarray, backward: Backward) -> "Tensor":
        ids = tuple(x.id if isinstance(x, Tensor) else -1 for x in inputs)
        self.nodes.append(Node(op, ids, value, backward))
        return Tensor(self, len(self.nodes) - 1, value)

    def backward(self, output: "Tensor") -> list[np.ndarray | None]:
        """Fill ``self.grads`` with d(output)/d(node) for every node up to output."""
        if output.tape is not self:
            raise UsageError("output tensor belongs to a different tape")
        if output.value.size != 1:
            raise UsageError(f"backward needs a scalar output, got shape {output.value.shape}")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[output.id] = np.ones_like(output.value)
        for i in range(output.id, -1, -1):
            node = self.nodes[i]
            g = grads[i]
            if g is None or node.backward is None:
                continue
            for src, gin in zip(node.inputs, node.backward(g)):
                if src < 0 or gin is None:
                    continue
                grads[src] = gin if grads[src] is None else grads[src] + gin
        self.grads = grads
        return grads

    def grad(self, t: "Tensor") -> np.ndarray:
        g = self.grads[t.id] if t.id < len(self.grads) else None
        return np.zeros_like(t.value) if g is None else g


class Tensor:
    __slots__ = ("tape", "id", "value")
    __array_priority__ = 100

    def __init__(self, tape: Tape, id: int, value: np.ndarray):
        self.tape = tape
        self.id = id
        self.value = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Tensor(id={self.id}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def _val(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    return None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b):
    av, bv = _val(a), _val(b)
    out = av + bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return tape.record("add", (a, b), out, lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = _val(a), _val(b)
    out = av - bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return tape.record("sub", (a, b), out, lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def mul(a, b):
    av, bv = _val(a), _val(b)
    out = av * bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return tape.record("mul", (a, b), out, lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def square(x):
    xv = _val(x)
    out = xv * xv
    if not isinstance(x, Tensor):
        return out
    return x.tape.record("square", (x,), out, lambda g: (2.0 * xv * g,))


def matmul(a, b):
    av, bv = _val(a), _val(b)
    if av.ndim != 2 or bv.ndim not in (1, 2) or av.shape[1] != bv.shape[0]:
        raise UsageError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
    out = av @ bv
    tape = _tape_of(a, b)
    if tape is None:
        return out

    def back(g):
        if bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return g @ bv.T, av.T @ g

    return tape.record("matmul", (a, b), out, back)


def relu(x):
    xv = _val(x)
    out = np.maximum(xv, 0.0)
    if not isinstance(x, Tensor):
        return out
    mask = xv > 0.0  # subgradient 0 at the kink
    return x.tape.record("relu", (x,), out, lambda g: (g * mask,))


def sum(x, axis=None, keepdims: bool = False):
    xv = _val(x)
    out = np.asarray(xv.sum(axis=axis, keepdims=keepdims))
    if not isinstance(x, Tensor):
        return out

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xv.shape).copy(),)

    return x.tape.record("sum", (x,), out, back)


def mean(x, axis=None, keepdims: bool = False):
    xv = _val(x)
    n = xv.size if axis is None else xv.shape[axis]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape):
    xv = _val(x)
    out = xv.reshape(shape)
    if not isinstance(x, Tensor):
        return out
    return x.tape.record("reshape", (x,), out, lambda g: (g.reshape(xv.shape),))


def l2norm(x, axis: int = -1):
    """Euclidean norm along ``axis``; gradient taken as 0 where the norm is 0."""
    xv = _val(x)
    out = np.sqrt((xv * xv).sum(axis=axis))
    if not isinstance(x, Tensor):
        return out

    def back(g):
        nrm = np.expand_dims(out, axis)
        scale = np.divide(np.expand_dims(g, axis), nrm, out=np.zeros_like(nrm), where=nrm > 0)
        return (xv * scale,)

    return x.tape.record("l2norm", (x,), out, back)


def softmax(logits, axis: int = -1):
    """Max-shifted softmax along ``axis``."""
    lv = _val(logits)
    if lv.size == 0:
        raise UsageError("softmax of an empty vector")
    z = np.exp(lv - lv.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)
    if not isinstance(logits, Tensor):
        return out
    return logits.tape.record(
        "softmax", (logits,), out, lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    )


def cross_entropy(probs, target):
    """Negative log-probability of ``target``, clamped at LOG_CLAMP.

    ``probs`` may be one distribution with an integer target, or a matrix of
    row distributions with one target per row, in which case the mean over
    rows is returned.
    """
    pv = _val(probs)
    single = pv.ndim == 1
    p2 = pv[None, :] if single else pv
    t = np.atleast_1d(np.asarray(target))
    if t.shape[0] != p2.shape[0]:
        raise UsageError(f"{t.shape[0]} targets for {p2.shape[0]} distributions")
    if t.size and (t.min() < 0 or t.max() >= p2.shape[1]):
        raise UsageError(f"target index out of range for {p2.shape[1]} classes")
    rows = np.arange(p2.shape[0])
    picked = p2[rows, t]
    n = p2.shape[0]
    out = np.asarray(-np.log(np.maximum(picked, LOG_CLAMP)).sum() / n)
    if not isinstance(probs, Tensor):
        return out

    def back(g):
        gp = np.zeros_like(p2)
        live = picked > LOG_CLAMP
        gp[rows[live], t[live]] = -g / (n * picked[live])
        return (gp[0] if single else gp,)

    return probs.tape.record("cross_entropy", (probs,), out, back)


def dirac_sq(queries, means, variances):
    """Matrix of ||q_i - m_c||^2 + sum(variances_c) over queries i and classes c."""
    qv, mv, vv = _val(queries), _val(means), _val(variances)
    if qv.ndim != 2 or mv.ndim != 2 or qv.shape[1] != mv.shape[1] or vv.shape != mv.shape:
        raise UsageError(f"dirac_sq shape mismatch: {qv.shape}, {mv.shape}, {vv.shape}")
    out = kernels.dirac_sq(qv, mv, vv)
    tape = _tape_of(queries, means, variances)
    if tape is None:
        return out

    def back(g):
        rs, cs = g.sum(axis=1), g.sum(axis=0)
        gq = 2.0 * (rs[:, None] * qv - g @ mv)
        gm = -2.0 * (g.T @ qv - cs[:, None] * mv)
        gv = np.broadcast_to(cs[:, None], vv.shape).copy()
        return gq, gm, gv

    return tape.record("dirac_sq", (queries, means, variances), out, back)
