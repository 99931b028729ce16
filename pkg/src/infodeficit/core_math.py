"""Dense float64 tensors with a reverse-mode tape, losses and Adam.

Operations record themselves on the active :class:`Tape` when at least one
input requires a gradient.  Outside a tape everything runs as plain numpy,
which is what evaluation uses.

    with Tape() as tape:
        loss = bce_loss(softmax(matmul(x, w)), labels)
    tape.backward(loss)
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

BCE_EPS = 1e-7


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.array(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, values: np.ndarray, requires_grad: bool) -> "Tensor":
        # skips the defensive copy for freshly computed arrays
        t = cls.__new__(cls)
        t.values = values
        t.grad = None
        t.requires_grad = requires_grad
        t.name = None
        return t

    @classmethod
    def zeros(cls, *shape: int) -> "Tensor":
        return cls._wrap(np.zeros(shape), False)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# tape


class RowGrad:
    """Gradient that is nonzero only on some rows of its input.

    ``rows`` is a slice or an integer index array (duplicates accumulate).
    """

    __slots__ = ("rows", "values")

    def __init__(self, rows, values: np.ndarray):
        self.rows = rows
        self.values = values

    def add_into(self, grad: np.ndarray) -> None:
        if isinstance(self.rows, slice):
            grad[self.rows] += self.values
        else:
            np.add.at(grad, self.rows, self.values)


@dataclass
class _Node:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended as operations execute, so the list is already in
    topological order; :meth:`backward` walks it once in reverse.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def record(self, output: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        self.nodes.append(_Node(output, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


_local = threading.local()


def _stack() -> list[Tape]:
    s = getattr(_local, "stack", None)
    if s is None:
        s = _local.stack = []
    return s


def active_tape() -> Tape | None:
    s = _stack()
    return s[-1] if s else None


def _result(values: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(values, needs)
    if needs:
        tape.record(out, inputs, backward)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` on every tensor reachable from ``loss`` on ``tape``.

    Leaf gradients accumulate, so call ``zero_grad`` between steps.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    loss.grad = np.ones_like(loss.values)
    for node in reversed(tape.nodes):
        g = node.output.grad
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if isinstance(gi, RowGrad):
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.values)
                gi.add_into(inp.grad)
            elif inp.grad is None:
                inp.grad = np.array(gi, dtype=np.float64)
            else:
                inp.grad += gi


# --------------------------------------------------------------------------
# operations


def _same_shape(opname: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{opname}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} x {b.shape}")
    av, bv = a.values, b.values

    def bw(g):
        return (g @ bv.T if a.requires_grad else None, av.T @ g if b.requires_grad else None)

    return _result(av @ bv, (a, b), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result(a.values + b.values, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _result(a.values - b.values, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    av, bv = a.values, b.values
    return _result(av * bv, (a, b), lambda g: (g * bv, g * av))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


def one_minus(x: Tensor) -> Tensor:
    return _result(1.0 - x.values, (x,), lambda g: (-g,))


def record(values: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap a custom differentiable operation computed outside this module.

    ``backward(g)`` returns one gradient (array, :class:`RowGrad` or None)
    per input.
    """
    return _result(values, tuple(inputs), backward)


def scale(x: Tensor, c: float) -> Tensor:
    return _result(x.values * c, (x,), lambda g: (g * c,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only: no overflow, full precision near 0
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.values)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.values)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


def _softmax(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted."""
    y = _softmax(x.values)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), bw)


_ACTIVATIONS = {"sigmoid": sigmoid, "tanh": tanh, "softmax": softmax}


def activation(op: str, x: Tensor) -> Tensor:
    try:
        fn = _ACTIVATIONS[op]
    except KeyError:
        raise ValueError(f"unknown activation {op!r}") from None
    return fn(x)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty tensor list")
    ndim = tensors[0].values.ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.values.ndim != ndim or any(
            t.shape[d] != tensors[0].shape[d] for d in range(ndim) if d != ax
        ):
            raise ShapeError(
                f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}"
            )
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return np.split(g, bounds, axis=ax)

    return _result(np.concatenate([t.values for t in tensors], axis=ax), tuple(tensors), bw)


def transpose(x: Tensor) -> Tensor:
    if x.values.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got shape {x.shape}")
    return _result(x.values.T, (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _result(x.values.reshape(shape), (x,), lambda g: (g.reshape(old),))


def take_rows(table: Tensor, idx) -> Tensor:
    """Gather rows of a matrix (embedding lookup, repetition, reordering).

    Backward scatter-adds into the table, so repeated indices accumulate.
    """
    idx = np.asarray(idx, dtype=np.int64)
    if table.values.ndim != 2:
        raise ShapeError(f"take_rows needs a matrix, got shape {table.shape}")
    return _result(table.values[idx], (table,), lambda g: (RowGrad(idx, g),))


def row_slice(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous block of rows ``x[start:stop]``."""
    sl = slice(start, stop)
    return _result(x.values[sl], (x,), lambda g: (RowGrad(sl, g),))


def repeat_rows(x: Tensor, n: int) -> Tensor:
    """Stack ``n`` copies of a vector (or 1-row matrix) into an ``n x d`` matrix."""
    if x.values.ndim == 1:
        x = reshape(x, (1, x.shape[0]))
    if x.shape[0] != 1:
        raise ShapeError(f"repeat_rows needs a single row, got shape {x.shape}")
    return take_rows(x, np.zeros(n, dtype=np.int64))


def blend(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """``mask*a + (1-mask)*b`` with a constant 0/1 mask."""
    _same_shape("blend", a, b)
    m = np.broadcast_to(np.asarray(mask, dtype=np.float64), a.shape)
    return _result(m * a.values + (1.0 - m) * b.values, (a, b), lambda g: (g * m, g * (1.0 - m)))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.array(x.values.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _result(np.array(x.values.mean()), (x,), lambda g: (np.full(shape, float(g) / n),))


# --------------------------------------------------------------------------
# losses


def bce_loss(pred: Tensor, target, eps: float = BCE_EPS) -> Tensor:
    """Mean binary cross-entropy.

    ``pred`` is either a vector of positive-class probabilities or an
    ``N x 2`` matrix of (negative, positive) distributions.  Probabilities
    are clamped to ``[eps, 1-eps]`` before the log; clamped entries get no
    gradient.
    """
    t = np.asarray(target, dtype=np.float64).reshape(-1)
    p = pred.values
    if p.ndim == 2 and p.shape[1] == 2:
        if p.shape[0] != t.size:
            raise ShapeError(f"bce_loss: {p.shape[0]} predictions vs {t.size} targets")
        n = t.size
        cols = np.clip(p, eps, 1.0 - eps)
        loss = -(t * np.log(cols[:, 1]) + (1.0 - t) * np.log(cols[:, 0])).mean()
        live = (p > eps) & (p < 1.0 - eps)

        def bw(g):
            d = np.zeros_like(p)
            d[:, 1] = -t / cols[:, 1]
            d[:, 0] = -(1.0 - t) / cols[:, 0]
            return (d * live * (float(g) / n),)

        return _result(np.array(loss), (pred,), bw)

    flat = p.reshape(-1)
    if flat.size != t.size:
        raise ShapeError(f"bce_loss: {flat.size} predictions vs {t.size} targets")
    n = t.size
    c = np.clip(flat, eps, 1.0 - eps)
    loss = -(t * np.log(c) + (1.0 - t) * np.log(1.0 - c)).mean()
    live = (flat > eps) & (flat < 1.0 - eps)
    shape = p.shape

    def bw1(g):
        d = (-t / c + (1.0 - t) / (1.0 - c)) * live * (float(g) / n)
        return (d.reshape(shape),)

    return _result(np.array(loss), (pred,), bw1)


def mae_loss(pred: Tensor, target, weights=None) -> Tensor:
    """Mean absolute error; the subgradient at ``pred == target`` is 0.

    Optional per-item ``weights`` give a weighted mean.
    """
    t = np.asarray(target, dtype=np.float64).reshape(-1)
    flat = pred.values.reshape(-1)
    if flat.size != t.size:
        raise ShapeError(f"mae_loss: {flat.size} predictions vs {t.size} targets")
    w = np.ones_like(t) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.size != t.size:
        raise ShapeError(f"mae_loss: {w.size} weights vs {t.size} targets")
    w = w / w.sum()
    shape = pred.shape
    diff = flat - t
    return _result(
        np.array((w * np.abs(diff)).sum()),
        (pred,),
        lambda g: ((np.sign(diff) * w * float(g)).reshape(shape),),
    )


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, Tensor],
    state: AdamState,
    frozen_rows: Mapping[str, Iterable[int]] | None = None,
) -> None:
    """One bias-corrected Adam update, in place; grads are zeroed afterwards.

    Rows listed in ``frozen_rows`` (e.g. padding embeddings) never move.
    """
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"adam_step: parameter {name!r} has no gradient")
    frozen_rows = frozen_rows or {}
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = p.grad
        rows = list(frozen_rows.get(name, ()))
        if rows:
            g = g.copy()
            g[rows] = 0.0
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.values)
            state.v[name] = np.zeros_like(p.values)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.values -= state.alpha * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        p.grad = np.zeros_like(p.values)
