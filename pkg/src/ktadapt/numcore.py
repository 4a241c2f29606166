"""Tape-based reverse-mode automatic differentiation over float64 arrays.

Every differentiable primitive appends its output node to the active
:class:`Tape`.  :func:`backward` walks that tape once, in reverse recording
order, so a node's gradient is complete before it is propagated to its
parents.  Leaves (parameters) are never recorded; they only accumulate.

    >>> x = Value(3.0, requires_grad=True)
    >>> with Tape():
    ...     y = x * x
    ...     backward(y)
    >>> float(x.grad)
    6.0
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "ContractError",
    "NumericError",
    "Tape",
    "Value",
    "as_value",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "softmax",
    "concat",
    "stack",
    "take",
    "embedding",
    "reshape",
    "transpose",
    "sum_",
    "mean",
    "clip",
    "grad_check",
    "AdamState",
    "adam_step",
    "Adam",
    "zero_grad",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""


class ContractError(RuntimeError):
    """A documented precondition was violated."""


class NumericError(ArithmeticError):
    """A non-finite value showed up where a finite one is required."""


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of primitive outputs.

    Use as a context manager; primitives evaluated inside the ``with`` block
    are recorded when at least one operand requires a gradient.  Outside any
    tape, primitives only compute values.
    """

    def __init__(self) -> None:
        self.nodes: list[Value] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, v: "Value") -> None:
        v.node_id = len(self.nodes)
        v._tape = self
        self.nodes.append(v)

    def release(self) -> None:
        """Drop the recorded graph; nodes and tape point at each other."""
        for v in self.nodes:
            v._tape = None
            v._parents = ()
            v._backward = None
        self.nodes = []


def current_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


class Value:
    """A float64 array (0-d scalar or dense n-d) plus its gradient."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "name",
                 "_parents", "_backward", "_tape", "_owned")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.node_id: int | None = None
        self._parents: tuple[Value, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._tape: Tape | None = None
        # leaves own a zero-initialised buffer; interior nodes fill theirs lazily
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._owned = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Value(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; every operator maps to a recorded primitive
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __getitem__(self, idx): return take(self, idx)

    @property
    def T(self) -> "Value":
        return transpose(self)

    def reshape(self, *shape) -> "Value":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Value":
        return sum_(self, axis=axis, keepdims=keepdims)


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _accumulate(v: Value, g: np.ndarray) -> None:
    if not v.requires_grad:
        return
    if v.grad is None:
        v.grad = g
        v._owned = False
    elif v._owned:
        v.grad += g
    else:
        v.grad = v.grad + g
        v._owned = True


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _node(data: np.ndarray, parents: tuple[Value, ...], backward_fn) -> Value:
    tape = current_tape()
    out = Value.__new__(Value)
    out.data = data
    out.name = None
    out.node_id = None
    out._tape = None
    out._owned = False
    out.grad = None
    if tape is None or not any(p.requires_grad for p in parents):
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        return out
    out.requires_grad = True
    out._parents = parents
    out._backward = backward_fn
    tape.record(out)
    return out


def _broadcast_check(name: str, a: Value, b: Value) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- primitives

def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _broadcast_check("add", a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))
    return _node(a.data + b.data, (a, b), bw)


def sub(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _broadcast_check("sub", a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))
    return _node(a.data - b.data, (a, b), bw)


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _broadcast_check("mul", a, b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))
    return _node(a.data * b.data, (a, b), bw)


def neg(a) -> Value:
    a = as_value(a)
    return _node(-a.data, (a,), lambda g: _accumulate(a, -g))


def matmul(a, b) -> Value:
    """Batched matrix product; both operands need at least two axes."""
    a, b = as_value(a), as_value(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch shapes {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))
    return _node(out, (a, b), bw)


def tanh(a) -> Value:
    a = as_value(a)
    y = np.tanh(a.data)
    return _node(y, (a,), lambda g: _accumulate(a, g * (1.0 - y * y)))


def sigmoid(a) -> Value:
    a = as_value(a)
    # split by sign so exp never overflows
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _node(y, (a,), lambda g: _accumulate(a, g * y * (1.0 - y)))


def exp(a) -> Value:
    a = as_value(a)
    y = np.exp(a.data)
    return _node(y, (a,), lambda g: _accumulate(a, g * y))


def log(a) -> Value:
    a = as_value(a)
    x = a.data
    return _node(np.log(x), (a,), lambda g: _accumulate(a, g / x))


def softmax(a, axis: int = -1, mask: np.ndarray | None = None) -> Value:
    """Softmax along ``axis`` with max-subtraction.

    ``mask`` (boolean, broadcastable to ``a``) marks entries that take part;
    masked-out entries get probability exactly 0.  Every slice along ``axis``
    must keep at least one entry.
    """
    a = as_value(a)
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _accumulate(a, y * (g - (g * y).sum(axis=axis, keepdims=True)))
    return _node(y, (a,), bw)


def concat(values: Sequence, axis: int = -1) -> Value:
    vals = [as_value(v) for v in values]
    try:
        out = np.concatenate([v.data for v in vals], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[v.shape for v in vals]} do not conform on axis {axis}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [v.shape[ax] for v in vals])

    def bw(g):
        for v, lo, hi in zip(vals, bounds[:-1], bounds[1:]):
            if v.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                _accumulate(v, g[tuple(sl)])
    return _node(out, tuple(vals), bw)


def stack(values: Sequence, axis: int = 0) -> Value:
    vals = [as_value(v) for v in values]
    try:
        out = np.stack([v.data for v in vals], axis=axis)
    except ValueError:
        raise ShapeError(f"stack: shapes {[v.shape for v in vals]} differ") from None
    ax = axis % out.ndim

    def bw(g):
        for i, v in enumerate(vals):
            if v.requires_grad:
                _accumulate(v, np.take(g, i, axis=ax))
    return _node(out, tuple(vals), bw)


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def take(a, idx) -> Value:
    """``a[idx]`` for basic slices or integer-array indexing."""
    a = as_value(a)
    try:
        out = a.data[idx]
    except IndexError as err:
        raise IndexError(f"take: {err} for shape {a.shape}") from None
    fancy = _is_fancy(idx)

    def bw(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
            a._owned = True
        elif not a._owned:
            a.grad = a.grad.copy()
            a._owned = True
        if fancy:
            np.add.at(a.grad, idx, g)
        else:
            a.grad[idx] += g
    return _node(np.array(out, dtype=np.float64), (a,), bw)


def embedding(table, ids) -> Value:
    """Row lookup ``table[ids]``; ids of any shape give ``ids.shape + (dim,)``."""
    table = as_value(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: ids outside [0, {table.shape[0]})")
    return take(table, ids)


def reshape(a, shape) -> Value:
    a = as_value(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _node(out, (a,), lambda g: _accumulate(a, g.reshape(a.shape)))


def transpose(a, axes=None) -> Value:
    """Reverse axes, or permute by ``axes``; for batched use swap the last two."""
    a = as_value(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inv = np.argsort(axes)
    return _node(np.transpose(a.data, axes), (a,), lambda g: _accumulate(a, np.transpose(g, inv)))


def sum_(a, axis=None, keepdims: bool = False) -> Value:
    a = as_value(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape).copy())
    return _node(np.asarray(out, dtype=np.float64), (a,), bw)


def mean(a, axis=None) -> Value:
    a = as_value(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis), 1.0 / n)


def clip(a, lo: float, hi: float) -> Value:
    """Clamp to ``[lo, hi]``; the gradient passes only where unclamped."""
    a = as_value(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: _accumulate(a, g * inside))


# ------------------------------------------------------------------ backward

def backward(root: Value) -> None:
    """Fill ``grad`` of every node that ``root`` depends on.

    Leaf gradients accumulate across calls; clear them with :func:`zero_grad`
    (or let :func:`adam_step` do it).
    """
    if root.data.size != 1:
        raise ContractError(f"backward: root must be scalar, got shape {root.shape}")
    tape = root._tape
    if tape is None or root.node_id is None:
        raise ContractError("backward: root was not recorded on a tape")
    root.grad = np.ones_like(root.data)
    root._owned = True
    nodes = tape.nodes
    for i in range(root.node_id, -1, -1):
        node = nodes[i]
        if node.grad is not None:
            node._backward(node.grad)


def zero_grad(params: Iterable[Value]) -> None:
    for p in params:
        p.zero_grad()


def grad_check(f: Callable[[], Value | float], params: Sequence[Value], step: float = 1e-5) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    ``f`` takes no arguments and reads ``params`` by closure.  The relative
    error per entry is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if step <= 0:
        raise ContractError("grad_check: step must be positive")
    params = list(params)
    zero_grad(params)
    with Tape():
        out = as_value(f())
        if not np.all(np.isfinite(out.data)):
            raise NumericError("grad_check: f returned a non-finite value")
        if out.requires_grad:
            backward(out)
    analytic = [p.grad.copy() for p in params]
    zero_grad(params)

    def fval() -> float:
        v = float(np.asarray(as_value(f()).data))
        if not np.isfinite(v):
            raise NumericError("grad_check: f returned a non-finite value")
        return v

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = fval()
            flat[i] = orig - step
            down = fval()
            flat[i] = orig
            num = (up - down) / (2.0 * step)
            worst = max(worst, abs(gflat[i] - num) / max(1.0, abs(num)))
    return worst


# ----------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Value]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Value], lr: float, betas: tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8, state: AdamState | None = None) -> AdamState:
    """One bias-corrected Adam update, then zero the gradients."""
    if state is None:
        state = AdamState.for_params(params)
    if len(state.m) != len(params) or any(m.shape != p.shape for m, p in zip(state.m, params)):
        raise ShapeError("adam_step: optimizer state does not match parameter shapes")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.grad[...] = 0.0
    return state


@dataclass
class Adam:
    params: list[Value]
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    state: AdamState = field(init=False)

    def __post_init__(self) -> None:
        self.params = list(self.params)
        self.state = AdamState.for_params(self.params)

    def step(self) -> None:
        adam_step(self.params, self.lr, self.betas, self.eps, self.state)

    def zero_grad(self) -> None:
        zero_grad(self.params)
