"""Reverse-mode autodiff over numpy arrays.

A Tensor wraps an ndarray; ops build a DAG by recording parents plus a
closure that routes the output gradient back to them. Gradients are
accumulated with `backward()` on a scalar. Nodes whose inputs do not
require grad are pruned at creation, so inference builds no graph.

Default dtype is float64 (finite-difference checks need it); call
set_default_dtype(np.float32) for training speed. Ops are pure functions
of their inputs; tensors must not be mutated while shared across threads.
"""

from __future__ import annotations

import contextlib

import numpy as np

from ..errors import DimensionError

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _DEFAULT_DTYPE = dtype


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (sampling, evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_array(data) -> np.ndarray:
    if isinstance(data, np.ndarray):
        return data.astype(_DEFAULT_DTYPE, copy=False)
    return np.asarray(data, dtype=_DEFAULT_DTYPE)


class Tensor:
    """Array plus optional gradient and backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes or None)


class Parameter(Tensor):
    """Trainable tensor; Module discovers these by type."""

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


def _toposort(root: Tensor) -> list[Tensor]:
    # iterative DFS: decoder graphs chain across hundreds of steps
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    needs = _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not (t.requires_grad or t._parents):
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _node(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data - b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _node(out_data, (a, b), backward)


def neg(a) -> Tensor:
    a = _wrap(a)
    return _node(-a.data, (a,), lambda g: _accum(a, -g))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data / b.data

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(out_data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul inner axes disagree: lhs axis 1 is {a.shape[1]}, rhs axis 0 is {b.shape[0]}"
        )
    out_data = a.data @ b.data

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _node(out_data, (a, b), backward)


def tanh(a) -> Tensor:
    a = _wrap(a)
    y = np.tanh(a.data)
    return _node(y, (a,), lambda g: _accum(a, g * (1.0 - y * y)))


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    y = 1.0 / (1.0 + np.exp(-a.data))
    return _node(y, (a,), lambda g: _accum(a, g * y * (1.0 - y)))


def relu(a) -> Tensor:
    a = _wrap(a)
    y = np.maximum(a.data, 0.0)
    return _node(y, (a,), lambda g: _accum(a, g * (a.data > 0)))


def elu(a) -> Tensor:
    a = _wrap(a)
    ex = np.exp(np.minimum(a.data, 0.0))
    y = np.where(a.data > 0, a.data, ex - 1.0)

    def backward(g):
        _accum(a, g * np.where(a.data > 0, 1.0, ex))

    return _node(y, (a,), backward)


def exp(a) -> Tensor:
    a = _wrap(a)
    y = np.exp(a.data)
    return _node(y, (a,), lambda g: _accum(a, g * y))


def log(a) -> Tensor:
    a = _wrap(a)
    return _node(np.log(a.data), (a,), lambda g: _accum(a, g / a.data))


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape).copy())

    return _node(out_data, (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    out_data = a.data.reshape(shape)
    return _node(out_data, (a,), lambda g: _accum(a, g.reshape(a.data.shape)))


def transpose(a, axes=None) -> Tensor:
    a = _wrap(a)
    out_data = a.data.transpose(axes)
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        _accum(a, g.transpose(inv))

    return _node(out_data, (a,), backward)


def getitem(a, key) -> Tensor:
    a = _wrap(a)
    out_data = a.data[key]

    def backward(g):
        if not (a.requires_grad or a._parents):
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[key] += g

    out = _node(np.ascontiguousarray(out_data), (a,), backward)
    return out


def concat(tensors, axis=0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _node(out_data, tuple(ts), backward)


def repeat(a, k: int, axis: int) -> Tensor:
    """np.repeat with a constant count (nearest-neighbor upsampling)."""
    a = _wrap(a)
    out_data = np.repeat(a.data, k, axis=axis)
    n = a.data.shape[axis]

    def backward(g):
        shape = list(a.data.shape)
        shape[axis : axis + 1] = [n, k]
        _accum(a, g.reshape(shape).sum(axis=axis + 1))

    return _node(out_data, (a,), backward)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: table (V, D), ids int array (n,) -> (n, D)."""
    table = _wrap(table)
    idx = np.asarray(ids, dtype=np.intp)
    out_data = table.data[idx]

    def backward(g):
        if not (table.requires_grad or table._parents):
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, idx, g)

    return _node(out_data, (table,), backward)


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data)


def straight_through(a: Tensor, values: np.ndarray) -> Tensor:
    """Forward takes `values` verbatim; backward passes the gradient to `a` unchanged."""
    a = _wrap(a)
    if values.shape != a.data.shape:
        raise DimensionError(
            f"straight_through value shape {values.shape} != input shape {a.data.shape}"
        )
    return _node(values.astype(a.data.dtype, copy=True), (a,), lambda g: _accum(a, g))


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; call only in training mode."""
    a = _wrap(a)
    keep = (rng.random(a.data.shape) >= p).astype(a.data.dtype) / (1.0 - p)
    return mul(a, Tensor(keep))


# ---------------------------------------------------------------------------
# fused softmax family
# ---------------------------------------------------------------------------


def softmax(a, axis=-1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, y * (g - dot))

    return _node(y, (a,), backward)


def log_softmax(a, axis=-1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse

    def backward(g):
        p = np.exp(out_data)
        _accum(a, g - p * g.sum(axis=axis, keepdims=True))

    return _node(out_data, (a,), backward)


def cross_entropy(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Mean (or sum) NLL of integer `targets` under softmax(logits). logits (N, V)."""
    logits = _wrap(logits)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects (N, V) logits, got {logits.shape}")
    idx = np.asarray(targets, dtype=np.intp)
    n, v = logits.shape
    if idx.min() < 0 or idx.max() >= v:
        raise IndexError(f"target id out of range [0, {v})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    nll = -logp[np.arange(n), idx]
    scale = 1.0 / n if reduction == "mean" else 1.0
    out_data = np.asarray(nll.sum() * scale, dtype=logits.dtype)

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), idx] -= 1.0
        _accum(logits, g * scale * p)

    return _node(out_data, (logits,), backward)


def softmax_xent(logits: Tensor, target: int) -> Tensor:
    """-log softmax(logits)[target] for a single logit vector (V,)."""
    logits = _wrap(logits)
    if logits.ndim != 1:
        raise DimensionError(f"softmax_xent expects a 1-D logit vector, got {logits.shape}")
    if not 0 <= int(target) < logits.shape[0]:
        raise IndexError(f"target {target} out of range [0, {logits.shape[0]})")
    return cross_entropy(reshape(logits, (1, -1)), [int(target)], reduction="sum")
