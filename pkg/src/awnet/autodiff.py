"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive executed on a tensor that requires grad appends a node to an
implicit tape. Nodes carry a global sequence number, so the graph reachable
from a loss can be replayed in exact reverse execution order.

Conventions:

* convolution is cross-correlation (no kernel flip);
* batch-norm uses the population (biased) variance of the batch, eps 1e-5
  and running-stat momentum 0.1;
* ``backward`` accumulates into ``.grad`` of leaf tensors, so calling it twice
  without :meth:`Tensor.zero_grad` sums the two gradients.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_counter = itertools.count()
_state = threading.local()


class NonFiniteError(FloatingPointError):
    """A forward operation produced NaN or Inf."""


class ShapeError(ValueError):
    pass


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    __slots__ = ("seq", "op", "inputs", "out_id", "backward")

    def __init__(self, op: str, inputs: tuple, out_id: int, backward: Callable):
        self.seq = next(_counter)
        self.op = op
        self.inputs = inputs
        self.out_id = out_id
        self.backward = backward

    def __repr__(self) -> str:
        return f"Node({self.seq}, {self.op})"


class Tensor:
    __array_priority__ = 100
    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64, order="C")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: Node | None = None

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
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error()

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def abs(self):
        return abs_(self)


def _scalar_error():
    raise ValueError("item() requires a single-element tensor")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: tuple, backward: Callable, op: str) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data, out.requires_grad, out.grad, out._node = data, False, None, None
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, inputs, id(out), backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# graph replay


@dataclass
class Graph:
    """Primitive operations reachable from a loss, in execution order."""

    nodes: list[Node] = field(default_factory=list)

    @classmethod
    def trace(cls, loss: Tensor) -> "Graph":
        seen: dict[int, Node] = {}
        stack = [loss._node] if loss._node is not None else []
        while stack:
            node = stack.pop()
            if node.seq in seen:
                continue
            seen[node.seq] = node
            for t in node.inputs:
                if t._node is not None and t._node.seq not in seen:
                    stack.append(t._node)
        return cls(sorted(seen.values(), key=lambda n: n.seq))

    def __len__(self) -> int:
        return len(self.nodes)


def _check_scalar(loss: Tensor) -> None:
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")


def backward(loss: Tensor, graph: Graph | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaves that require grad but are unreachable from ``loss`` are left
    untouched; :func:`grad` reports them as zeros.
    """
    _check_scalar(loss)
    if graph is None:
        graph = Graph.trace(loss)
    seed = np.ones_like(loss.data)
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    adj: dict[int, np.ndarray] = {id(loss): seed}
    for node in reversed(graph.nodes):
        g = adj.pop(node.out_id, None)
        if g is None:
            continue
        needs = tuple(t.requires_grad for t in node.inputs)
        grads = node.backward(g, needs)
        for t, gi in zip(node.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            if t._node is None:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            else:
                k = id(t)
                adj[k] = gi if k not in adj else adj[k] + gi


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` w.r.t. ``wrt`` without touching ``.grad``.

    Only nodes on a path from ``wrt`` to ``loss`` are replayed.
    """
    _check_scalar(loss)
    graph = Graph.trace(loss)
    targets = {id(t) for t in wrt}
    live = set(targets)
    live_nodes = []
    for node in graph.nodes:
        if any(id(t) in live for t in node.inputs):
            live.add(node.out_id)
            live_nodes.append(node)
    adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(live_nodes):
        g = adj.get(node.out_id) if node.out_id in targets else adj.pop(node.out_id, None)
        if g is None:
            continue
        needs = tuple(id(t) in live for t in node.inputs)
        grads = node.backward(g, needs)
        for t, gi, need in zip(node.inputs, grads, needs):
            if need and gi is not None:
                k = id(t)
                adj[k] = gi if k not in adj else adj[k] + gi
    return [adj.get(id(t), np.zeros_like(t.data)) for t in wrt]


def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValueError("step size must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    out = np.zeros_like(base)
    flat = base.reshape(-1)

    def value(arr):
        with no_grad():
            v = f(Tensor(arr))
        v = v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)
        if v.size != 1:
            raise ValueError(f"finite_diff_grad needs a scalar function, got shape {v.shape}")
        return float(v.reshape(-1)[0])

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = value(base)
        flat[i] = orig - h
        fm = value(base)
        flat[i] = orig
        out.reshape(-1)[i] = (fp - fm) / (2 * h)
    return Tensor(out)


# ---------------------------------------------------------------------------
# elementwise and reduction primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g, needs):
        return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None)

    return _result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g, needs):
        return (_unbroadcast(g / b.data, a.shape) if needs[0] else None,
                _unbroadcast(-g * a.data / b.data**2, b.shape) if needs[1] else None)

    with np.errstate(all="ignore"):  # non-finite results raise in _result
        out = a.data / b.data
    return _result(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g, needs: (-g,), "neg")


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)

    def bw(g, needs):
        return (g * p * a.data ** (p - 1),)

    with np.errstate(all="ignore"):
        out = a.data**p
    return _result(out, (a,), bw, "pow")


def exp(a: Tensor) -> Tensor:
    with np.errstate(all="ignore"):
        out = np.exp(a.data)
    return _result(out, (a,), lambda g, needs: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(all="ignore"):
        out = np.log(a.data)
    return _result(out, (a,), lambda g, needs: (g / a.data,), "log")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g, needs: (g * (1.0 - out**2),), "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g, needs: (g * mask,), "relu")


def abs_(a: Tensor) -> Tensor:
    s = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g, needs: (g * s,), "abs")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} @ {b.shape}")

    def bw(g, needs):
        return (g @ b.data.T if needs[0] else None, a.data.T @ g if needs[1] else None)

    return _result(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape (N, in) and weight (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g, needs):
        grads = [g @ weight.data if needs[0] else None,
                 g.T @ x.data if needs[1] else None]
        if bias is not None:
            grads.append(g.sum(axis=0) if needs[2] else None)
        return tuple(grads)

    return _result(out, inputs, bw, "linear")


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g, needs):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g, needs):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _result(out, (a,), bw, "mean")


def max_(a: Tensor, axis: int = -1) -> Tensor:
    """Maximum along one axis; the gradient goes to the first maximiser."""
    axis = axis % a.ndim
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis).squeeze(axis)

    def bw(g, needs):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        return (full,)

    return _result(out, (a,), bw, "max")


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g, needs: (g.reshape(a.shape),), "reshape")


def take(a: Tensor, index) -> Tensor:
    """Rows of ``a`` selected by an integer index array (axis 0)."""
    index = np.asarray(index, dtype=np.int64)

    def bw(g, needs):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], (a,), bw, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g, needs):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) if needs[i] else None
            for i in range(len(tensors))
        )

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g, needs):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (a,), bw, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def bw(g, needs):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), bw, "log_softmax")


# ---------------------------------------------------------------------------
# image primitives


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"conv2d: (size {size} + 2*{padding} - kernel {k}) is not divisible by stride {stride}"
        )
    return span // stride + 1


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of (N,Cin,H,W) input with a (Cout,Cin,k,k) kernel."""
    if stride < 1 or padding < 0:
        raise ValueError("stride must be positive and padding non-negative")
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, k, k2 = kernel.shape
    if kcin != cin or k != k2:
        raise ShapeError(f"conv2d: input channels {cin} vs kernel {kernel.shape}")
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(cols[:, :, :ho, :wo].transpose(0, 2, 3, 1, 4, 5))
    flat = cols.reshape(n * ho * wo, cin * k * k)
    out = (flat @ kernel.data.reshape(cout, -1).T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def bw(g, needs):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        dk = (gm.T @ flat).reshape(kernel.shape) if needs[1] else None
        dx = None
        if needs[0]:
            dcols = (gm @ kernel.data.reshape(cout, -1)).reshape(n, ho, wo, cin, k, k)
            dxp = np.zeros(xp.shape)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        return dx, dk

    return _result(out, (x, kernel), bw, "conv2d")


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping average pooling; spatial dims must divide by ``size``."""
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"avg_pool2d: {h}x{w} not divisible by {size}")
    out = x.data.reshape(n, c, h // size, size, w // size, size).mean(axis=(3, 5))

    def bw(g, needs):
        up = np.repeat(np.repeat(g, size, axis=2), size, axis=3)
        return (up / (size * size),)

    return _result(out, (x,), bw, "avg_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """(N,C,H,W) -> (N,C) spatial mean."""
    n, c, h, w = x.shape

    def bw(g, needs):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return _result(x.data.mean(axis=(2, 3)), (x,), bw, "global_avg_pool")


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int) -> "RunningStats":
        return cls(np.zeros(channels), np.ones(channels))

    def copy(self) -> "RunningStats":
        return RunningStats(self.mean.copy(), self.var.copy())


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta_shift: Tensor,
    stats: RunningStats,
    mode: str = "train",
    update_stats: bool = True,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    """Per-channel batch normalisation of an (N,C,H,W) tensor.

    ``mode="train"`` normalises with the biased batch statistics and, when
    ``update_stats`` is set, moves ``stats`` by an exponential moving average
    (the same biased variance feeds the running estimate).
    ``mode="eval"`` normalises with ``stats``.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm expects (N,C,H,W), got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta_shift.shape != (c,):
        raise ShapeError(f"batchnorm: affine params must have shape ({c},)")
    g4 = gamma.data[None, :, None, None]
    if mode == "train":
        m = n * h * w
        if m < 2:
            raise ValueError("batchnorm in train mode needs at least two values per channel")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if update_stats:
            stats.mean[:] = (1 - momentum) * stats.mean + momentum * mu
            stats.var[:] = (1 - momentum) * stats.var + momentum * var
    elif mode == "eval":
        m = None
        mu, var = stats.mean, stats.var
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * g4 + beta_shift.data[None, :, None, None]

    def bw(g, needs):
        dgamma = (g * xhat).sum(axis=(0, 2, 3)) if needs[1] else None
        dbeta = g.sum(axis=(0, 2, 3)) if needs[2] else None
        dx = None
        if needs[0]:
            dxhat = g * g4
            if m is None:
                dx = dxhat * inv[None, :, None, None]
            else:
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                dx = (inv[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
        return dx, dgamma, dbeta

    return _result(out, (x, gamma, beta_shift), bw, f"batchnorm[{mode}]")


# ---------------------------------------------------------------------------
# composite helpers


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    per = -(log_softmax(logits, axis=1) * onehot).sum(axis=1)
    return per.mean() if reduction == "mean" else per


def kl_div(p_logits: Tensor, q_logits: Tensor, reduction: str = "mean") -> Tensor:
    """KL(softmax(p_logits) || softmax(q_logits)) per row."""
    logp = log_softmax(p_logits, axis=1)
    logq = log_softmax(q_logits, axis=1)
    per = (exp(logp) * (logp - logq)).sum(axis=1)
    return per.mean() if reduction == "mean" else per
