"""Dense reverse-mode automatic differentiation over float64 numpy buffers.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure computing the parents' gradient contributions.  The graph is rebuilt
on every forward pass, so it doubles as a dynamic tape: node ids are handed out
in creation order, which means sorting reachable nodes by id is a valid
topological order and :meth:`Tensor.backward` simply walks it in reverse.
"""

from __future__ import annotations

import contextlib
import itertools
import logging
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, LabelError, NonFiniteError

logger = logging.getLogger(__name__)

_ids = itertools.count()
_DEBUG = False
_GRAD_ENABLED = True


def set_debug(flag: bool) -> None:
    """Enable NaN/Inf checks on every op output (off by default)."""
    global _DEBUG
    _DEBUG = bool(flag)


def is_debug() -> bool:
    return _DEBUG


@contextlib.contextmanager
def debug_mode(flag: bool = True):
    prev = _DEBUG
    set_debug(flag)
    try:
        yield
    finally:
        set_debug(prev)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording parents, e.g. for prequential evaluation."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A float64 array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = _op
        self._parents = _parents
        self._backward = None
        self._id = next(_ids)
        if _DEBUG and not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite value produced by op {_op or 'leaf'!r}")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'!r}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate d(self)/d(node) into ``.grad`` of every reachable node."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() on a tensor that does not require grad")
        order = _reachable(self)
        self.grad = np.ones_like(self.data) if self.grad is None else self.grad + 1.0
        for node in order:
            if node._backward is not None and node.grad is not None:
                node._backward()

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _reachable(root: Tensor) -> list:
    seen = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node._id in seen:
            continue
        seen[node._id] = node
        for p in node._parents:
            if p.requires_grad and p._id not in seen:
                stack.append(p)
    return [seen[k] for k in sorted(seen, reverse=True)]


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True).reshape(t.shape)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _make(data: np.ndarray, parents: tuple, op: str) -> Tensor:
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=track, _parents=parents if track else (), _op=op)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _make(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def _backward():
            _accum(a, _unbroadcast(out.grad, a.shape))
            _accum(b, _unbroadcast(out.grad, b.shape))
        out._backward = _backward
    return out


def neg(a: Tensor) -> Tensor:
    out = _make(-a.data, (a,), "neg")
    if out.requires_grad:
        out._backward = lambda: _accum(a, -out.grad)
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _make(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def _backward():
            if a.requires_grad:
                _accum(a, _unbroadcast(out.grad * b.data, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(out.grad * a.data, b.shape))
        out._backward = _backward
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product; gradients dA = dC B^T and dB = A^T dC."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = _make(a.data @ b.data, (a, b), "matmul")
    if out.requires_grad:
        def _backward():
            if a.requires_grad:
                _accum(a, out.grad @ b.data.T)
            if b.requires_grad:
                _accum(b, a.data.T @ out.grad)
        out._backward = _backward
    return out


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` with ``w`` stored input-major, i.e. the W^T x of column convention."""
    return add(matmul(x, w), b)


def tsum(a: Tensor, axis=None) -> Tensor:
    out = _make(np.sum(a.data, axis=axis), (a,), "sum")
    if out.requires_grad:
        def _backward():
            g = out.grad if axis is None else np.expand_dims(out.grad, axis)
            _accum(a, np.broadcast_to(g, a.shape))
        out._backward = _backward
    return out


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = _make(y, (a,), "tanh")
    if out.requires_grad:
        out._backward = lambda: _accum(a, (1.0 - y * y) * out.grad)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    out = _make(y, (a,), "sigmoid")
    if out.requires_grad:
        out._backward = lambda: _accum(a, y * (1.0 - y) * out.grad)
    return out


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis with max-subtraction."""
    a = _as_tensor(a)
    if a.shape[-1] < 1:
        raise DimensionError("softmax over an empty axis")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _make(y, (a,), "softmax")
    if out.requires_grad:
        def _backward():
            g = out.grad
            _accum(a, y * (g - (g * y).sum(axis=-1, keepdims=True)))
        out._backward = _backward
    return out


def log_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    out = _make(y, (a,), "log_softmax")
    if out.requires_grad:
        def _backward():
            g = out.grad
            _accum(a, g - np.exp(y) * g.sum(axis=-1, keepdims=True))
        out._backward = _backward
    return out


def batchnorm(a: Tensor, eps: float, mean: np.ndarray | None = None, var: np.ndarray | None = None) -> Tensor:
    """Per-column ``(x - mu) / sqrt(var + eps)``.

    Without ``mean``/``var`` the biased mini-batch statistics are used and the
    backward pass differentiates through them.  With them (inference mode)
    the op is a fixed affine map.
    """
    if eps <= 0:
        raise ContractError(f"batchnorm eps must be positive, got {eps}")
    x = a.data
    if x.ndim != 2 or x.shape[0] < 1:
        raise DimensionError(f"batchnorm expects a non-empty B x d matrix, got {x.shape}")
    if mean is not None:
        inv = 1.0 / np.sqrt(np.asarray(var) + eps)
        out = _make((x - mean) * inv, (a,), "batchnorm_fixed")
        if out.requires_grad:
            out._backward = lambda: _accum(a, out.grad * inv)
        return out
    mu = x.mean(axis=0)
    xc = x - mu
    v = (xc * xc).mean(axis=0)
    inv = 1.0 / np.sqrt(v + eps)
    xhat = xc * inv
    out = _make(xhat, (a,), "batchnorm")
    if out.requires_grad:
        def _backward():
            g = out.grad
            gx = inv * (g - g.mean(axis=0) - xhat * (g * xhat).mean(axis=0))
            _accum(a, gx)
        out._backward = _backward
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = _make(a.data.reshape(shape), (a,), "reshape")
    if out.requires_grad:
        out._backward = lambda: _accum(a, out.grad.reshape(a.shape))
    return out


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat")
    if out.requires_grad:
        bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

        def _backward():
            for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
                if t.requires_grad:
                    idx = [slice(None)] * out.grad.ndim
                    idx[axis] = slice(lo, hi)
                    _accum(t, out.grad[tuple(idx)])
        out._backward = _backward
    return out


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Rows ``table[ids]``; the backward pass scatters only into touched rows."""
    ids = np.asarray(ids, dtype=np.int64)
    out = _make(table.data[ids], (table,), "gather")
    if out.requires_grad:
        def _backward():
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids, out.grad)
        out._backward = _backward
    return out


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    out = _make(a.data[:, start:stop], (a,), "slice")
    if out.requires_grad:
        def _backward():
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[:, start:stop] += out.grad
        out._backward = _backward
    return out


def mse(pred: Tensor, label) -> Tensor:
    label = np.asarray(label, dtype=np.float64)
    if pred.data.size != label.size:
        raise DimensionError(f"mse shape mismatch: {pred.shape} vs {label.shape}")
    diff = pred - Tensor(label.reshape(pred.shape))
    return tmean(diff * diff)


def cross_entropy(logits: Tensor, classes) -> Tensor:
    """Mean negative log-likelihood of integer ``classes`` under softmax(logits)."""
    classes = np.asarray(classes, dtype=np.int64)
    if logits.data.ndim != 2 or classes.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy shape mismatch: logits {logits.shape}, classes {classes.shape}")
    n_cls = logits.shape[1]
    if classes.size and (classes.min() < 0 or classes.max() >= n_cls):
        bad = classes[(classes < 0) | (classes >= n_cls)][0]
        raise LabelError(f"class index {bad} outside [0, {n_cls})")
    logp = log_softmax(logits)
    onehot = np.zeros_like(logits.data)
    onehot[np.arange(len(classes)), classes] = 1.0
    return neg(tmean(tsum(logp * Tensor(onehot), axis=1)))


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def sgd_step(params: Iterable[Tensor], lr: float) -> None:
    """``p <- p - lr * grad`` in place, then zero the gradient buffers."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ContractError(f"sgd_step: parameter {p!r} has no gradient")
    for p in params:
        p.data -= lr * p.grad
        p.grad.fill(0.0)
