"""Reverse-mode automatic differentiation over dense numpy arrays.

Tensors wrap numpy arrays. While a Tape is active, every op appends a node
holding a backward closure; creation order is a topological order, so the
backward pass is a single reversed sweep with additive gradient accumulation
across fan-out. Without an active tape, ops run forward-only and keep no
graph (used for rollout collection and evaluation).

Default precision is float32; a float64 mode exists for finite-difference
verification, where 32-bit round-off would mask real gradient bugs.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError

_DEFAULT_DTYPE = np.float32
_FINITE_CHECKS = True
_ACTIVE_TAPE: "Tape | None" = None


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError("only float32/float64 supported")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (e.g. precision('float64'))."""
    global _DEFAULT_DTYPE
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = old


def set_finite_checks(enabled: bool) -> None:
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


@contextlib.contextmanager
def finite_checks(enabled: bool):
    global _FINITE_CHECKS
    old = _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)
    try:
        yield
    finally:
        _FINITE_CHECKS = old


def _check_finite(data: np.ndarray, op: str) -> None:
    if _FINITE_CHECKS and not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by op '{op}'")


class Tensor:
    """A node in the computation graph (or a bare array when no tape is active)."""

    __slots__ = ("data", "grad", "_parents", "_bwd")

    def __init__(self, data: np.ndarray, parents: tuple = (), bwd: Callable | None = None):
        self.data = data
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._bwd = bwd

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __float__(self) -> float:
        return self.item()

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter:
    """A named, optionally trainable weight.

    Freezing (trainable=False) only stops optimizer updates; gradients still
    flow through frozen parameters to whatever feeds them.
    """

    __slots__ = ("name", "value", "grad", "trainable")

    def __init__(self, name: str, value: np.ndarray, trainable: bool = True):
        self.name = name
        self.value = np.asarray(value, dtype=default_dtype())
        self.grad = np.zeros_like(self.value)
        self.trainable = trainable

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def tensor(self) -> Tensor:
        """Leaf node for the current graph; registered on the active tape."""
        t = Tensor(self.value)
        if _ACTIVE_TAPE is not None:
            _ACTIVE_TAPE._register_leaf(self, t)
        return t

    def __repr__(self):
        flag = "" if self.trainable else ", frozen"
        return f"Parameter({self.name}, shape={self.value.shape}{flag})"


class Tape:
    """Ordered record of forward ops; backward is one reversed sweep."""

    def __init__(self):
        self._nodes: list[Tensor] = []
        self._leaves: list[tuple[Parameter, Tensor]] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ContractError("a Tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def _register_leaf(self, param: Parameter, t: Tensor) -> None:
        self._leaves.append((param, t))

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Backpropagate from a scalar loss.

        Returns this pass's gradient per reachable Parameter name and adds the
        same gradients into each Parameter.grad (frozen parameters included;
        multiple uses of one parameter are summed).
        """
        if loss.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            if node.grad is None or node._bwd is None:
                continue
            node._bwd(node.grad)
        by_id: dict[int, np.ndarray] = {}
        param_of: dict[int, Parameter] = {}
        for param, leaf in self._leaves:
            g = leaf.grad if leaf.grad is not None else np.zeros_like(param.value)
            g = np.asarray(g).reshape(param.value.shape)
            if id(param) in by_id:
                by_id[id(param)] = by_id[id(param)] + g
            else:
                by_id[id(param)] = g
                param_of[id(param)] = param
        grads: dict[str, np.ndarray] = {}
        for pid, g in by_id.items():
            param = param_of[pid]
            if param.name in grads:
                raise ContractError(f"two distinct Parameters named {param.name!r} in one graph")
            param.grad += g
            grads[param.name] = g
        return grads


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE


def lift(x, dtype=None) -> Tensor:
    """Wrap arrays/scalars as constant leaf Tensors; Tensors pass through."""
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Parameter):
        return x.tensor()
    data = np.asarray(x, dtype=dtype or default_dtype())
    return Tensor(data)


def _accum(parent: Tensor, g: np.ndarray) -> None:
    if parent.grad is None:
        parent.grad = g
    else:
        parent.grad = parent.grad + g


def _make(data: np.ndarray, parents: tuple, bwd: Callable | None, op: str) -> Tensor:
    _check_finite(data, op)
    if _ACTIVE_TAPE is None:
        return Tensor(data)
    out = Tensor(data, parents, bwd)
    _ACTIVE_TAPE._nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient g down to a broadcast operand's original shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = lift(a), lift(b)
    data = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), bwd, "add")


def sub(a, b) -> Tensor:
    a, b = lift(a), lift(b)
    data = a.data - b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), bwd, "sub")


def mul(a, b) -> Tensor:
    a, b = lift(a), lift(b)
    data = a.data * b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), bwd, "mul")


def neg(a) -> Tensor:
    a = lift(a)

    def bwd(g):
        _accum(a, -g)

    return _make(-a.data, (a,), bwd, "neg")


def matmul(a, b) -> Tensor:
    a, b = lift(a), lift(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError("matmul operands must have ndim >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions mismatch: {a.data.shape} @ {b.data.shape}"
        )
    data = a.data @ b.data

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accum(a, _unbroadcast(ga, a.data.shape))
        _accum(b, _unbroadcast(gb, b.data.shape))

    return _make(data, (a, b), bwd, "matmul")


def relu(a) -> Tensor:
    a = lift(a)
    data = np.maximum(a.data, 0)

    def bwd(g):
        _accum(a, g * (a.data > 0))

    return _make(data, (a,), bwd, "relu")


def tanh(a) -> Tensor:
    a = lift(a)
    data = np.tanh(a.data)

    def bwd(g):
        _accum(a, g * (1.0 - data * data))

    return _make(data, (a,), bwd, "tanh")


def exp(a) -> Tensor:
    a = lift(a)
    data = np.exp(a.data)

    def bwd(g):
        _accum(a, g * data)

    return _make(data, (a,), bwd, "exp")


def log(a) -> Tensor:
    a = lift(a)
    data = np.log(a.data)

    def bwd(g):
        _accum(a, g / a.data)

    return _make(data, (a,), bwd, "log")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where the input lies inside [lo, hi]."""
    a = lift(a)
    data = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)

    def bwd(g):
        _accum(a, g * mask)

    return _make(data, (a,), bwd, "clip")


def minimum(a, b) -> Tensor:
    a, b = lift(a), lift(b)
    take_a = a.data <= b.data
    data = np.where(take_a, a.data, b.data)

    def bwd(g):
        _accum(a, _unbroadcast(g * take_a, a.data.shape))
        _accum(b, _unbroadcast(g * ~take_a, b.data.shape))

    return _make(data, (a, b), bwd, "minimum")


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = lift(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape).astype(a.data.dtype, copy=True))

    return _make(np.asarray(data), (a,), bwd, "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = lift(a)
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.data.shape[i] for i in axis]))
    else:
        n = a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = lift(a)
    data = a.data.reshape(shape)

    def bwd(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(data, (a,), bwd, "reshape")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = lift(a)
    data = np.swapaxes(a.data, ax1, ax2)

    def bwd(g):
        _accum(a, np.swapaxes(g, ax1, ax2))

    return _make(data, (a,), bwd, "swapaxes")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [lift(t) for t in tensors]
    data = np.stack([t.data for t in ts], axis=axis)

    def bwd(g):
        slabs = np.split(g, len(ts), axis=axis)
        for t, slab in zip(ts, slabs):
            _accum(t, slab.reshape(t.data.shape))

    return _make(data, tuple(ts), bwd, "stack")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [lift(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, slab in zip(ts, np.split(g, offsets, axis=axis)):
            _accum(t, slab)

    return _make(data, tuple(ts), bwd, "concat")


def take_rows(a, idx) -> Tensor:
    """Gather rows along the first axis; gradient scatter-adds back."""
    a = lift(a)
    idx = np.asarray(idx, dtype=np.intp)
    data = a.data[idx]

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        _accum(a, ga)

    return _make(data, (a,), bwd, "take_rows")


def scatter_rows(pairs: Sequence, n_rows: int) -> Tensor:
    """Assemble an (n_rows, ...) tensor from disjoint (index, rows) groups."""
    pairs = [(np.asarray(i, dtype=np.intp), lift(t)) for i, t in pairs]
    if not pairs:
        raise DimensionError("scatter_rows needs at least one group")
    tail = pairs[0][1].data.shape[1:]
    data = np.zeros((n_rows, *tail), dtype=pairs[0][1].data.dtype)
    total = 0
    for idx, t in pairs:
        data[idx] = t.data
        total += len(idx)
    if total != n_rows:
        raise DimensionError(f"scatter_rows groups cover {total} of {n_rows} rows")

    def bwd(g):
        for idx, t in pairs:
            _accum(t, g[idx])

    return _make(data, tuple(t for _, t in pairs), bwd, "scatter_rows")


def softmax(a, axis: int = -1) -> Tensor:
    a = lift(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (data * g).sum(axis=axis, keepdims=True)
        _accum(a, data * (g - dot))

    return _make(data, (a,), bwd, "softmax")


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with learned affine parameters."""
    a, gamma, beta = lift(a), lift(gamma), lift(beta)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data

    def bwd(g):
        dxhat = g * gamma.data
        dg = (g * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0).reshape(gamma.data.shape)
        db = g.reshape(-1, xhat.shape[-1]).sum(axis=0).reshape(beta.data.shape)
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accum(a, inv * (dxhat - m1 - xhat * m2))
        _accum(gamma, dg)
        _accum(beta, db)

    return _make(data, (a, gamma, beta), bwd, "layer_norm")


def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """Run the active tape's backward pass from a scalar loss node."""
    if _ACTIVE_TAPE is None:
        raise ContractError("backward requires an active Tape")
    return _ACTIVE_TAPE.backward(loss)


class Adam:
    """Adaptive-moment optimizer; skips frozen parameters entirely."""

    def __init__(self, params: Iterable[Parameter], lr: float = 3e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 max_grad_norm: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.max_grad_norm = max_grad_norm
        self.t = 0
        self._m = {id(p): np.zeros_like(p.value) for p in self.params if p.trainable}
        self._v = {id(p): np.zeros_like(p.value) for p in self.params if p.trainable}

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def clip_gradients(self) -> float:
        """Scale all trainable gradients to a global norm cap; returns the norm."""
        total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2))
                              for p in self.params if p.trainable))
        if self.max_grad_norm is not None and total > self.max_grad_norm > 0:
            scale = self.max_grad_norm / (total + 1e-12)
            for p in self.params:
                if p.trainable:
                    p.grad *= scale
        return total

    def step(self) -> None:
        if self.max_grad_norm is not None:
            self.clip_gradients()
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p in self.params:
            if not p.trainable:
                continue
            g = p.grad
            m = self._m[id(p)]
            v = self._v[id(p)]
            m[...] = self.b1 * m + (1.0 - self.b1) * g
            v[...] = self.b2 * v + (1.0 - self.b2) * (g * g)
            p.value -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.value.dtype)
