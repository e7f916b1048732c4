"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every op returns a new :class:`Tensor`; nothing on the tape is mutated in
place.  Ops record a backward closure and their parents, and
:func:`backward` walks the graph in reverse topological order.

Precision is selected per context (``AHA_PRECISION=f32|f64`` sets the
process default, :func:`precision` overrides it locally).  A forward op that
produces NaN or Inf raises :class:`NonFiniteError` immediately.
"""
from __future__ import annotations

import contextlib
import contextvars
import math
import os
from typing import Callable, Iterator, Sequence

import numpy as np

_DTYPES = {"f32": np.float32, "f64": np.float64}


def _env_precision() -> str:
    value = os.environ.get("AHA_PRECISION", "f32").strip().lower()
    if value not in _DTYPES:
        raise ValueError(f"AHA_PRECISION must be one of {sorted(_DTYPES)}, got {value!r}")
    return value


_precision: contextvars.ContextVar[str | None] = contextvars.ContextVar("aha_precision", default=None)
_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("aha_grad_enabled", default=True)


class NonFiniteError(FloatingPointError):
    """Raised when a forward op produces NaN or Inf."""


def get_dtype() -> type:
    return _DTYPES[_precision.get() or _env_precision()]


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch the dtype used for newly created tensors."""
    if name not in _DTYPES:
        raise ValueError(f"precision must be one of {sorted(_DTYPES)}, got {name!r}")
    token = _precision.set(name)
    try:
        yield
    finally:
        _precision.reset(token)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class Tensor:
    """A dense array that can take part in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or get_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; use mul")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {op}")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data, dtype=data.dtype)
    out.op = op
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    c = x.data.dtype.type(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, clipped so outputs stay strictly inside (0, 1)."""
    x = as_tensor(x)
    dt = x.data.dtype
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    y = np.clip(y, np.finfo(dt).tiny, np.nextafter(dt.type(1), dt.type(0))).astype(dt, copy=False)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    v = x.data
    v2 = v * v
    t = np.tanh(_GELU_C * v * (1.0 + 0.044715 * v2))
    y = 0.5 * v * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t**2) * dinner),)

    return _make(y.astype(x.dtype, copy=False), (x,), bw, "gelu")


# -- linear algebra and shape -----------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs operands with ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            # shared weight: fold batch axes into one GEMM
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def transpose(x: Tensor, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(tsum(x, axis, keepdims), 1.0 / float(count))


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; ``ids`` is an integer array of any shape."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")

    def bw(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (out,)

    return _make(table.data[ids], (table,), bw, "embedding")


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    x, gain = as_tensor(x), as_tensor(gain)
    d = x.shape[-1]
    inv = 1.0 / np.sqrt((x.data**2).mean(axis=-1, keepdims=True) + eps)
    xhat = x.data * inv

    def bw(g):
        ggain = _unbroadcast(g * xhat, gain.shape)
        gx_hat = g * gain.data
        gx = inv * (gx_hat - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / d)
        return gx, ggain

    return _make((xhat * gain.data).astype(x.dtype, copy=False), (x, gain), bw, "rmsnorm")


# -- attention-facing ops ---------------------------------------------------

def softmax_row(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis; ``mask`` (True = keep) zeroes excluded entries."""
    x = as_tensor(x)
    if mask is None:
        keep = np.ones(x.shape, dtype=bool)
    else:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not keep.any(axis=-1).all():
        raise ValueError("softmax_row: a row is fully masked (malformed attention mask)")
    z = np.where(keep, x.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(keep, np.exp(z), 0.0)
    y = (e / e.sum(axis=-1, keepdims=True)).astype(x.dtype, copy=False)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), bw, "softmax_row")


def cross_entropy_logits(logits: Tensor, targets, loss_mask=None) -> Tensor:
    """Mean next-token NLL over positions where ``loss_mask`` is True."""
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    vocab = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ValueError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(f"target id out of range [0, {vocab})")
    mask = np.ones(targets.shape, dtype=bool) if loss_mask is None else np.asarray(loss_mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross_entropy_logits: every position is masked")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logz
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(picked * mask).sum() / count

    def bw(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, targets[..., None], np.take_along_axis(grad, targets[..., None], -1) - 1.0, -1)
        return (grad * (mask[..., None] * (g / count)),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "cross_entropy")


def ste_threshold(s: Tensor, tau: float) -> Tensor:
    """Hard gate ``1[s > tau]`` forward; identity in the backward pass."""
    s = as_tensor(s)
    gate = (s.data > tau).astype(s.dtype)
    return _make(gate, (s,), lambda g: (g.copy(),), "ste_threshold")


def gated_select(gate: Tensor, full: Tensor, local: Tensor) -> Tensor:
    """Route each row to ``full`` where gate is 1, else to ``local``.

    The forward value is ``gate * full`` on open gates and
    ``(1 - gate) * local`` on closed ones, with the branch choice held fixed
    at the hard decision.  So the gate gradient is ``<g, full>`` on open
    gates and ``-<g, local>`` on closed gates.  ``gate`` broadcasts against
    the branches with a trailing singleton feature axis.
    """
    gate, full, local = as_tensor(gate), as_tensor(full), as_tensor(local)
    on = (gate.data >= 0.5).astype(gate.dtype)
    off = 1.0 - on
    g_val = gate.data
    out = g_val * on * full.data + (1.0 - g_val) * off * local.data

    def bw(g):
        ggate = on * (g * full.data).sum(-1, keepdims=True) - off * (g * local.data).sum(-1, keepdims=True)
        return (
            _unbroadcast(ggate, gate.shape),
            _unbroadcast(g * (g_val * on), full.shape),
            _unbroadcast(g * ((1.0 - g_val) * off), local.shape),
        )

    return _make(out.astype(full.dtype, copy=False), (gate, full, local), bw, "gated_select")


# -- driver -----------------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad tensor reachable from ``loss``.

    Leaf gradients accumulate across calls; call ``zero_grad`` in between.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
