"""Minimal tape-based reverse-mode automatic differentiation on numpy arrays.

Every differentiable operation computes its value eagerly and, when at least
one input requires a gradient, appends a record to the active :class:`Tape`.
``backward(loss)`` walks the tape in reverse, consumes it, and accumulates
gradients into every ``requires_grad`` tensor it reaches.

Values are 32-bit floats.  Operations preserve the dtype of their inputs, so
gradient checks may replay the same graph in float64.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from . import kernels

DTYPE = np.float32
MASK_VALUE = -1e9

_ids = itertools.count(1)
_local = threading.local()


class ShapeError(ValueError):
    pass


class DegenerateBatchError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class VocabularyError(IndexError):
    pass


class Tensor:
    """Dense array node with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "name", "_tape")
    # makes numpy defer to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


class Tape:
    """Ordered record of operations for a single backward pass."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], rule: Callable) -> None:
        if self.consumed:
            raise TapeError("cannot record on a consumed tape")
        out._tape = self
        self.records.append((out, inputs, rule))

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise TapeError("tape already consumed by a previous backward pass")
        if loss.data.size != 1 or loss.ndim > 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.consumed = True
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for out, inputs, rule in reversed(self.records):
            g = grads.pop(out.node_id, None)
            if g is None:
                continue
            if out.requires_grad:
                out.grad = g
            in_grads = rule(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                prev = grads.get(t.node_id)
                grads[t.node_id] = gi if prev is None else prev + gi
        # whatever remains belongs to leaves
        for t in _leaves(self.records):
            g = grads.get(t.node_id)
            if g is None:
                continue
            if t.grad is None:
                t.grad = np.array(g, dtype=t.data.dtype).reshape(t.shape)
            else:
                t.grad += g
        self.records = []


def _leaves(records) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    for _, inputs, _ in records:
        for t in inputs:
            if t.requires_grad and t._tape is None:
                seen.setdefault(t.node_id, t)
    return list(seen.values())


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None or tape.consumed:
        tape = Tape()
        _local.tape = tape
    return tape


def _grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextmanager
def no_grad():
    prev = _grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


def backward(loss: Tensor) -> None:
    """Populate gradients of every requires_grad ancestor of ``loss``."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data)
        return
    tape.backward(loss)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _result(data: np.ndarray, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
    needs = _grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        current_tape().record(out, tuple(inputs), rule)
    return out


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


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.data.dtype))
    return a, b


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    ad, bd = a.data, b.data

    def rule(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad * bd, (a, b), rule)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    y, cache = kernels.gelu_forward(x.data)
    return _result(y, (x,), lambda g: (kernels.gelu_backward(g, x.data, cache),))


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; identity outside training."""
    if not train or rate <= 0.0:
        return x
    keep = rng.random(x.shape, dtype=np.float32) >= rate
    scale = keep.astype(x.data.dtype)
    scale *= 1.0 / (1.0 - rate)
    return _result(x.data * scale, (x,), lambda g: (g * scale,))


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def slice_rows(x: Tensor, start: int) -> Tensor:
    """x[start:] along the first axis."""
    src = x.shape

    def rule(g):
        out = np.zeros(src, dtype=g.dtype)
        out[start:] = g
        return (out,)

    return _result(x.data[start:], (x,), rule)


def pad_axis1(x: Tensor, before: int) -> Tensor:
    """Prepend ``before`` zero columns along axis 1."""
    shape = (x.shape[0], x.shape[1] + before) + x.shape[2:]
    out = np.zeros(shape, dtype=x.data.dtype)
    out[:, before:] = x.data
    return _result(out, (x,), lambda g: (np.ascontiguousarray(g[:, before:]),))


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    src = x.shape

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).astype(x.data.dtype, copy=True),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), rule)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / float(n))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting over leading axes.

    Gradients: dA = dOut @ B^T and dB = A^T @ dOut, reduced over broadcast axes.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2:
        # one large GEMM over folded leading axes beats a stack of small ones
        a2 = ad.reshape(-1, ad.shape[-1])
        out_shape = ad.shape[:-1] + (bd.shape[1],)

        def rule2(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _result((a2 @ bd).reshape(out_shape), (a, b), rule2)

    def rule(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result(ad @ bd, (a, b), rule)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; the backward pass scatter-adds into those rows."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("ids must be integers")
    n_rows = table.shape[0]
    bad = np.argwhere((ids < 0) | (ids >= n_rows))
    if bad.size:
        pos = tuple(int(i) for i in bad[0])
        raise VocabularyError(f"item id {int(ids[pos])} at position {pos} outside vocabulary of size {n_rows}")
    flat = ids.reshape(-1).astype(np.int64)
    d = table.shape[1]

    def rule(g):
        out = np.zeros_like(table.data)
        kernels.scatter_add_rows(out, flat, np.ascontiguousarray(g.reshape(-1, d)))
        return (out,)

    return _result(table.data[flat].reshape(ids.shape + (d,)), (table,), rule)


# ---------------------------------------------------------------- normalisation


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    d = x.shape[-1]
    y = kernels.softmax_rows(x.data.reshape(-1, d)).reshape(x.shape)

    def rule(g):
        return (kernels.softmax_rows_backward(g.reshape(-1, d), y.reshape(-1, d)).reshape(x.shape),)

    return _result(y, (x,), rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine params {gain.shape}/{bias.shape} do not match last axis {d}")
    x2 = np.ascontiguousarray(x.data.reshape(-1, d))
    y, xhat, rstd = kernels.layer_norm_forward(x2, gain.data, bias.data, eps)

    def rule(g):
        dx, dgain, dbias = kernels.layer_norm_backward(
            np.ascontiguousarray(g.reshape(-1, d)), xhat, rstd, gain.data
        )
        return dx.reshape(x.shape), dgain, dbias

    return _result(y.reshape(x.shape), (x, gain, bias), rule)


# ---------------------------------------------------------------- losses


def softmax_cross_entropy(logits: Tensor, targets, valid) -> Tensor:
    """Mean over rows flagged in ``valid`` of -log softmax(logits)[target].

    Rows where ``valid`` is False contribute neither loss nor gradient.
    """
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects [N, V] logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    valid = np.asarray(valid, dtype=bool).reshape(-1)
    n, v = logits.shape
    if targets.shape[0] != n or valid.shape[0] != n:
        raise ShapeError(f"targets/valid length must be {n}")
    count = int(valid.sum())
    if count == 0:
        raise DegenerateBatchError("every row is masked; loss is undefined")
    if np.any((targets[valid] < 0) | (targets[valid] >= v)):
        raise VocabularyError(f"target id outside [0, {v})")
    safe_t = np.where(valid, targets, 0)
    loss, dlogits = kernels.softmax_xent(np.ascontiguousarray(logits.data), safe_t, valid)
    out_dtype = logits.data.dtype

    def rule(g):
        return (dlogits * (g / count).astype(out_dtype),)

    return _result(np.asarray(loss / count, dtype=out_dtype), (logits,), rule)


def sigmoid_bce(logits: Tensor, labels, valid) -> Tensor:
    """Mean over valid elements of binary cross-entropy on raw logits.

    Uses max(x, 0) - x*y + log1p(exp(-|x|)), which never overflows.
    """
    x = logits.data.reshape(-1)
    y = np.asarray(labels, dtype=x.dtype).reshape(-1)
    valid = np.asarray(valid, dtype=bool).reshape(-1)
    if y.shape != x.shape or valid.shape != x.shape:
        raise ShapeError(f"labels/valid must match logits of size {x.size}")
    count = int(valid.sum())
    if count == 0:
        raise DegenerateBatchError("every element is masked; loss is undefined")
    per = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    loss = per[valid].sum(dtype=np.float64) / count
    shape = logits.shape

    def rule(g):
        p = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        d = np.where(valid, p - y, 0.0).astype(x.dtype) * (g / count).astype(x.dtype)
        return (d.reshape(shape),)

    return _result(np.asarray(loss, dtype=x.dtype), (logits,), rule)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)
