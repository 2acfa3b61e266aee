"""Reverse-mode automatic differentiation over dense numpy arrays.

A tape-based engine with exactly the primitives the transformer stack
needs.  Ops record onto the innermost active `Tape` (a context manager);
`Tape.backward` walks the records in reverse, which is a valid reverse
topological order because every op appends after its inputs were
produced.  Tensors are float32 by default; gradient checks run the same
graph in float64 by constructing float64 leaves.

Every primitive validates that its forward output is finite and raises
`NonFiniteError` otherwise, so a diverging training step fails loudly at
the op that produced the overflow instead of corrupting parameters.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or infinity in its forward output."""


class Tensor:
    """A numpy array plus gradient bookkeeping.

    `grad` stays None until a backward pass deposits into it.  Only
    float32/float64 data is accepted; integer inputs (token ids, gather
    indices) are passed to ops as plain numpy arrays, not Tensors.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.item())

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # operator sugar -----------------------------------------------------
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
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


class _Record:
    """One taped op: its output, input tensors, and a vjp callback."""

    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple, vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Records ops while active; replays them in reverse for gradients.

    Tapes nest: ops always record onto the innermost active tape.  The
    stack is thread-local, so concurrent evaluations do not interleave.
    """

    def __init__(self):
        self._records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        top = _tape_stack().pop()
        if top is not self:
            raise RuntimeError("tape stack corrupted: exited a non-innermost tape")

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor, params: Sequence[Tensor] = ()) -> None:
        """Accumulate d(loss)/d(tensor) into `.grad` of every reachable
        requires_grad leaf.  Parameters listed in `params` that the loss
        does not depend on receive an explicit zero gradient.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}
        produced = {id(rec.out) for rec in self._records}
        for rec in reversed(self._records):
            # A record is visited only after every consumer of its output
            # (all taped later) has contributed, so the popped value is
            # the complete adjoint.
            out_grad = grads.pop(id(rec.out), None)
            holders.pop(id(rec.out), None)
            if out_grad is None:
                continue
            in_grads = rec.vjp(out_grad)
            for tensor, g in zip(rec.inputs, in_grads):
                if tensor is None or g is None:
                    continue
                tid = id(tensor)
                if tid in grads:
                    grads[tid] = grads[tid] + g
                else:
                    grads[tid] = g
                    holders[tid] = tensor
        for tid, g in grads.items():
            tensor = holders[tid]
            if tensor.requires_grad and id(tensor) not in produced:
                tensor.grad = g if tensor.grad is None else tensor.grad + g
        for p in params:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)


def _data(x):
    """Raw array/scalar view of an op operand.

    Python scalars stay scalars (numpy's weak promotion keeps float32
    intact); integer arrays are upcast to the default float dtype so they
    can't silently promote a float32 graph to float64.
    """
    if isinstance(x, Tensor):
        return x.data
    if isinstance(x, (int, float)):
        return x
    arr = np.asarray(x)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(DEFAULT_DTYPE)
    return arr


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in the output of {op!r}")


def _make(out_data, inputs: tuple, vjp: Callable, op: str) -> Tensor:
    _check_finite(out_data, op)
    req = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=req)
    tape = active_tape()
    if req and tape is not None:
        recorded = tuple(t if isinstance(t, Tensor) else None for t in inputs)
        tape._records.append(_Record(out, recorded, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape of a broadcast operand."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _shape_of(x):
    return x.shape if isinstance(x, np.ndarray) else ()


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    da, db = _data(a), _data(b)
    sa, sb = _shape_of(da), _shape_of(db)

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(da + db, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    da, db = _data(a), _data(b)
    sa, sb = _shape_of(da), _shape_of(db)

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(da - db, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    da, db = _data(a), _data(b)
    sa, sb = _shape_of(da), _shape_of(db)

    def vjp(g):
        return _unbroadcast(g * db, sa), _unbroadcast(g * da, sb)

    return _make(da * db, (a, b), vjp, "mul")


def matmul(a, b) -> Tensor:
    da, db = _data(a), _data(b)
    if getattr(da, "ndim", 0) < 2 or getattr(db, "ndim", 0) < 2:
        raise ValueError("matmul operands must have ndim >= 2")

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(db, -1, -2), da.shape)
        gb = _unbroadcast(np.swapaxes(da, -1, -2) @ g, db.shape)
        return ga, gb

    return _make(da @ db, (a, b), vjp, "matmul")


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def sigmoid(x: Tensor) -> Tensor:
    dx = _data(x)
    # stable two-sided form: never exponentiates a positive argument
    e = np.exp(-np.abs(dx))
    out = np.where(dx >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), vjp, "sigmoid")


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x); d/dx = s * (1 + x * (1 - s))."""
    dx = _data(x)
    e = np.exp(-np.abs(dx))
    s = np.where(dx >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = dx * s

    def vjp(g):
        return (g * s * (1.0 + dx * (1.0 - s)),)

    return _make(out, (x,), vjp, "silu")


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-5) -> Tensor:
    """Root-mean-square normalization over the last axis, then a learned
    per-channel gain: y = g * x / sqrt(mean(x^2) + eps).
    """
    dx, dg = _data(x), _data(gain)
    n = dx.shape[-1]
    ms = np.mean(np.square(dx), axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    normed = dx * inv
    out = normed * dg

    def vjp(g):
        gx_hat = g * dg  # adjoint of the normalized activations
        # d normed_i / d x_j = inv * (delta_ij - x_i x_j inv^2 / n)
        dot = np.sum(gx_hat * dx, axis=-1, keepdims=True)
        grad_x = inv * gx_hat - (inv**3 / n) * dx * dot
        grad_gain = _unbroadcast(g * normed, dg.shape)
        return grad_x, grad_gain

    return _make(out, (x, gain), vjp, "rms_norm")


def softmax(x: Tensor) -> Tensor:
    dx = _data(x)
    z = dx - np.max(dx, axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=-1, keepdims=True)

    def vjp(g):
        dot = np.sum(g * out, axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (x,), vjp, "softmax")


def masked_softmax(x: Tensor, allowed: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to `allowed` entries.

    Disallowed entries get an exact 0.0 probability (no epsilon leak):
    the max is taken over allowed entries only and forbidden exponents
    are written as literal zeros.  Every row must allow at least one
    entry, which the package's masks guarantee via self-visibility.
    """
    dx = _data(x)
    allowed = np.broadcast_to(np.asarray(allowed, dtype=bool), dx.shape)
    if not allowed.any(axis=-1).all():
        raise ValueError("masked_softmax: some row allows no entries")
    neg = np.where(allowed, dx, -np.inf)
    m = np.max(neg, axis=-1, keepdims=True)
    e = np.where(allowed, np.exp(dx - m), 0.0)
    out = e / np.sum(e, axis=-1, keepdims=True)

    def vjp(g):
        dot = np.sum(g * out, axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (x,), vjp, "masked_softmax")


# ---------------------------------------------------------------------------
# gathers, reshapes, reductions


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather table[ids]; backward scatter-adds (duplicate ids sum)."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ValueError(f"embedding ids must be integers, got {ids.dtype}")
    dt = _data(table)
    if ids.size and (ids.min() < 0 or ids.max() >= dt.shape[0]):
        raise IndexError(
            f"embedding ids out of range [0, {dt.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}"
        )

    def vjp(g):
        grad = np.zeros_like(dt)
        np.add.at(grad, ids, g)
        return (grad,)

    return _make(dt[ids], (table,), vjp, "embedding")


def index_select(x: Tensor, axis: int, idx: np.ndarray) -> Tensor:
    """Gather along one axis; backward scatter-adds into the source."""
    idx = np.asarray(idx)
    if idx.ndim != 1 or idx.dtype.kind not in "iu":
        raise ValueError("index_select needs a 1-D integer index array")
    dx = _data(x)
    if idx.size and (idx.min() < 0 or idx.max() >= dx.shape[axis]):
        raise IndexError(f"index out of range for axis {axis} of shape {dx.shape}")

    def vjp(g):
        grad = np.zeros_like(dx)
        np.add.at(np.moveaxis(grad, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (grad,)

    return _make(np.take(dx, idx, axis=axis), (x,), vjp, "index_select")


def getitem(x: Tensor, key) -> Tensor:
    """Basic slicing (slices/ints/ellipsis); backward writes into zeros."""
    dx = _data(x)
    out = dx[key]

    def vjp(g):
        grad = np.zeros_like(dx)
        grad[key] += g
        return (grad,)

    return _make(out, (x,), vjp, "getitem")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    parts = [_data(t) for t in tensors]
    sizes = [p.shape[axis] for p in parts]
    out = np.concatenate(parts, axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), vjp, "concat")


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    dx = _data(x)
    inv = tuple(np.argsort(axes))

    def vjp(g):
        return (np.transpose(g, inv),)

    return _make(np.transpose(dx, axes), (x,), vjp, "transpose")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    dx = _data(x)

    def vjp(g):
        return (g.reshape(dx.shape),)

    return _make(dx.reshape(shape), (x,), vjp, "reshape")


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    dx = _data(x)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, dx.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, dx.shape).copy(),)

    return _make(np.sum(dx, axis=axis, keepdims=keepdims), (x,), vjp, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    dx = _data(x)
    if axis is None:
        count = dx.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([dx.shape[a] for a in axes]))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, dx.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, dx.shape).copy(),)

    return _make(np.mean(dx, axis=axis, keepdims=keepdims), (x,), vjp, "mean")


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-element negative log-likelihood of integer targets.

    logits has shape (..., V), targets shape (...); the result has shape
    (...) and is always >= 0.  Computed via a shifted log-sum-exp so
    large logits cannot overflow.
    """
    targets = np.asarray(targets)
    dl = _data(logits)
    if targets.shape != dl.shape[:-1]:
        raise ValueError(
            f"targets shape {targets.shape} does not match logits {dl.shape}"
        )
    if targets.dtype.kind not in "iu":
        raise ValueError(f"targets must be integers, got {targets.dtype}")
    v = dl.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"targets out of range [0, {v})")
    m = np.max(dl, axis=-1, keepdims=True)
    z = dl - m
    lse = np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    logprobs = z - lse
    picked = np.take_along_axis(logprobs, targets[..., None], axis=-1)[..., 0]
    out = -picked

    def vjp(g):
        probs = np.exp(logprobs)
        onehot = np.zeros_like(probs)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        return ((probs - onehot) * g[..., None],)

    return _make(out, (logits,), vjp, "cross_entropy")
