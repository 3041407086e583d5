"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Just enough machinery for transformer encoders, coupling MLPs and softmax
losses: float32 by default, float64 for gradient checking, numpy as the
storage and kernel backend. Ops record onto an ambient ``GradTape``; with no
tape active (the evaluation path) nothing is recorded and forward passes are
allocation-only.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "GradTape",
    "no_grad",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "matmul",
    "dot",
    "relu",
    "gelu",
    "reshape",
    "swap_axes",
    "concat_last_dim",
    "split_last_dim",
    "sum_over_axis",
    "mean_over_axis",
    "embedding",
    "dropout",
    "layernorm",
    "softmax_last",
    "logsumexp_last",
    "softmax_cross_entropy",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class Tensor:
    """A dense n-d float array, optionally participating in the grad tape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar; the functional forms below do the real work
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other, self.dtype))


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class _TapeEntry:
    __slots__ = ("output", "backward_fn")

    def __init__(self, output: Tensor, backward_fn: Callable[[np.ndarray], None]):
        self.output = output
        self.backward_fn = backward_fn


class GradTape:
    """Records ops in execution order; backward replays them exactly reversed.

    Use as a context manager. Tapes nest (the innermost records); each tape is
    single-threaded but independent tapes may run on separate threads.
    """

    def __init__(self):
        self._entries: list[_TapeEntry] = []

    def __enter__(self) -> "GradTape":
        _state().stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _state().stack.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, output: Tensor, backward_fn: Callable[[np.ndarray], None]) -> None:
        self._entries.append(_TapeEntry(output, backward_fn))

    def backward(self, loss: Tensor) -> None:
        if loss.data.ndim != 0:
            raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for entry in reversed(self._entries):
            g = entry.output.grad
            if g is None:
                continue
            entry.backward_fn(g)

    def clear(self) -> None:
        self._entries.clear()


class _ThreadState(threading.local):
    def __init__(self):
        self.stack: list[GradTape] = []
        self.enabled = True


_STATE = _ThreadState()


def _state() -> _ThreadState:
    return _STATE


class no_grad:
    """Context manager suppressing tape recording (teacher/eval passes)."""

    def __enter__(self):
        self._prev = _state().enabled
        _state().enabled = False
        return self

    def __exit__(self, exc_type, exc, tb):
        _state().enabled = self._prev


def _active_tape() -> GradTape | None:
    st = _state()
    if not st.enabled or not st.stack:
        return None
    return st.stack[-1]


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap an op result, recording it if any input participates in the tape."""
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        tape.record(out, backward_fn)
    return out


def _check_same_dtype(*tensors: Tensor) -> None:
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise ShapeError(f"dtype mismatch: {dt} vs {t.data.dtype}")


def _reduce_to_shape(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_reduce_to_shape(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_reduce_to_shape(g, b.shape))

    return _make(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_reduce_to_shape(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_reduce_to_shape(-g, b.shape))

    return _make(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_reduce_to_shape(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_reduce_to_shape(g * a.data, b.shape))

    return _make(data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_reduce_to_shape(g / b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_reduce_to_shape(-g * a.data / (b.data * b.data), b.shape))

    return _make(data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    data = a.data * c

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * c)

    return _make(data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * (a.data > 0))

    return _make(data, (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    data = x * cdf

    def backward(g):
        if a.requires_grad:
            pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
            a.accumulate_grad(g * (cdf + x * pdf))

    return _make(data.astype(x.dtype, copy=False), (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.shape))

    return _make(data, (a,), backward)


def swap_axes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    data = np.swapaxes(a.data, ax1, ax2)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(np.swapaxes(g, ax1, ax2))

    return _make(np.ascontiguousarray(data), (a,), backward)


def concat_last_dim(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_last_dim needs at least one tensor")
    _check_same_dtype(*parts)
    data = np.concatenate([p.data for p in parts], axis=-1)
    offsets = np.cumsum([0] + [p.shape[-1] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p.accumulate_grad(g[..., lo:hi])

    return _make(data, tuple(parts), backward)


def split_last_dim(a: Tensor, n_chunks: int) -> list[Tensor]:
    d = a.shape[-1]
    if d % n_chunks != 0:
        raise ShapeError(f"cannot split last dim {d} into {n_chunks} equal chunks")
    w = d // n_chunks
    outs = []
    for i in range(n_chunks):
        lo = i * w

        def backward(g, lo=lo):
            if a.requires_grad:
                full = np.zeros_like(a.data)
                full[..., lo : lo + w] = g
                a.accumulate_grad(full)

        outs.append(_make(np.ascontiguousarray(a.data[..., lo : lo + w]), (a,), backward))
    return outs


def sum_over_axis(a: Tensor, axis: int) -> Tensor:
    data = a.data.sum(axis=axis)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(np.broadcast_to(np.expand_dims(g, axis), a.shape))

    return _make(data, (a,), backward)


def mean_over_axis(a: Tensor, axis: int) -> Tensor:
    n = a.shape[axis]
    data = a.data.mean(axis=axis)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(np.broadcast_to(np.expand_dims(g / n, axis), a.shape))

    return _make(data, (a,), backward)


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot expects equal-length vectors, got {a.shape} and {b.shape}")
    _check_same_dtype(a, b)
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(g * a.data)

    return _make(data, (a, b), backward)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with optional stacked leading batch dims.

    Supported: 2d @ 2d, nd @ 2d (shared right operand), and nd @ nd with
    identical leading dims. Gradients: dA = dC·Bᵀ, dB = Aᵀ·dC, summed over
    the batch when B is shared.
    """
    _check_same_dtype(a, b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul leading batch dims disagree: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a.accumulate_grad(_reduce_to_shape(ga, a.shape))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k = a.shape[-1]
                n = g.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
            b.accumulate_grad(_reduce_to_shape(gb, b.shape))

    return _make(data, (a, b), backward)


# ---------------------------------------------------------------------------
# lookup / stochastic ops
# ---------------------------------------------------------------------------


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: out[..., :] = table[ids[...]]. Gradient scatter-adds."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")
    data = table.data[ids]

    def backward(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
            table.accumulate_grad(gt)

    return _make(data, (table,), backward)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.data.dtype) / (1.0 - rate)
    data = a.data * keep

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * keep)

    return _make(data.astype(a.data.dtype, copy=False), (a,), backward)


# ---------------------------------------------------------------------------
# normalization / softmax family
# ---------------------------------------------------------------------------


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance over the last axis, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layernorm affine params must have shape ({d},)")
    _check_same_dtype(x, gain, bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            gain.accumulate_grad((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias.accumulate_grad(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gh = g * gain.data
            # d/dx of (x - mu) * inv with mu, inv functions of x
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            x.accumulate_grad(gx)

    return _make(data.astype(x.data.dtype, copy=False), (x, gain, bias), backward)


def softmax_last(x: Tensor) -> Tensor:
    """Stable softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if x.requires_grad:
            gx = s * (g - (g * s).sum(axis=-1, keepdims=True))
            x.accumulate_grad(gx)

    return _make(s.astype(x.data.dtype, copy=False), (x,), backward)


def logsumexp_last(x: Tensor) -> Tensor:
    """log-sum-exp over the last axis (shape drops that axis)."""
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    se = e.sum(axis=-1, keepdims=True)
    data = (m + np.log(se)).squeeze(-1)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(np.expand_dims(g, -1) * (e / se))

    return _make(data.astype(x.data.dtype, copy=False), (x,), backward)


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], max-stabilized."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects [B, C] logits, got {logits.shape}")
    b, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (b,):
        raise ShapeError(f"expected {b} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"label out of range [0, {c})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    logp = z - np.log(e.sum(axis=-1, keepdims=True))
    data = np.asarray(-logp[np.arange(b), labels].mean(), dtype=logits.data.dtype)

    def backward(g):
        if logits.requires_grad:
            p = np.exp(logp)
            p[np.arange(b), labels] -= 1.0
            logits.accumulate_grad(g * p / b)

    return _make(data, (logits,), backward)
