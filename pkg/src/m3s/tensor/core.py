"""Float64 n-dimensional tensors with taped reverse-mode differentiation.

Every forward operation validates that its output is finite (a NaN or Inf
raises :class:`NumericError` at the op that produced it, not three layers
later) and, when a :class:`Tape` is active and an input requires a gradient,
records a backward rule on that tape.  ``backward(tape, loss)`` then replays
the tape once in reverse, accumulating gradients additively across fan-out.

All arithmetic is float64 and single-threaded-deterministic: the same inputs
produce bit-identical outputs.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf as _erf

from ..errors import ContractError, NumericError, ShapeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Finiteness checking after every op.  Kept as a module switch so a profiling
# run can disable it; the test suite always runs with it on.
_CHECK_FINITE = True


def set_finite_checks(enabled: bool) -> bool:
    """Toggle post-op finiteness validation, returning the previous setting."""
    global _CHECK_FINITE
    prev = _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)
    return prev


class Tensor:
    """A dense row-major float64 array with an optional gradient buffer.

    ``data`` is always C-contiguous float64, so the flat buffer length equals
    ``prod(shape)``.  ``grad`` is either ``None`` or an array of the same
    shape.  ``requires_grad`` marks leaves whose gradients the caller wants;
    intermediate results derive it from their inputs while a tape is active.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        # ascontiguousarray would promote rank-0 to rank-1; preserve scalars.
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """A defensive copy of the values."""
        return self.data.copy()

    def detach(self) -> "Tensor":
        """Same values, no gradient tracking (shares the buffer)."""
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t.grad = None
        return t

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class Tape:
    """Ordered record of executed operations (a Wengert list).

    Entries are appended in execution order, so inputs always precede the
    ops that consume them; a single reverse sweep visits each op exactly
    once.  Use as a context manager::

        with Tape() as tape:
            loss = model(x)
        backward(tape, loss)
    """

    __slots__ = ("_entries",)

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def record(self, output: Tensor, inputs: tuple, backward_fn: Callable) -> None:
        self._entries.append((output, inputs, backward_fn))

    def __len__(self) -> int:
        return len(self._entries)

    def clear(self) -> None:
        self._entries.clear()

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TAPE_STACK.pop()


_TAPE_STACK: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(tape: Tape, loss: Tensor) -> None:
    """Propagate d(loss)/d(tensor) to every tensor recorded on the tape.

    ``loss`` must be a scalar that the tape produced.  Gradients accumulate
    additively, so fan-out (the same tensor consumed twice) sums naturally.
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    produced = any(out is loss for out, _, _ in tape._entries)
    if not produced and loss.requires_grad:
        raise ContractError("loss tensor was not produced on this tape")
    loss.accumulate_grad(np.ones_like(loss.data))
    for out, inputs, backward_fn in reversed(tape._entries):
        g = out.grad
        if g is None:
            continue
        grads = backward_fn(g)
        for inp, gi in zip(inputs, grads):
            if gi is None:
                continue
            inp.accumulate_grad(gi)


def _record(out_data: np.ndarray, inputs: tuple, backward_fn: Callable) -> Tensor:
    """Wrap an op result, validating finiteness and taping if needed."""
    if _CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise NumericError("operation produced non-finite values")
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward_fn)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _record(out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return (_unbroadcast(g / bd, a.shape),
                _unbroadcast(-g * ad / (bd * bd), b.shape))

    return _record(out, (a, b), bwd)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _record(out, (a,), bwd)


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _record(out, (a,), lambda g: (g / ad,))


def powc(a, p: float) -> Tensor:
    """Elementwise power with a constant exponent."""
    a = as_tensor(a)
    ad = a.data
    out = ad ** p

    def bwd(g):
        return (g * p * ad ** (p - 1.0),)

    return _record(out, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    out = np.empty_like(ad)
    pos = ad >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
    ez = np.exp(ad[~pos])
    out[~pos] = ez / (1.0 + ez)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _record(out, (a,), bwd)


def softplus(a) -> Tensor:
    """log(1 + e^x), computed in the overflow-safe split form."""
    a = as_tensor(a)
    ad = a.data
    out = np.maximum(ad, 0.0) + np.log1p(np.exp(-np.abs(ad)))
    sig = np.empty_like(ad)
    pos = ad >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
    ez = np.exp(ad[~pos])
    sig[~pos] = ez / (1.0 + ez)

    def bwd(g):
        return (g * sig,)

    return _record(out, (a,), bwd)


def gelu(a) -> Tensor:
    """x * Phi(x) with the exact Gaussian CDF (erf form, no tanh shortcut)."""
    a = as_tensor(a)
    ad = a.data
    if _CHECK_FINITE and not np.all(np.isfinite(ad)):
        raise NumericError("gelu received non-finite input")
    cdf = 0.5 * (1.0 + _erf(ad * _INV_SQRT2))
    out = ad * cdf

    def bwd(g):
        pdf = np.exp(-0.5 * ad * ad) * _INV_SQRT2PI
        return (g * (cdf + ad * pdf),)

    return _record(out, (a,), bwd)


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where the (constant) boolean mask holds, else ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    m = np.asarray(mask, dtype=bool)
    out = np.where(m, a.data, b.data)

    def bwd(g):
        ga = _unbroadcast(np.where(m, g, 0.0), a.shape)
        gb = _unbroadcast(np.where(m, 0.0, g), b.shape)
        return ga, gb

    return _record(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    shape = a.shape

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(out, (a,), bwd)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out = a.data.mean(axis=axes, keepdims=keepdims)
    shape = a.shape

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape) / count,)

    return _record(out, (a,), bwd)


def variance(a, axis=None, keepdims: bool = False) -> Tensor:
    """Population variance (ddof = 0), differentiable."""
    m = mean(a, axis=axis, keepdims=True)
    centered = sub(a, m)
    v = mean(mul(centered, centered), axis=axis, keepdims=keepdims)
    return v


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(old),)

    return _record(out, (a,), bwd)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = np.argsort(axes)
    out = np.ascontiguousarray(a.data.transpose(axes))

    def bwd(g):
        return (g.transpose(inv),)

    return _record(out, (a,), bwd)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of zero tensors")
    axis = axis % ts[0].ndim
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(ts), bwd)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries from ``start`` along ``axis``."""
    a = as_tensor(a)
    axis = axis % a.ndim
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(
            f"narrow [{start}:{start + length}] out of range for axis {axis} "
            f"of shape {a.shape}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = np.ascontiguousarray(a.data[idx])
    shape = a.shape

    def bwd(g):
        gx = np.zeros(shape)
        gx[idx] = g
        return (gx,)

    return _record(out, (a,), bwd)


def gather(a, axis: int, indices) -> Tensor:
    """Take rows at ``indices`` along ``axis`` (duplicates allowed)."""
    a = as_tensor(a)
    axis = axis % a.ndim
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("gather indices must be one-dimensional")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[axis]):
        raise ShapeError(f"gather index out of range for axis {axis} of shape {a.shape}")
    out = np.take(a.data, idx, axis=axis)
    shape = a.shape

    def bwd(g):
        gx = np.zeros(shape)
        sel = [slice(None)] * len(shape)
        sel[axis] = idx
        np.add.at(gx, tuple(sel), g)
        return (gx,)

    return _record(out, (a,), bwd)


def scatter_rows(updates, axis: int, indices, out_length: int) -> Tensor:
    """Inverse of :func:`gather` for disjoint indices: place rows of
    ``updates`` at ``indices`` along ``axis`` of a zero tensor."""
    u = as_tensor(updates)
    axis = axis % u.ndim
    idx = np.asarray(indices, dtype=np.intp)
    shape = list(u.shape)
    shape[axis] = out_length
    out = np.zeros(shape)
    sel = [slice(None)] * len(shape)
    sel[axis] = idx
    out[tuple(sel)] = u.data

    def bwd(g):
        return (np.take(g, idx, axis=axis),)

    return _record(out, (u,), bwd)


# ---------------------------------------------------------------------------
# linear algebra and normalization
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product; leading dimensions broadcast as in numpy."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    # overflow surfaces as a non-finite product via the post-op check
    with np.errstate(over="ignore", invalid="ignore"):
        out = a.data @ b.data
    ad, bd = a.data, b.data

    def bwd(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), bwd)


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-shifted)."""
    a = as_tensor(a)
    axis = axis % a.ndim
    if a.shape[axis] == 0:
        raise ShapeError("softmax along an empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _record(out, (a,), bwd)


def layer_norm(a, gain, bias, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = mean(a, axis=-1, keepdims=True)
    centered = sub(a, mu)
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    inv = powc(add(var, Tensor(np.full((1,) * as_tensor(a).ndim, eps))), -0.5)
    return add(mul(mul(centered, inv), gain), bias)


__all__ = [
    "Tensor", "Tape", "active_tape", "backward", "set_finite_checks",
    "as_tensor", "zeros", "ones",
    "add", "sub", "mul", "div", "neg", "exp", "log", "powc",
    "sigmoid", "softplus", "gelu", "where",
    "sum_", "mean", "variance",
    "reshape", "transpose", "concat", "narrow", "gather", "scatter_rows",
    "matmul", "softmax", "layer_norm",
]
