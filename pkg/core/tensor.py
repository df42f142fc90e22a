"""
Reverse-mode differentiable arrays for ChunkFlow Engine.

A Tensor wraps a numpy array. While a Tape is active, every primitive whose
inputs require gradients appends a record (op name, inputs, output, vector-
Jacobian product) to that tape. Tape.backward walks the records in exact
reverse order and returns one gradient per requested parameter.

Usage:
    with Tape() as tape:
        loss = ((x @ w) ** 2).sum()
    (g_w,) = tape.backward(loss, [w])
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy.special import erf

from core.errors import ContractError, DimensionError, NonFiniteError

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float64

# Stack of active tapes; a None entry disables recording (no_grad).
_TAPES: list = []


def current_tape():
    """Innermost active tape, or None when not recording."""
    return _TAPES[-1] if _TAPES else None


class no_grad:
    """Context manager that suspends recording on every tape."""

    def __enter__(self):
        _TAPES.append(None)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False


class Tensor:
    """A float array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_ufunc__ = None  # numpy defers to our reflected operators

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        self.data = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    # --- introspection ---
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def is_finite(self):
        """Validity check: False when any element is NaN or Inf."""
        return bool(np.isfinite(self.data).all())

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{flag}{label})"

    # --- operators ---
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # --- method forms ---
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(value) -> Tensor:
    """Wrap non-tensors as constants."""
    return value if isinstance(value, Tensor) else Tensor(value)


def stop_gradient(x: Tensor) -> Tensor:
    """sg(x): same values, never recorded, never differentiated."""
    return Tensor(as_tensor(x).data)


def check_finite(t: Tensor, name: str):
    if not t.is_finite():
        raise NonFiniteError(f"Non-finite values in {name}", name=name)


@dataclass
class TapeRecord:
    op: str
    inputs: tuple
    output: Tensor
    vjp: Callable


class Tape:
    """Ordered log of primitive operations, replayed backwards by backward()."""

    def __init__(self):
        self.records: List[TapeRecord] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def __len__(self):
        return len(self.records)

    def ops(self):
        return [r.op for r in self.records]

    def backward(self, loss: Tensor, params: Optional[Sequence[Tensor]] = None):
        """
        Gradients of a scalar loss with respect to params.

        Parameters not reached from the loss get zeros. Forward activations
        are never mutated, so calling backward twice yields identical results.
        Each param's .grad is overwritten with its gradient.
        """
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            shape = getattr(loss, "shape", type(loss).__name__)
            raise ContractError(f"backward needs a scalar loss, got shape {shape}")

        grads = {id(loss): np.ones_like(loss.data)}
        for record in reversed(self.records):
            g = grads.get(id(record.output))
            if g is None:
                continue
            input_grads = record.vjp(g)
            for inp, ig in zip(record.inputs, input_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                grads[key] = ig if key not in grads else grads[key] + ig

        params = list(params) if params is not None else []
        out = []
        for p in params:
            g = grads.get(id(p))
            g = np.zeros_like(p.data) if g is None else np.array(g, dtype=p.data.dtype).reshape(p.shape)
            p.grad = g
            out.append(g)
        return out


def backward(tape: Tape, loss: Tensor, params: Sequence[Tensor]):
    """Functional form of Tape.backward."""
    return tape.backward(loss, params)


def _record(op, inputs, out_data, vjp) -> Tensor:
    out = Tensor(out_data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append(TapeRecord(op, tuple(inputs), out, vjp))
    return out


def unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to shape."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# =============================================================================
# ELEMENTWISE PRIMITIVES
# =============================================================================

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record("mul", (a, b), a.data * b.data,
                   lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        ga = unbroadcast(g / b.data, a.shape)
        gb = unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _record("div", (a, b), a.data / b.data, vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    if isinstance(exponent, Tensor):
        raise ContractError("power supports scalar exponents only")
    p = float(exponent)
    out = a.data ** p
    return _record("pow", (a,), out, lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", (a,), out, lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _record("log", (a,), np.log(a.data), lambda g: (g / a.data,))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    a = as_tensor(a)
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out = a.data * cdf

    def vjp(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * a.data * a.data)
        return (g * (cdf + a.data * pdf),)

    return _record("gelu", (a,), out, vjp)


# =============================================================================
# LINEAR ALGEBRA AND REDUCTIONS
# =============================================================================

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def vjp(g):
        ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _record("matmul", (a, b), np.matmul(a.data, b.data), vjp)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _record("sum", (a,), out, vjp)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record("transpose", (a,), a.data.transpose(axes), lambda g: (g.transpose(inverse),))


def swapaxes(a, axis1, axis2) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[axis1], axes[axis2] = axes[axis2], axes[axis1]
    return transpose(a, axes)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        z = np.zeros_like(a.data)
        np.add.at(z, index, g)
        return (z,)

    return _record("getitem", (a,), a.data[index], vjp)


def take(a, indices, axis=0) -> Tensor:
    """Gather along axis (embedding lookup, kv-head expansion)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    axis = axis % a.ndim
    out = np.take(a.data, idx, axis=axis)

    def vjp(g):
        z = np.zeros_like(a.data)
        z_view = np.moveaxis(z, axis, 0)
        g_view = np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(idx.ndim)))
        np.add.at(z_view, idx, g_view)
        return (z,)

    return _record("take", (a,), out, vjp)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _record("concat", tuple(tensors), out, lambda g: tuple(np.split(g, splits, axis=axis)))


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _record("softmax", (a,), s, vjp)


def log_softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax", (a,), out, vjp)


# =============================================================================
# TEMPORAL WINDOWING (conv building blocks)
# =============================================================================

def _window_map(n_in, kernel, stride, pad, n_out):
    """Pairs (t, j) -> time index t*stride + j - pad, restricted to [0, n_out)."""
    t = np.arange(n_in)[:, None]
    j = np.arange(kernel)[None, :]
    pos = t * stride + j - pad
    ts, js = np.nonzero((pos >= 0) & (pos < n_out))
    return ts, js, pos[ts, js]


def unfold_time(x, kernel: int, stride: int, pad: int, out_len: int) -> Tensor:
    """(B, T, C) -> (B, out_len, kernel, C) sliding windows with zero padding."""
    x = as_tensor(x)
    B, T, C = x.shape
    ts, js, src = _window_map(out_len, kernel, stride, pad, T)
    out = np.zeros((B, out_len, kernel, C), dtype=x.data.dtype)
    out[:, ts, js, :] = x.data[:, src, :]

    def vjp(g):
        z = np.zeros_like(x.data)
        np.add.at(z, (slice(None), src), g[:, ts, js, :])
        return (z,)

    return _record("unfold_time", (x,), out, vjp)


def fold_time(cols, stride: int, pad: int, out_len: int) -> Tensor:
    """(B, T, kernel, C) -> (B, out_len, C) overlap-add; adjoint of unfold_time."""
    cols = as_tensor(cols)
    B, T, kernel, C = cols.shape
    ts, js, dst = _window_map(T, kernel, stride, pad, out_len)
    out = np.zeros((B, out_len, C), dtype=cols.data.dtype)
    np.add.at(out, (slice(None), dst), cols.data[:, ts, js, :])

    def vjp(g):
        z = np.zeros_like(cols.data)
        z[:, ts, js, :] = g[:, dst, :]
        return (z,)

    return _record("fold_time", (cols,), out, vjp)
