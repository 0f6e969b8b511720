"""Dense float64 tensors with reverse-mode differentiation on an explicit tape.

Storage is a C-contiguous float64 numpy array (row-major flat memory).
Every differentiable op records an adjoint closure on the thread-local
active tape; ``backward`` replays the tape in reverse execution order,
which is a valid topological order because execution is sequential.
Outside a ``with Tape():`` block ops run untracked (evaluation mode).

Broadcasting follows numpy semantics; adjoints reduce gradients back to
the operand shape by summing over broadcast axes, which covers the cases
the model needs (bias add, scalar multiply, mask multiply).
"""

from __future__ import annotations

import math
import threading

import numpy as np

from .errors import ContractError, ShapeError

_state = threading.local()


def _tape_stack():
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = []
        _state.stack = stack
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed ops: (output tensor, adjoint closure)."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def clear(self):
        self.nodes.clear()


class Tensor:
    """Dense row-major float64 value with optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "tape")

    def __init__(self, data, requires_grad=False):
        if not (
            isinstance(data, np.ndarray)
            and data.dtype == np.float64
            and data.flags.c_contiguous
        ):
            # asarray first: ascontiguousarray alone would promote 0-d to 1-d
            data = np.asarray(data, dtype=np.float64)
            if not data.flags.c_contiguous:
                data = np.ascontiguousarray(data)
        self.data = data
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; constants are wrapped as untracked tensors
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

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def param(data):
    """Leaf tensor that accumulates gradients (a learnable parameter)."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _result(data, inputs, adjoint):
    """Wrap an op result; record the adjoint if taping and any input is live."""
    tape = active_tape()
    out = Tensor(data)
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape = tape
        tape.nodes.append((out, adjoint))
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    """Sum g over axes that numpy broadcasting expanded, back to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    if g.shape != tuple(shape):
        g = g.reshape(shape)
    return g


def backward(loss):
    """Populate d(loss)/d(t) for every requires_grad tensor on the loss's tape.

    Gradients of tensors used in several branches accumulate by addition.
    Calling backward on a constant (untracked) scalar is a no-op.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor loss")
    if loss.data.size != 1:
        raise ContractError(
            f"backward expects a scalar loss, got shape {loss.data.shape}"
        )
    tape = loss.tape
    if tape is None:
        return
    loss.grad = np.ones_like(loss.data)
    for out, adjoint in reversed(tape.nodes):
        if out.grad is None:
            continue
        adjoint(out.grad)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def adjoint(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _result(a.data + b.data, (a, b), adjoint)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def adjoint(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _result(a.data - b.data, (a, b), adjoint)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def adjoint(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _result(a.data * b.data, (a, b), adjoint)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def adjoint(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _result(a.data / b.data, (a, b), adjoint)


def neg(a):
    a = as_tensor(a)

    def adjoint(g):
        _accum(a, -g)

    return _result(-a.data, (a,), adjoint)


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def adjoint(g):
        _accum(a, g * out_data)

    return _result(out_data, (a,), adjoint)


def log(a):
    a = as_tensor(a)

    def adjoint(g):
        _accum(a, g / a.data)

    return _result(np.log(a.data), (a,), adjoint)


def tanh(a):
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def adjoint(g):
        _accum(a, g * (1.0 - out_data * out_data))

    return _result(out_data, (a,), adjoint)


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def adjoint(g):
        _accum(a, g * out_data * (1.0 - out_data))

    return _result(out_data, (a,), adjoint)


def softplus(a):
    a = as_tensor(a)
    out_data = np.logaddexp(0.0, a.data)

    def adjoint(g):
        s = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                     np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
        _accum(a, g * s)

    return _result(out_data, (a,), adjoint)


def absolute(a):
    a = as_tensor(a)

    def adjoint(g):
        _accum(a, g * np.sign(a.data))

    return _result(np.abs(a.data), (a,), adjoint)


def clip(a, lo, hi):
    """Clamp to [lo, hi]; gradient passes only where unclipped."""
    a = as_tensor(a)
    out_data = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def adjoint(g):
        _accum(a, g * inside)

    return _result(out_data, (a,), adjoint)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """tanh-form GELU: 0.5*x*(1 + tanh(c*(x + 0.044715*x^3))), c = sqrt(2/pi)."""
    a = as_tensor(a)
    inner = _GELU_C * (a.data + 0.044715 * a.data ** 3)
    t = np.tanh(inner)
    out_data = 0.5 * a.data * (1.0 + t)

    def adjoint(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * a.data ** 2)
        local = 0.5 * (1.0 + t) + 0.5 * a.data * (1.0 - t * t) * dinner
        _accum(a, g * local)

    return _result(out_data, (a,), adjoint)


# ---------------------------------------------------------------------------
# linear algebra and structure


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(
            f"matmul needs >=2-D operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}"
        )

    def adjoint(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accum(a, _unbroadcast(ga, a.data.shape))
        _accum(b, _unbroadcast(gb, b.data.shape))

    return _result(np.matmul(a.data, b.data), (a, b), adjoint)


def reshape(a, shape):
    a = as_tensor(a)
    src = a.data.shape

    def adjoint(g):
        _accum(a, g.reshape(src))

    return _result(a.data.reshape(shape), (a,), adjoint)


def transpose(a, axes):
    a = as_tensor(a)
    inverse = np.argsort(axes)

    def adjoint(g):
        _accum(a, g.transpose(inverse))

    return _result(np.ascontiguousarray(a.data.transpose(axes)), (a,), adjoint)


def flip(a, axis):
    a = as_tensor(a)

    def adjoint(g):
        _accum(a, np.flip(g, axis=axis))

    return _result(np.ascontiguousarray(np.flip(a.data, axis=axis)), (a,), adjoint)


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def adjoint(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _result(np.concatenate([t.data for t in tensors], axis=axis),
                   tuple(tensors), adjoint)


def stack(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]

    def adjoint(g):
        for i, t in enumerate(tensors):
            _accum(t, np.take(g, i, axis=axis))

    return _result(np.stack([t.data for t in tensors], axis=axis),
                   tuple(tensors), adjoint)


def select(a, axis, index):
    """Take one slice along `axis`, dropping that axis."""
    a = as_tensor(a)
    src = a.data.shape

    def adjoint(g):
        buf = np.zeros(src)
        idx = [slice(None)] * len(src)
        idx[axis] = index
        buf[tuple(idx)] = g
        _accum(a, buf)

    # np.take copies; asarray keeps a 0-d result 0-d (ascontiguousarray would
    # promote it to 1-d)
    return _result(np.asarray(np.take(a.data, index, axis=axis), dtype=np.float64),
                   (a,), adjoint)


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along `axis`, keeping the axis."""
    a = as_tensor(a)
    src = a.data.shape
    sl = [slice(None)] * len(src)
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def adjoint(g):
        buf = np.zeros(src)
        buf[sl] = g
        _accum(a, buf)

    return _result(np.ascontiguousarray(a.data[sl]), (a,), adjoint)


def take_rows(a, indices, axis=0):
    """Gather rows along `axis` by an integer index array."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    src = a.data.shape

    def adjoint(g):
        buf = np.zeros(src)
        np.add.at(buf, _axis_index(indices, axis, len(src)), g)
        _accum(a, buf)

    return _result(np.ascontiguousarray(np.take(a.data, indices, axis=axis)),
                   (a,), adjoint)


def scatter_rows(a, indices, length, axis=0):
    """Spread rows of `a` to positions `indices` of a zero tensor sized `length`."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    shape = list(a.data.shape)
    shape[axis] = length
    out_data = np.zeros(shape)
    out_data[_axis_index(indices, axis, len(shape))] = a.data

    def adjoint(g):
        _accum(a, np.ascontiguousarray(np.take(g, indices, axis=axis)))

    return _result(out_data, (a,), adjoint)


def _axis_index(indices, axis, ndim):
    idx = [slice(None)] * ndim
    idx[axis] = indices
    return tuple(idx)


# ---------------------------------------------------------------------------
# reductions and normalizations


def tensor_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    src = a.data.shape

    def adjoint(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, src).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, src).copy())

    return _result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), adjoint)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax_rows(a):
    """Numerically stabilized softmax over the last axis.

    Row-max subtraction is a constant shift per row, so the adjoint is the
    standard softmax one. Rows containing -inf logits get zero probability
    there (masked attention); at least one finite logit per row is assumed.
    """
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / np.sum(e, axis=-1, keepdims=True)

    def adjoint(g):
        dot = np.sum(g * out_data, axis=-1, keepdims=True)
        _accum(a, out_data * (g - dot))

    return _result(out_data, (a,), adjoint)


def log_softmax_rows(a):
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    out_data = shifted - lse
    soft = np.exp(out_data)

    def adjoint(g):
        _accum(a, g - soft * np.sum(g, axis=-1, keepdims=True))

    return _result(out_data, (a,), adjoint)


def layer_norm(a, gamma, beta, eps=1e-6):
    """Per-row (last axis) normalization to mean 0 / variance 1, then affine."""
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    d = a.data.shape[-1]
    if d < 2:
        raise ShapeError("layer_norm needs a feature axis of size >= 2")
    mu = np.mean(a.data, axis=-1, keepdims=True)
    centered = a.data - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out_data = xhat * gamma.data + beta.data

    def adjoint(g):
        gy = g * gamma.data
        term = gy - np.mean(gy, axis=-1, keepdims=True) \
            - xhat * np.mean(gy * xhat, axis=-1, keepdims=True)
        _accum(a, term * inv)
        flat_axes = tuple(range(a.data.ndim - 1))
        _accum(gamma, np.sum(g * xhat, axis=flat_axes))
        _accum(beta, np.sum(g, axis=flat_axes))

    return _result(out_data, (a, gamma, beta), adjoint)
