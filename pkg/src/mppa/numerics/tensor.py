"""A small reverse-mode autodiff tensor over float64 numpy arrays.

Only the operations the model needs are provided. Each op computes its value
eagerly and, when any input requires a gradient, records a closure that maps
the output gradient to input gradients. ``Tensor.backward`` walks the recorded
graph in reverse topological order.

Values must stay finite: every op checks its output and raises
:class:`NonFiniteError` on NaN or Inf.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from mppa.numerics import _kernels
from mppa.numerics.fft import fft_arrays


class NonFiniteError(FloatingPointError):
    pass


class ShapeError(ValueError):
    pass


def _check_finite(data: np.ndarray, op: str) -> None:
    # NaN and Inf survive a sum, so one reduction settles the common case;
    # a non-finite sum may just be overflow and gets the exact test
    if not math.isfinite(data.sum()) and not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite value produced by {op}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = "leaf"):
        if type(data) is not np.ndarray or data.dtype != np.float64:
            data = np.asarray(data, dtype=np.float64)
        _check_finite(data, op)
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _result(data, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
        # hot path: ops already produce float64 arrays, so skip __init__'s coercion
        if type(data) is not np.ndarray or data.dtype != np.float64:
            data = np.asarray(data, dtype=np.float64)
        if not math.isfinite(data.sum()) and not np.isfinite(data).all():
            raise NonFiniteError(f"non-finite value produced by {op}")
        t = Tensor.__new__(Tensor)
        t.data = data
        t.grad = None
        t.op = op
        for p in parents:
            if p.requires_grad:
                t.requires_grad = True
                t._parents = tuple(parents)
                t._backward = backward
                return t
        t.requires_grad = False
        t._parents = ()
        t._backward = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.shape)
        else:
            self.grad = self.grad + g

    def backward(self, grad=None) -> None:
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=np.float64)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operators -------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if type(x) is float and math.isfinite(x):
        return Tensor._result(np.array(x), (), None, "leaf")
    return Tensor(x)


# -- elementwise ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(g, b.shape))

    return Tensor._result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(-g, b.shape))

    return Tensor._result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return Tensor._result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * out / b.data, b.shape))

    return Tensor._result(out, (a, b), backward, "div")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError instead
        out = np.exp(x.data)
    return Tensor._result(out, (x,), lambda g: x._accum(g * out), "exp")


def log(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        raise NonFiniteError("log of a non-positive value")
    return Tensor._result(np.log(x.data), (x,), lambda g: x._accum(g / x.data), "log")


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    # exp of a non-positive argument only, so nothing overflows
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(x: Tensor) -> Tensor:
    out = sigmoid_np(x.data)
    return Tensor._result(out, (x,), lambda g: x._accum(g * out * (1.0 - out)), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor._result(out, (x,), lambda g: x._accum(g * (1.0 - out * out)), "tanh")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return Tensor._result(out, (x,), lambda g: x._accum(g * 0.5 / out), "sqrt")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * (v * v * v))
    th = np.tanh(inner)
    out = 0.5 * v * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        x._accum(g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * dinner))

    return Tensor._result(out, (x,), backward, "gelu")


# -- shape ------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return Tensor._result(x.data.reshape(shape), (x,), lambda g: x._accum(g.reshape(old)), "reshape")


def transpose(x: Tensor, axes=()) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._result(
        np.ascontiguousarray(x.data.transpose(axes)),
        (x,),
        lambda g: x._accum(g.transpose(inv)),
        "transpose",
    )


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def getitem(x: Tensor, idx) -> Tensor:
    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        x._accum(full)

    return Tensor._result(np.array(x.data[idx]), (x,), backward, "getitem")


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Embedding lookup: ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids)

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        table._accum(full)

    return Tensor._result(table.data[ids], (table,), backward, "take_rows")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        for x, part in zip(xs, np.split(g, sizes, axis=axis)):
            x._accum(part)

    return Tensor._result(out, xs, backward, "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.stack([x.data for x in xs], axis=axis)

    def backward(g):
        for i, x in enumerate(xs):
            x._accum(np.take(g, i, axis=axis))

    return Tensor._result(out, xs, backward, "stack")


def pad_axis(x: Tensor, after: int, axis: int) -> Tensor:
    """Append ``after`` zero slices along ``axis``."""
    if after == 0:
        return x
    shape = list(x.shape)
    shape[axis] = after
    return concat([x, Tensor(np.zeros(shape))], axis=axis)


# -- reductions ---------------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Sum with a fixed left-to-right order along each reduced axis."""
    axes = _norm_axis(axis, x.ndim)
    out = x.data
    for ax in sorted(axes, reverse=True):
        out = _kernels.seq_sum(out, axis=ax, keepdims=True)
    kept_shape = out.shape
    if not keepdims:
        out = out.reshape([s for i, s in enumerate(x.shape) if i not in axes])

    def backward(g):
        x._accum(np.broadcast_to(g.reshape(kept_shape), x.shape))

    return Tensor._result(out, (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis, keepdims) / float(count)


def cumsum(x: Tensor, axis: int = -1) -> Tensor:
    def backward(g):
        x._accum(np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis))

    return Tensor._result(np.cumsum(x.data, axis=axis), (x,), backward, "cumsum")


# -- linear algebra -----------------------------------------------------------------


def matmul_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Fixed-order product of (..., m, k) with (k, p) or (..., k, p)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim == 2:
        lead = a.shape[:-1]
        out = _kernels.mm2d(a.reshape(-1, a.shape[-1]), b)
        return out.reshape(lead + (b.shape[1],))
    batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    a3 = np.broadcast_to(a, batch + a.shape[-2:]).reshape((-1,) + a.shape[-2:])
    b3 = np.broadcast_to(b, batch + b.shape[-2:]).reshape((-1,) + b.shape[-2:])
    return _kernels.bmm(a3, b3).reshape(batch + (a.shape[-2], b.shape[-1]))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = matmul_np(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(matmul_np(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            if b.ndim == 2:
                a2 = a.data.reshape(-1, a.shape[-1])
                b._accum(_kernels.mm2d(a2.T, g.reshape(-1, g.shape[-1])))
            else:
                b._accum(_unbroadcast(matmul_np(np.swapaxes(a.data, -1, -2), g), b.shape))

    return Tensor._result(out, (a, b), backward, "matmul")


# -- normalisation / probability -------------------------------------------------------


def softmax_np(scores: np.ndarray, admissible: np.ndarray | None = None) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    if admissible is None:
        admissible = np.ones(s.shape, dtype=bool)
    admissible = np.broadcast_to(admissible, s.shape)
    if not admissible.any(axis=-1).all():
        raise ValueError("softmax row with every entry masked cannot be normalised")
    masked = np.where(admissible, s, -np.inf)
    m = masked.max(axis=-1, keepdims=True)
    e = np.where(admissible, np.exp(masked - m), 0.0)
    return e / _kernels.seq_sum(e, axis=-1, keepdims=True)


def softmax(x: Tensor, admissible: np.ndarray | None = None) -> Tensor:
    """Row softmax over the last axis; positions where ``admissible`` is False get exactly 0."""
    p = softmax_np(x.data, admissible)

    def backward(g):
        dot = np.sum(g * p, axis=-1, keepdims=True)
        x._accum(p * (g - dot))

    return Tensor._result(p, (x,), backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    mu = _kernels.seq_sum(x.data, axis=-1, keepdims=True) / d
    xc = x.data - mu
    var = _kernels.seq_sum(xc * xc, axis=-1, keepdims=True) / d
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            gain._accum(_unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            bias._accum(_unbroadcast(g, bias.shape))
        if x.requires_grad:
            gh = g * gain.data
            x._accum(inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)))

    return Tensor._result(out, (x, gain, bias), backward, "layer_norm")


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(_kernels.seq_sum(np.exp(z), axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Mean next-token NLL and the per-token losses (targets index the last axis)."""
    targets = np.asarray(targets)
    logp = log_softmax_np(logits.data)
    per_token = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    count = per_token.size
    loss = _kernels.seq_sum(per_token.reshape(-1)) / count

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, targets[..., None], np.take_along_axis(grad, targets[..., None], -1) - 1.0, -1)
        logits._accum(grad * (float(g) / count))

    return Tensor._result(loss, (logits,), backward, "cross_entropy"), per_token


# -- spectral ----------------------------------------------------------------------------


def fft_magnitude(x: Tensor, axis: int) -> Tensor:
    """|FFT(x)| along ``axis`` for real input.

    The gradient treats bins with exactly zero magnitude as having zero
    gradient (a subgradient choice).
    """
    moved = np.moveaxis(x.data, axis, -1)
    re, im = fft_arrays(moved, np.zeros_like(moved))
    mag = np.sqrt(re * re + im * im)

    def backward(g):
        gm = np.moveaxis(g, axis, -1)
        safe = np.where(mag > 0, mag, 1.0)
        gr = np.where(mag > 0, gm * re / safe, 0.0)
        gi = np.where(mag > 0, gm * im / safe, 0.0)
        # adjoint of the real-input DFT: Re(FFT(gr - i*gi))
        back_re, _ = fft_arrays(gr, -gi)
        x._accum(np.moveaxis(back_re, -1, axis))

    return Tensor._result(np.moveaxis(mag, -1, axis), (x,), backward, "fft_magnitude")


def parameters_require_grad(ts: Iterable[Tensor]) -> None:
    for t in ts:
        t.requires_grad = True
        t.grad = None
