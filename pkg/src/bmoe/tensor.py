"""Minimal dense tensor with reverse-mode automatic differentiation.

Values are numpy arrays in row-major layout; the float width (32 or 64 bit)
is a per-run choice made when leaves are created and is preserved by every
op. Operations executed while a tape is active are recorded in order, and
``backward`` replays the tape in reverse, accumulating gradients into
``Tensor.grad`` (add, never overwrite). Gradients are cleared explicitly
with ``zero_grads``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(ValueError):
    """Raised when an operation's calling contract is violated."""


_DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle post-op finiteness checks (slow; used by tests and gradcheck)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


class Tape:
    """Ordered record of operations for one differentiation scope.

    Entries are appended in execution order, so every entry's inputs were
    recorded (or are leaves) before the entry itself; backward walks the
    list in reverse.
    """

    __slots__ = ("entries",)

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def record(self, out: "Tensor", inputs: tuple["Tensor", ...], backward_fn: Callable) -> None:
        out._tape = self
        out._tape_index = len(self.entries)
        self.entries.append((out, inputs, backward_fn))

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()


# A default tape is always present so ad-hoc use (tests, experiments) works
# without a context manager; training loops push a fresh Tape per step so
# recorded graphs are released promptly.
_TAPE_STACK: list[Tape] = [Tape()]
_GRAD_ENABLED = True


def tape() -> Tape:
    """A fresh recording scope: ``with tape(): loss = ...; backward(loss)``."""
    return Tape()


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (pure inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Dense n-dimensional float array, the node type of the tape graph."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_tape_index")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self._tape_index = -1

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- gradient plumbing --------------------------------------------------

    def _accumulate_grad(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        backward(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    # -- operator sugar -----------------------------------------------------

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _record(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    if _DEBUG_CHECKS and not np.all(np.isfinite(out_data)):
        raise FloatingPointError("non-finite value produced by a forward op")
    out = Tensor(out_data)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPE_STACK[-1].record(out, inputs, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- arithmetic ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    out = a.data + b.data

    def bwd(g):
        a._accumulate_grad(_unbroadcast(g, a.shape))
        b._accumulate_grad(_unbroadcast(g, b.shape))

    return _record(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    out = a.data - b.data

    def bwd(g):
        a._accumulate_grad(_unbroadcast(g, a.shape))
        b._accumulate_grad(_unbroadcast(-g, b.shape))

    return _record(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    out = a.data * b.data

    def bwd(g):
        a._accumulate_grad(_unbroadcast(g * b.data, a.shape))
        b._accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _record(out, (a, b), bwd)


def div(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    out = a.data / b.data

    def bwd(g):
        a._accumulate_grad(_unbroadcast(g / b.data, a.shape))
        b._accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _record(out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        a._accumulate_grad(-g)

    return _record(-a.data, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading dimensions broadcast, last two are the matrix."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        a._accumulate_grad(_unbroadcast(ga, a.shape))
        b._accumulate_grad(_unbroadcast(gb, b.shape))

    return _record(out, (a, b), bwd)


# -- shape ops ----------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    out = a.data.reshape(shape)

    def bwd(g):
        a._accumulate_grad(g.reshape(old))

    return _record(out, (a,), bwd)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 1, -1, -1))
    axes = tuple(axes)
    inv = np.argsort(axes)
    out = np.transpose(a.data, axes)

    def bwd(g):
        a._accumulate_grad(np.transpose(g, inv))

    return _record(out, (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of zero tensors")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t._accumulate_grad(g[tuple(idx)])

    return _record(out, tuple(tensors), bwd)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("stack of zero tensors")
    out = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g):
        parts = np.moveaxis(g, axis, 0)
        for t, part in zip(tensors, parts):
            t._accumulate_grad(part)

    return _record(out, tuple(tensors), bwd)


def slice_(a: Tensor, key) -> Tensor:
    """Slice with a tuple of ``slice`` objects (rank preserved)."""
    if not isinstance(key, tuple):
        key = (key,)
    if any(not isinstance(k, slice) for k in key):
        raise ContractError("slice_ accepts slice objects only")
    out = a.data[key]
    in_shape = a.shape

    def bwd(g):
        full = np.zeros(in_shape, dtype=g.dtype)
        full[key] = g
        a._accumulate_grad(full)

    return _record(out, (a,), bwd)


# -- reductions ---------------------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            a._accumulate_grad(np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=False))
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        a._accumulate_grad(np.broadcast_to(gg, a.shape).copy())

    return _record(out, (a,), bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    denom = a.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def bwd(g):
        if axis is None:
            a._accumulate_grad(np.broadcast_to(g / denom, a.shape).astype(a.data.dtype, copy=False))
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        a._accumulate_grad((np.broadcast_to(gg, a.shape) / denom).astype(a.data.dtype, copy=False))

    return _record(out, (a,), bwd)


def sorted_sum(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Sum along ``axis`` that is bitwise invariant to permutations along it.

    Values are sorted before reduction, so any reordering of slices along
    the axis produces the identical floating-point result. Used where a
    reduction over mixture components must not depend on component order.
    """
    out = np.sort(a.data, axis=axis).sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        a._accumulate_grad(np.broadcast_to(gg, a.shape).copy())

    return _record(out, (a,), bwd)


# -- elementwise nonlinearities ------------------------------------------------


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g):
        a._accumulate_grad(g * out)

    return _record(out, (a,), bwd)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def bwd(g):
        a._accumulate_grad(g / a.data)

    return _record(out, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bwd(g):
        a._accumulate_grad(g * (1.0 - out * out))

    return _record(out, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        a._accumulate_grad(g * out * (1.0 - out))

    return _record(out, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def bwd(g):
        a._accumulate_grad(g * (a.data > 0))

    return _record(out, (a,), bwd)


def pow_(a: Tensor, p: float) -> Tensor:
    out = a.data ** p

    def bwd(g):
        a._accumulate_grad(g * p * a.data ** (p - 1.0))

    return _record(out, (a,), bwd)


# -- softmax family -------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-subtracted)."""
    if x.shape[axis if axis >= 0 else x.ndim + axis] < 1:
        raise ShapeError(f"softmax over empty axis {axis} of shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        x._accumulate_grad(out * (g - dot))

    return _record(out, (x,), bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis if axis >= 0 else x.ndim + axis] < 1:
        raise ShapeError(f"log_softmax over empty axis {axis} of shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bwd(g):
        soft = np.exp(out)
        x._accumulate_grad(g - soft * g.sum(axis=axis, keepdims=True))

    return _record(out, (x,), bwd)


# -- structured ops -------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """2-d convolution, stride 1, zero 'same' padding.

    ``x``: [..., H, W, Cin]; ``weight``: [kh, kw, Cin, Cout]; ``bias``: [Cout].
    Implemented as im2col + matmul with an explicit scatter-add backward.
    """
    kh, kw, cin, cout = weight.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"conv2d channels disagree: input {x.shape} vs weight {weight.shape}")
    lead = x.shape[:-3]
    h, w = x.shape[-3], x.shape[-2]
    n = int(np.prod(lead)) if lead else 1
    xr = x.data.reshape(n, h, w, cin)
    ph, pw = kh // 2, kw // 2
    xp = np.pad(xr, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    cols = np.empty((n, h, w, kh * kw * cin), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[..., (i * kw + j) * cin:(i * kw + j + 1) * cin] = xp[:, i:i + h, j:j + w, :]
    wmat = weight.data.reshape(kh * kw * cin, cout)
    out = cols.reshape(-1, kh * kw * cin) @ wmat + bias.data
    out = out.reshape(*lead, h, w, cout)

    def bwd(g):
        gm = g.reshape(-1, cout)
        weight._accumulate_grad((cols.reshape(-1, kh * kw * cin).T @ gm).reshape(weight.shape))
        bias._accumulate_grad(gm.sum(axis=0))
        gcols = (gm @ wmat.T).reshape(n, h, w, kh * kw * cin)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + h, j:j + w, :] += gcols[..., (i * kw + j) * cin:(i * kw + j + 1) * cin]
        gx = gxp[:, ph:ph + h, pw:pw + w, :] if (ph or pw) else gxp
        x._accumulate_grad(gx.reshape(x.shape))

    return _record(out, (x, weight, bias), bwd)


def depthwise_time_conv(x: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel temporal convolution with zero 'same' padding.

    ``x``: [..., T, D]; ``kernel``: [k, D] with odd k. Output length T.
    """
    k, d = kernel.shape
    if k % 2 != 1:
        raise ContractError(f"temporal kernel size must be odd, got {k}")
    if x.shape[-1] != d:
        raise ShapeError(f"depthwise conv channels disagree: {x.shape} vs kernel {kernel.shape}")
    t = x.shape[-2]
    half = k // 2
    pad = [(0, 0)] * (x.ndim - 2) + [(half, half), (0, 0)]
    xp = np.pad(x.data, pad)
    out = np.zeros_like(x.data)
    for j in range(k):
        out += xp[..., j:j + t, :] * kernel.data[j]

    def bwd(g):
        gk = np.zeros_like(kernel.data)
        gxp = np.zeros_like(xp)
        flat = xp.reshape(-1, t + 2 * half, d)
        gflat = g.reshape(-1, t, d)
        for j in range(k):
            gk[j] = (flat[:, j:j + t, :] * gflat).sum(axis=(0, 1))
            gxp[..., j:j + t, :] += g * kernel.data[j]
        x._accumulate_grad(gxp[..., half:half + t, :])
        kernel._accumulate_grad(gk)

    return _record(out, (x, kernel), bwd)


# -- backward -------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate ``grad`` of every reachable ``requires_grad`` tensor.

    Repeated calls accumulate; call ``zero_grads`` between steps.
    """
    if loss.shape != ():
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    loss._accumulate_grad(np.ones((), dtype=loss.data.dtype))
    tp = loss._tape
    if tp is None:
        return  # constant loss: nothing reachable, all gradients stay zero
    for out, inputs, bwd_fn in reversed(tp.entries[: loss._tape_index + 1]):
        if out.grad is None:
            continue
        g = out.grad
        # consume the intermediate's grad so a later backward() pass
        # re-propagates only its own contribution (leaves keep theirs)
        out.grad = None
        bwd_fn(g)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
