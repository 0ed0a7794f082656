"""Dense tensors with a reverse-mode differentiation tape.

Operations on tensors that require gradients are appended to a per-thread
:class:`Tape`. Creation order is a valid topological order, so ``backward``
simply walks the tape in reverse. A tape may be consumed only once.
"""

from __future__ import annotations

import contextlib
import os
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DEFAULT_DTYPE",
    "NumericalError",
    "Parameter",
    "Tape",
    "Tensor",
    "abs",
    "add",
    "avg_pool2d",
    "concat",
    "conv2d",
    "current_tape",
    "custom_activation",
    "div",
    "exp",
    "log",
    "log_softmax",
    "matmul",
    "mean",
    "minimum",
    "mul",
    "no_grad",
    "reshape",
    "sigmoid",
    "softmax",
    "sub",
    "sum",
    "tdbn_forward",
]

MAX_RANK = 4

# Double precision is the default; CFSNN_DTYPE=float32 trades accuracy for speed.
DEFAULT_DTYPE = np.dtype(os.environ.get("CFSNN_DTYPE", "float64"))

_builtin_abs = abs
_builtin_sum = sum


class NumericalError(ArithmeticError):
    """A value or gradient became NaN/Inf from finite inputs."""


class _ThreadState(threading.local):
    def __init__(self) -> None:
        self.tape: Tape | None = None
        self.grad_enabled = True


_state = _ThreadState()


def current_tape() -> "Tape":
    if _state.tape is None or _state.tape.consumed:
        _state.tape = Tape()
    return _state.tape


@contextlib.contextmanager
def no_grad():
    """Disable recording on the current thread."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class _Entry:
    __slots__ = ("op", "out", "parents", "backward")

    def __init__(self, op, out, parents, backward):
        self.op = op
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self) -> None:
        self.entries: list[_Entry] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, op: str, out: "Tensor", parents: tuple, backward: Callable) -> None:
        if self.consumed:
            raise RuntimeError("cannot record onto a tape that has already run backward")
        out._tape = self
        out._producer = len(self.entries)
        self.entries.append(_Entry(op, out, parents, backward))

    def backward(self, loss: "Tensor") -> None:
        if self.consumed:
            raise RuntimeError(
                "backward already ran for this forward pass; run a new forward first"
            )
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
        if loss._tape is not self:
            raise RuntimeError("loss was not recorded on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for entry in reversed(self.entries):
            g = grads.pop(id(entry.out), None)
            for p in entry.parents:
                if p.requires_grad and p._tape is None:
                    leaves.setdefault(id(p), p)
            if g is None:
                continue
            parent_grads = entry.backward(g)
            for p, pg in zip(entry.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if p._tape is None:
                    # non-finite values propagate, so checking at the leaves is enough
                    if not np.all(np.isfinite(pg)):
                        raise NumericalError(f"non-finite gradient flowing out of op '{entry.op}'")
                    if p.grad is None:
                        p.grad = np.array(pg, dtype=p.data.dtype, copy=True).reshape(p.shape)
                    else:
                        p.grad += pg
                else:
                    key = id(p)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
        for leaf in leaves.values():
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
        self.consumed = True
        self.entries = []


def _as_array(value, dtype=None) -> np.ndarray:
    arr = np.asarray(value, dtype=dtype or DEFAULT_DTYPE)
    if arr.ndim > MAX_RANK:
        raise ValueError(f"tensors are limited to rank {MAX_RANK}, got shape {list(arr.shape)}")
    return arr


class Tensor:
    """A dense real array that can take part in reverse-mode differentiation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self._producer: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self._tape is None:
            raise RuntimeError("tensor was not produced by a recorded operation")
        self._tape.backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def abs(self):
        return abs(self)

    def sigmoid(self):
        return sigmoid(self)


class Parameter(Tensor):
    """A trainable leaf tensor with a stable name and a momentum buffer."""

    def __init__(self, data, name: str, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.momentum = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={list(self.shape)})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, out: np.ndarray, inputs: Sequence[Tensor]) -> None:
    if np.all(np.isfinite(out)):
        return
    if all(np.all(np.isfinite(t.data)) for t in inputs):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(out))[0])
        raise NumericalError(f"op '{op}' produced a non-finite value at index {bad}")


def _result(op: str, data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    _check_finite(op, data, parents)
    out = Tensor(data, dtype=data.dtype if data.dtype.kind == "f" else None)
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        current_tape().record(op, out, parents, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(
            f"{op}: shapes {list(a.shape)} and {list(b.shape)} are not broadcast-compatible"
        ) from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("add", a, b)
    return _result(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("sub", a, b)
    return _result(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    """Elementwise product; a Python scalar operand gives scalar multiplication."""
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("mul", a, b)
    return _result(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data
    return _result(
        "div",
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        ),
    )


def power(a, exponent: float) -> Tensor:
    a = _wrap(a)
    p = float(exponent)
    return _result(
        "pow", a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1.0),)
    )


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return _result("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    """Natural log. Non-positive inputs yield a NumericalError."""
    a = _wrap(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _result("log", out, (a,), lambda g: (g / a.data,))


def abs(a) -> Tensor:
    """|a|, with subgradient 0 at the kink."""
    a = _wrap(a)
    return _result("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    out = _sigmoid(a.data)
    return _result("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    x = np.asarray(x, dtype=DEFAULT_DTYPE if np.ndim(x) == 0 else None)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def minimum(a, limit: float) -> Tensor:
    """min(a, limit); clamped elements pass no gradient."""
    a = _wrap(a)
    keep = a.data <= limit
    return _result(
        "minimum", np.where(keep, a.data, limit), (a,), lambda g: (g * keep,)
    )


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _result("sum", np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return _result("mean", np.asarray(out), (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result("softmax", out, (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result("log_softmax", out, (a,), backward)


# ---------------------------------------------------------------- shape ops


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot view shape {list(a.shape)} as {list(shape)}") from None
    return _result("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = _wrap(a)
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)
    return _result("transpose", out, (a,), lambda g: (np.transpose(g, inverse),))


def getitem(a, index) -> Tensor:
    a = _wrap(a)
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g) if _is_advanced(index) else full.__setitem__(index, g)
        return (full,)

    return _result("getitem", np.array(out), (a,), backward)


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    parts = [_wrap(t) for t in tensors]
    out = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def backward(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _result("concat", out, tuple(parts), backward)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shapes {list(a.shape)} and {list(b.shape)} do not conform")
    return _result(
        "matmul",
        a.data @ b.data,
        (a, b),
        lambda g: (
            g @ b.data.T if a.requires_grad else None,
            a.data.T @ g if b.requires_grad else None,
        ),
    )


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x, weight, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of [N, C, H, W] input with [O, C, k, k] weights."""
    x, weight = _wrap(x), _wrap(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"conv2d: input {list(x.shape)} and weight {list(weight.shape)} do not conform"
        )
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(w, kw, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d: kernel {kh}x{kw} does not fit input {list(x.shape)}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(o, c * kh * kw)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, padding : padding + h, padding : padding + w]
        return gx, gw

    return _result("conv2d", np.ascontiguousarray(out), (x, weight), backward)


def avg_pool2d(x, kernel: int) -> Tensor:
    """Non-overlapping average pooling; H and W must be multiples of ``kernel``."""
    x = _wrap(x)
    n, c, h, w = x.shape
    if h % kernel or w % kernel:
        raise ValueError(f"avg_pool2d: input {list(x.shape)} not divisible by kernel {kernel}")
    out = x.data.reshape(n, c, h // kernel, kernel, w // kernel, kernel).mean(axis=(3, 5))

    def backward(g):
        g = np.repeat(np.repeat(g, kernel, axis=2), kernel, axis=3)
        return (g / (kernel * kernel),)

    return _result("avg_pool2d", out, (x,), backward)


# ---------------------------------------------------------------- custom gradient


def custom_activation(
    x,
    forward_rule: Callable[[np.ndarray], np.ndarray],
    backward_rule: Callable[[np.ndarray], np.ndarray],
    aux: Tensor | None = None,
    aux_rule: Callable[[np.ndarray], np.ndarray] | None = None,
    name: str = "custom_activation",
) -> Tensor:
    """Apply ``forward_rule`` elementwise but backpropagate through ``backward_rule``.

    The incoming gradient is multiplied by ``backward_rule(x)``; the forward
    map never enters the backward pass. When ``aux`` (a scalar tensor, e.g. a
    surrogate steepness) is given together with ``aux_rule``, it receives
    ``sum(upstream * aux_rule(x))``.
    """
    x = _wrap(x)
    out = np.asarray(forward_rule(x.data), dtype=x.data.dtype)
    if out.shape != x.shape:
        raise ValueError(f"{name}: forward rule changed shape {list(x.shape)} -> {list(out.shape)}")
    if not np.all(np.isfinite(out)):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(out))[0])
        raise NumericalError(f"{name}: forward rule gave a non-finite value at index {bad}")
    parents = (x,) if aux is None else (x, aux)

    def backward(g):
        local = backward_rule(x.data)
        if not np.all(np.isfinite(local)):
            bad = tuple(int(i) for i in np.argwhere(~np.isfinite(local))[0])
            raise NumericalError(f"{name}: backward rule gave a non-finite value at index {bad}")
        gx = g * local
        if aux is None:
            return (gx,)
        ga = None
        if aux.requires_grad and aux_rule is not None:
            ga = np.reshape(np.sum(g * aux_rule(x.data)), aux.shape)
        return gx, ga

    return _result(name, out, parents, backward)


def custom_op(name: str, parents: Sequence, data: np.ndarray, backward: Callable) -> Tensor:
    """Record a fused op: ``data`` is its output, ``backward(g)`` returns one gradient per parent.

    A gradient entry may be None for a parent that needs none.
    """
    parents = tuple(_wrap(p) for p in parents)
    return _result(name, np.asarray(data, dtype=DEFAULT_DTYPE), parents, backward)


# ---------------------------------------------------------------- normalization


def tdbn_forward(
    x,
    theta: float,
    gamma: Tensor,
    beta: Tensor,
    eps: float = 1e-5,
    running_mean: np.ndarray | None = None,
    running_var: np.ndarray | None = None,
    training: bool = True,
    momentum: float = 0.1,
) -> Tensor:
    """Threshold-dependent batch norm over a [N, C] or [N, C, H, W] tensor.

    ``N`` is the flattened time*batch axis, so statistics are joint over
    time, batch and space per channel. Output is
    ``theta * gamma * (x - mean) / sqrt(var + eps) + beta``. In training mode
    the running buffers (if given) are updated in place with the biased
    batch variance.
    """
    x = _wrap(x)
    if x.ndim not in (2, 4):
        raise ValueError(f"tdbn: expected [N, C] or [N, C, H, W], got {list(x.shape)}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    g = reshape(gamma, bshape)
    b = reshape(beta, bshape)
    if training:
        count = int(np.prod([x.shape[ax] for ax in axes]))
        if count < 2:
            raise ValueError(
                "tdbn: per-channel statistics need at least 2 elements; "
                "increase the batch*time product"
            )
        mu = mean(x, axes, keepdims=True)
        centred = x - mu
        var = mean(centred * centred, axes, keepdims=True)
        xhat = centred * power(var + eps, -0.5)
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu.data.reshape(-1)
        if running_var is not None:
            running_var *= 1.0 - momentum
            running_var += momentum * var.data.reshape(-1)
    else:
        if running_mean is None or running_var is None:
            raise ValueError("tdbn: eval mode needs running statistics")
        rm = running_mean.reshape(bshape)
        rv = running_var.reshape(bshape)
        xhat = (x - rm) * (1.0 / np.sqrt(rv + eps))
    return xhat * (g * float(theta)) + b
