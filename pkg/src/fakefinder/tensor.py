"""Reverse-mode autodiff over flat numpy buffers.

This is deliberately small: just enough operations to express a ViT
encoder forward pass and its training step. Shapes outside the
supported patterns (bias-style trailing broadcast, stacked matmul) are
rejected loudly instead of silently broadcast.

Gradient protocol:

    with GradTape() as tape:
        out = ...ops on tensors...
        loss = mean_all(out)
    backward(loss, tape)

Ops record themselves on the innermost active tape whenever any input
has ``requires_grad``. ``backward`` replays the tape once in exact
reverse execution order; adjoints accumulate additively across shared
uses and land on ``Tensor.grad``. A tape cannot be replayed twice, and
callers zero grads between steps (``zero_grads``). Every op checks its
output for NaN/Inf and raises ``NumericsError`` instead of letting
non-finite values propagate.

Buffers default to float32. A ``dtype`` override exists so tests can
build float64 twins for finite-difference oracles; ops preserve the
dtype of their inputs and refuse mixed-precision operands.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericsError, ShapeError, StateError

DEFAULT_DTYPE = np.float32

_TAPE_STACK: list["GradTape"] = []


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"{what} produced non-finite values")


class Tensor:
    """Dense row-major float buffer with an optional adjoint slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise ContractError("wrap raw arrays, not Tensors")
        arr = np.asarray(data, dtype=DEFAULT_DTYPE if dtype is None else dtype)
        _check_finite(arr, "tensor construction")
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
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"


class GradTape:
    """Ordered record of executed ops; replayable exactly once."""

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _TAPE_STACK.pop()
        return False

    def __len__(self) -> int:
        return len(self._records)


def active_tape() -> GradTape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def apply_op(
    out_data: np.ndarray,
    inputs: tuple[Tensor, ...],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    name: str,
) -> Tensor:
    """Wrap an op result and register its adjoint rule.

    ``backward_fn(out_grad)`` must return one gradient per input (None
    for inputs that need none). This is the extension point other
    modules use for fused ops such as cross-entropy.
    """
    _check_finite(out_data, name)
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires, dtype=out_data.dtype)
    tape = active_tape()
    if tape is not None and requires:
        if tape._consumed:
            raise StateError("tape already replayed; create a fresh GradTape")
        tape._records.append((out, inputs, backward_fn))
    return out


def backward(loss: Tensor, tape: GradTape) -> None:
    """Replay ``tape`` in reverse, accumulating adjoints into ``.grad``."""
    if loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape._consumed:
        raise StateError("backward was already called on this tape")
    tape._consumed = True
    loss.grad = np.ones((), dtype=loss.dtype)
    for out, inputs, fn in reversed(tape._records):
        g = out.grad
        if g is None:
            continue
        grads = fn(g)
        for t, gi in zip(inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise ShapeError(
                    f"backward produced grad shape {gi.shape} for tensor {t.shape}"
                )
            _check_finite(gi, "backward")
            t.grad = gi if t.grad is None else t.grad + gi
    tape._records = []


def zero_grads(tensors) -> None:
    for t in tensors:
        t.zero_grad()


def _same_dtype(name: str, *tensors: Tensor) -> None:
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ContractError(f"{name}: mixed dtypes {sorted(map(str, dtypes))}")


# ---------------------------------------------------------------------------
# arithmetic


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; ``b`` may be 2-D (shared weight) or match ``a``'s
    leading axes for stacked batched products."""
    _same_dtype("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(
            f"stacked matmul needs matching leading axes: {a.shape} @ {b.shape}"
        )
    out = np.matmul(a.data, b.data)

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2:
                a2 = a.data.reshape(-1, a.shape[-1])
                g2 = g.reshape(-1, g.shape[-1])
                gb = a2.T @ g2
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return apply_op(out, (a, b), bwd, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; ``b`` may also be a trailing-shape bias that
    broadcasts over ``a``'s leading axes. Anything else is rejected."""
    _same_dtype("add", a, b)
    if a.shape == b.shape:
        lead = 0
    elif a.ndim > b.ndim and a.shape[a.ndim - b.ndim :] == b.shape:
        lead = a.ndim - b.ndim
    else:
        raise ShapeError(f"add: unsupported shapes {a.shape} + {b.shape}")
    out = a.data + b.data

    def bwd(g):
        ga = g if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = g.sum(axis=tuple(range(lead))) if lead else g
        return ga, gb

    return apply_op(out, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype("sub", a, b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes differ {a.shape} - {b.shape}")
    out = a.data - b.data

    def bwd(g):
        return (g if a.requires_grad else None, -g if b.requires_grad else None)

    return apply_op(out, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype("mul", a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes differ {a.shape} * {b.shape}")
    out = a.data * b.data

    def bwd(g):
        ga = g * b.data if a.requires_grad else None
        gb = g * a.data if b.requires_grad else None
        return ga, gb

    return apply_op(out, (a, b), bwd, "mul")


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    out = x.data * s

    def bwd(g):
        return (g * s if x.requires_grad else None,)

    return apply_op(out, (x,), bwd, "scale")


# ---------------------------------------------------------------------------
# shape movement


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape {x.shape} -> {shape}: {e}") from None

    def bwd(g):
        return (g.reshape(x.shape) if x.requires_grad else None,)

    return apply_op(out, (x,), bwd, "reshape")


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose axes {axes} invalid for ndim {x.ndim}")
    out = np.transpose(x.data, axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (np.transpose(g, inv) if x.requires_grad else None,)

    return apply_op(out, (x,), bwd, "transpose")


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ContractError("concat needs at least one tensor")
    _same_dtype("concat", *parts)
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        pieces = np.split(g, offsets, axis=axis)
        return tuple(
            piece if p.requires_grad else None for p, piece in zip(parts, pieces)
        )

    return apply_op(out, tuple(parts), bwd, "concat")


def select(x: Tensor, index: int, axis: int) -> Tensor:
    """Take one slice along ``axis`` (the axis is dropped)."""
    if not (0 <= axis < x.ndim):
        raise ShapeError(f"select axis {axis} out of range for ndim {x.ndim}")
    if not (0 <= index < x.shape[axis]):
        raise ShapeError(f"select index {index} out of range for axis size {x.shape[axis]}")
    key = (slice(None),) * axis + (index,)
    out = x.data[key]

    def bwd(g):
        if not x.requires_grad:
            return (None,)
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[key] = g
        return (gx,)

    return apply_op(out, (x,), bwd, "select")


def expand_leading(x: Tensor, n: int) -> Tensor:
    """Repeat ``x`` along a new leading axis of length ``n``."""
    if n < 1:
        raise ContractError(f"expand_leading needs n >= 1, got {n}")
    out = np.broadcast_to(x.data, (n,) + x.shape).copy()

    def bwd(g):
        return (g.sum(axis=0) if x.requires_grad else None,)

    return apply_op(out, (x,), bwd, "expand_leading")


# ---------------------------------------------------------------------------
# reductions


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)

    def bwd(g):
        return (np.full(x.shape, g, dtype=x.dtype) if x.requires_grad else None,)

    return apply_op(out, (x,), bwd, "sum_all")


def mean_all(x: Tensor) -> Tensor:
    if x.size == 0:
        raise ContractError("mean_all over empty tensor")
    out = np.asarray(x.data.mean(dtype=np.float64), dtype=x.dtype)
    inv = 1.0 / x.size

    def bwd(g):
        if not x.requires_grad:
            return (None,)
        return (np.full(x.shape, g * inv, dtype=x.dtype),)

    return apply_op(out, (x,), bwd, "mean_all")


# ---------------------------------------------------------------------------
# nonlinearities


def softmax(x: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis."""
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError(f"softmax needs a non-empty last axis, got shape {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        if not x.requires_grad:
            return (None,)
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return apply_op(y, (x,), bwd, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (biased
    variance), then apply per-feature gain and bias."""
    _same_dtype("layer_norm", x, gain, bias)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError(f"layer_norm needs a non-empty last axis, got {x.shape}")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm gain/bias must have shape ({d},), got {gain.shape}/{bias.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        # eps=0 on a constant slice divides by zero; the finite check below
        # turns that into a NumericsError instead of a numpy warning.
        inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
        xhat = (x.data - mu) * inv
        out = xhat * gain.data + bias.data

    def bwd(g):
        gx = ggain = gbias = None
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gy = g * gain.data
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * xhat).mean(axis=-1, keepdims=True)
            gx = inv * (gy - m1 - xhat * m2)
        return gx, ggain, gbias

    return apply_op(out, (x, gain, bias), bwd, "layer_norm")


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5*x*(1 + tanh(c*(x + a*x^3)))."""
    xd = x.data
    c = np.asarray(_GELU_C, dtype=x.dtype)
    a = np.asarray(_GELU_A, dtype=x.dtype)
    u = c * (xd + a * xd * xd * xd)
    t = np.tanh(u)
    out = 0.5 * xd * (1.0 + t)

    def bwd(g):
        if not x.requires_grad:
            return (None,)
        du = c * (1.0 + 3.0 * a * xd * xd)
        d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du
        return (g * d,)

    return apply_op(out, (x,), bwd, "gelu")
