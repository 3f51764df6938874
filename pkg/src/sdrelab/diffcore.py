"""Reverse-mode automatic differentiation over dense float64 arrays.

Define-by-run: primitive ops record themselves on the innermost active
``Tape`` (a thread-local stack, so independent tapes may run on separate
threads), and ``backward`` replays the records in exact reverse order.
With no active tape the same ops run as plain numpy, which is how
inference and finite-difference probes are evaluated.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested op."""


class DomainError(ValueError):
    """Input outside an op's numeric domain (e.g. log of a nonpositive)."""


class Tensor:
    """A dense float64 array, optionally tracked by the active tape."""

    __slots__ = ("data", "name")

    def __init__(self, data, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.data.shape})"


_ACTIVE = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_ACTIVE, "stack", None)
    if stack is None:
        stack = []
        _ACTIVE.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive ops plus the set of watched parameters."""

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable[[Array], tuple]]] = []
        self._watched: list[Tensor] = []

    def watch(self, *tensors: Tensor) -> None:
        """Mark tensors whose gradients backward() must report."""
        self._watched.extend(tensors)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> bool:
        popped = _tape_stack().pop()
        assert popped is self, "tapes must be exited in LIFO order"
        return False

    def __len__(self) -> int:
        return len(self._records)


def _record(out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable[[Array], tuple]) -> None:
    tape = active_tape()
    if tape is not None:
        tape._records.append((out, inputs, vjp))


def backward(loss: Tensor, tape: Tape) -> dict[Tensor, Array]:
    """Gradient of a scalar loss w.r.t. every watched tensor on the tape.

    Watched tensors the loss never touched get zero gradients. Gradient
    accumulators start from zero on every call, so tapes can be replayed.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    grads: dict[Tensor, Array] = {loss: np.array(1.0)}
    for out, inputs, vjp in reversed(tape._records):
        g = grads.get(out)
        if g is None:
            continue
        for tensor, contribution in zip(inputs, vjp(g)):
            if contribution is None:
                continue
            acc = grads.get(tensor)
            grads[tensor] = contribution if acc is None else acc + contribution
    return {p: grads.get(p, np.zeros_like(p.data)) for p in tape._watched}


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _swap_last(x: Array) -> Array:
    return np.swapaxes(x, -1, -2)


def matmul(a: Tensor, b: Tensor, transpose_a: bool = False, transpose_b: bool = False) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be >= 2-D, got {a.shape} @ {b.shape}")
    av = _swap_last(a.data) if transpose_a else a.data
    bv = _swap_last(b.data) if transpose_b else b.data
    try:
        out = Tensor(np.matmul(av, bv))
    except ValueError as e:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}") from e

    def vjp(g: Array) -> tuple:
        ga = np.matmul(g, _swap_last(bv))
        gb = np.matmul(_swap_last(av), g)
        if transpose_a:
            ga = _swap_last(ga)
        if transpose_b:
            gb = _swap_last(gb)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    _record(out, (a, b), vjp)
    return out


def _broadcast_shapes(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError as e:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from e


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shapes("add", a, b)
    out = Tensor(a.data + b.data)

    def vjp(g: Array) -> tuple:
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    _record(out, (a, b), vjp)
    return out


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shapes("multiply", a, b)
    out = Tensor(a.data * b.data)

    def vjp(g: Array) -> tuple:
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    _record(out, (a, b), vjp)
    return out


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    out = Tensor(a.data * factor)
    _record(out, (a,), lambda g: (g * factor,))
    return out


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(y)
    _record(out, (a,), lambda g: (g * out.data * (1.0 - out.data),))
    return out


def tanh(a: Tensor) -> Tensor:
    out = Tensor(np.tanh(a.data))
    _record(out, (a,), lambda g: (g * (1.0 - out.data**2),))
    return out


def b2bsqrt(a: Tensor, alpha: float = 1.0) -> Tensor:
    """Odd, unbounded sqrt-shaped activation with finite slope at zero."""
    alpha = float(alpha)
    if alpha <= 0:
        raise DomainError(f"b2bsqrt: alpha must be positive, got {alpha}")
    x = a.data
    out = Tensor(np.sign(x) * (np.sqrt(alpha + np.abs(x)) - np.sqrt(alpha)))

    def vjp(g: Array) -> tuple:
        return (g * 0.5 / np.sqrt(alpha + np.abs(x)),)

    _record(out, (a,), vjp)
    return out


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log: input has nonpositive entries")
    out = Tensor(np.log(a.data))
    _record(out, (a,), lambda g: (g / a.data,))
    return out


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = Tensor(e / e.sum(axis=-1, keepdims=True))

    def vjp(g: Array) -> tuple:
        y = out.data
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    _record(out, (a,), vjp)
    return out


def logsumexp(a: Tensor, keepdims: bool = False) -> Tensor:
    """log(sum(exp(.))) over the last axis, stabilized by max subtraction."""
    m = a.data.max(axis=-1, keepdims=True)
    s = np.exp(a.data - m).sum(axis=-1, keepdims=True)
    val = np.log(s) + m
    out = Tensor(val if keepdims else val[..., 0])

    def vjp(g: Array) -> tuple:
        soft = np.exp(a.data - m) / s
        gg = g if keepdims else g[..., None]
        return (gg * soft,)

    _record(out, (a,), vjp)
    return out


def sum_axis(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g: Array) -> tuple:
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    _record(out, (a,), vjp)
    return out


def cumsum(a: Tensor, axis: int) -> Tensor:
    out = Tensor(np.cumsum(a.data, axis=axis))

    def vjp(g: Array) -> tuple:
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    _record(out, (a,), vjp)
    return out


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(n) for n in shape)
    try:
        out = Tensor(a.data.reshape(shape))
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from e
    _record(out, (a,), lambda g: (g.reshape(a.data.shape),))
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty input list")
    try:
        out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    except ValueError as e:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from e
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g: Array) -> tuple:
        return tuple(np.split(g, offsets, axis=axis))

    _record(out, tuple(tensors), vjp)
    return out


def layernorm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = Tensor(xhat)

    def vjp(g: Array) -> tuple:
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    _record(out, (a,), vjp)
    return out


def _op_concat(inputs, attrs):
    return concat(list(inputs), axis=int(attrs.get("axis", 0)))


_PRIMITIVES: dict[str, Callable] = {
    "matmul": lambda inp, at: matmul(
        inp[0], inp[1],
        transpose_a=bool(at.get("transpose_a", False)),
        transpose_b=bool(at.get("transpose_b", False)),
    ),
    "add": lambda inp, at: add(inp[0], inp[1]),
    "multiply": lambda inp, at: multiply(inp[0], inp[1]),
    "sigmoid": lambda inp, at: sigmoid(inp[0]),
    "tanh": lambda inp, at: tanh(inp[0]),
    "b2bsqrt": lambda inp, at: b2bsqrt(inp[0], alpha=float(at.get("alpha", 1.0))),
    "softmax-last-axis": lambda inp, at: softmax(inp[0]),
    "log": lambda inp, at: log(inp[0]),
    "sum-axis": lambda inp, at: sum_axis(
        inp[0],
        axis=None if at.get("axis") is None else int(at["axis"]),
        keepdims=bool(at.get("keepdims", False)),
    ),
    "scale": lambda inp, at: scale(inp[0], float(at["factor"])),
    "concat": _op_concat,
    "layernorm-last-axis": lambda inp, at: layernorm(inp[0], eps=float(at.get("eps", 1e-5))),
    "logsumexp-last-axis": lambda inp, at: logsumexp(inp[0], keepdims=bool(at.get("keepdims", False))),
    "reshape": lambda inp, at: reshape(inp[0], at["shape"]),
    "cumsum-axis": lambda inp, at: cumsum(inp[0], axis=int(at["axis"])),
}

PRIMITIVE_KINDS = tuple(sorted(_PRIMITIVES))


def forward_primitive(kind: str, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    """Dispatch a primitive by kind name; records on the active tape."""
    fn = _PRIMITIVES.get(kind)
    if fn is None:
        raise KeyError(f"unknown primitive kind {kind!r}; known: {PRIMITIVE_KINDS}")
    return fn(list(inputs), attrs or {})


def finite_diff_check(
    f: Callable[..., Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-3,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must map the given parameter tensors to a scalar Tensor and be
    deterministic; the relative error is |analytic - numeric| / max(1, |numeric|)
    maximized over every parameter coordinate.
    """
    if not (0.0 < eps <= 1e-2):
        raise DomainError(f"finite_diff_check: eps must be in (0, 1e-2], got {eps}")
    with Tape() as tape:
        tape.watch(*params)
        loss = f(*params)
    grads = backward(loss, tape)
    worst = 0.0
    for p in params:
        analytic = grads[p].reshape(-1)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(*params).data)
            flat[i] = orig - eps
            lo = float(f(*params).data)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            err = abs(analytic[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
