"""Dense little tensors with reverse-mode automatic differentiation.

A Grid wraps a numpy array of 32-bit floats (float64 is tolerated so the
gradient checker can run the same code at higher precision) together with
an optional gradient buffer.  Operations record a closure on an implicit
tape via the ``_parents``/``_backward`` fields of their output; calling
``backward()`` on a scalar result walks the graph in reverse topological
order and accumulates gradients with ``+=``.

Only what the models in this package need is implemented: elementwise
arithmetic, a few activations, reductions, reshape/transpose, and batched
matmul.  Structured ops (convolution, resizing, normalization) live in
``ops.py``.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence, Tuple

import numpy as np

from ..errors import DimensionError, NumericError

MAX_AXES = 4

# Tape recording is toggled per thread: parallel evaluation workers each
# enter no_grad independently, and a shared flag would let one thread's
# exit clobber another's state.
_grad_state = threading.local()


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (used for frozen models)."""
    prev = grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


def grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


def _as_values(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    if arr.ndim > MAX_AXES:
        raise DimensionError(
            f"grid supports at most {MAX_AXES} axes, got {arr.ndim} (axis {MAX_AXES} and beyond unsupported)"
        )
    return arr


class Grid:
    """A shaped value in the computation graph.

    values        : numpy float array, row-major, up to 4 axes
    requires_grad : whether backward() should produce a gradient for it
    grad          : accumulated gradient (same shape), or None before backward
    """

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.values = _as_values(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Grid", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        if self.values.size != 1:
            raise DimensionError(f"item() needs a single-element grid, got shape {self.shape}")
        return float(self.values.reshape(()))

    def detach(self) -> "Grid":
        return Grid(self.values, requires_grad=False, dtype=self.values.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.values.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self, seed: Optional[np.ndarray] = None) -> None:
        """Reverse-mode sweep from this grid.

        ``seed`` defaults to ones (for scalar losses it is just 1.0).
        Gradients accumulate into every reachable grid with
        requires_grad=True.
        """
        if seed is None:
            seed = np.ones_like(self.values)
        else:
            seed = np.asarray(seed, dtype=self.values.dtype)
            if seed.shape != self.values.shape:
                raise DimensionError(
                    f"backward seed shape {seed.shape} does not match grid shape {self.shape}"
                )

        order: list[Grid] = []
        seen: set[int] = set()
        stack: list[Tuple[Grid, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): seed}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.accumulate_grad(g)
            if node._backward is None:
                continue
            for parent, pg in node._backward(g):
                if pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # Ergonomic operators; the free functions below do the real work.
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

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Grid(shape={self.shape}, dtype={self.values.dtype}{flag})"


def as_grid(x) -> Grid:
    return x if isinstance(x, Grid) else Grid(x)


def constant(data, dtype=None) -> Grid:
    return Grid(data, requires_grad=False, dtype=dtype)


def _needs_tape(*parents: Grid) -> bool:
    return grad_enabled() and any(p.requires_grad or p._backward is not None for p in parents)


def make_op(values: np.ndarray, parents: Sequence[Grid], backward) -> Grid:
    """Wrap an op result; ``backward(g)`` returns [(parent, grad), ...]."""
    out = Grid(values, dtype=values.dtype)
    if _needs_tape(*parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    if g.shape != shape:
        raise DimensionError(f"cannot reduce gradient of shape {g.shape} to {shape}")
    return g


def _check_broadcast(a: Grid, b: Grid, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(
            f"{opname}: operand shapes {a.shape} and {b.shape} are not broadcast-compatible"
        ) from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Grid:
    a, b = as_grid(a), as_grid(b)
    _check_broadcast(a, b, "add")
    values = a.values + b.values

    def backward(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))]

    return make_op(values, (a, b), backward)


def sub(a, b) -> Grid:
    a, b = as_grid(a), as_grid(b)
    _check_broadcast(a, b, "sub")
    values = a.values - b.values

    def backward(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape))]

    return make_op(values, (a, b), backward)


def mul(a, b) -> Grid:
    a, b = as_grid(a), as_grid(b)
    _check_broadcast(a, b, "mul")
    values = a.values * b.values

    def backward(g):
        return [
            (a, _unbroadcast(g * b.values, a.shape)),
            (b, _unbroadcast(g * a.values, b.shape)),
        ]

    return make_op(values, (a, b), backward)


def div(a, b) -> Grid:
    a, b = as_grid(a), as_grid(b)
    _check_broadcast(a, b, "div")
    values = a.values / b.values

    def backward(g):
        return [
            (a, _unbroadcast(g / b.values, a.shape)),
            (b, _unbroadcast(-g * a.values / (b.values * b.values), b.shape)),
        ]

    return make_op(values, (a, b), backward)


def scale(a, c: float) -> Grid:
    a = as_grid(a)
    c = float(c)
    values = a.values * np.asarray(c, dtype=a.values.dtype)

    def backward(g):
        return [(a, g * np.asarray(c, dtype=g.dtype))]

    return make_op(values, (a,), backward)


def maximum(a, b) -> Grid:
    """Elementwise max; on ties the gradient routes to the first operand."""
    a, b = as_grid(a), as_grid(b)
    _check_broadcast(a, b, "maximum")
    take_a = a.values >= b.values
    values = np.where(take_a, a.values, b.values)

    def backward(g):
        return [
            (a, _unbroadcast(np.where(take_a, g, 0.0), a.shape)),
            (b, _unbroadcast(np.where(take_a, 0.0, g), b.shape)),
        ]

    return make_op(values, (a, b), backward)


def exp(a) -> Grid:
    a = as_grid(a)
    values = np.exp(a.values)

    def backward(g):
        return [(a, g * values)]

    return make_op(values, (a,), backward)


def log(a) -> Grid:
    a = as_grid(a)
    values = np.log(a.values)

    def backward(g):
        return [(a, g / a.values)]

    return make_op(values, (a,), backward)


def sqrt(a) -> Grid:
    """Elementwise square root; subgradient 0 is used at exactly 0."""
    a = as_grid(a)
    values = np.sqrt(a.values)

    def backward(g):
        denom = 2.0 * values
        gx = np.where(denom > 0.0, g / np.where(denom > 0.0, denom, 1.0), 0.0)
        return [(a, gx)]

    return make_op(values, (a,), backward)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a) -> Grid:
    """Tanh-approximation GELU: 0.5*x*(1 + tanh(c*(x + 0.044715*x^3)))."""
    a = as_grid(a)
    x = a.values
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    values = 0.5 * x * (1.0 + t)

    def backward(g):
        sech2 = 1.0 - t * t
        dinner = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        dx = 0.5 * (1.0 + t) + 0.5 * x * sech2 * dinner
        return [(a, g * dx)]

    return make_op(values, (a,), backward)


def sigmoid(a) -> Grid:
    a = as_grid(a)
    x = a.values
    values = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    values = values.astype(x.dtype)

    def backward(g):
        return [(a, g * values * (1.0 - values))]

    return make_op(values, (a,), backward)


def huber(a) -> Grid:
    """Smooth-L1 kernel: 0.5*x^2 for |x| <= 1, |x| - 0.5 beyond."""
    a = as_grid(a)
    x = a.values
    small = np.abs(x) <= 1.0
    values = np.where(small, 0.5 * x * x, np.abs(x) - 0.5).astype(x.dtype)

    def backward(g):
        return [(a, g * np.clip(x, -1.0, 1.0))]

    return make_op(values, (a,), backward)


def bce_logits(logits, targets) -> Grid:
    """Elementwise binary cross-entropy on logits against constant targets.

    Stable form max(z,0) - z*t + log1p(exp(-|z|)); the gradient with
    respect to the logits is sigmoid(z) - t.  Targets take no gradient.
    """
    a = as_grid(logits)
    t = np.asarray(targets, dtype=a.values.dtype)
    if t.shape != a.shape:
        raise DimensionError(f"bce_logits: target shape {t.shape} != logit shape {a.shape}")
    z = a.values
    values = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    values = values.astype(z.dtype)

    def backward(g):
        s = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
        return [(a, g * (s - t))]

    return make_op(values, (a,), backward)


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_all(a) -> Grid:
    a = as_grid(a)
    values = a.values.sum(dtype=a.values.dtype).reshape(())

    def backward(g):
        return [(a, np.broadcast_to(g, a.shape).astype(a.values.dtype))]

    return make_op(values, (a,), backward)


def sum_axis(a, axis: int, keepdims: bool = True) -> Grid:
    a = as_grid(a)
    values = a.values.sum(axis=axis, keepdims=keepdims, dtype=a.values.dtype)

    def backward(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return [(a, np.broadcast_to(gg, a.shape).astype(a.values.dtype))]

    return make_op(values, (a,), backward)


def mean_all(a) -> Grid:
    a = as_grid(a)
    return scale(sum_all(a), 1.0 / a.size)


def reshape(a, shape: Iterable[int]) -> Grid:
    a = as_grid(a)
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    values = a.values.reshape(shape)

    def backward(g):
        return [(a, g.reshape(a.shape))]

    return make_op(values, (a,), backward)


def transpose(a, axes: Iterable[int]) -> Grid:
    a = as_grid(a)
    axes = tuple(axes)
    values = a.values.transpose(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        return [(a, g.transpose(inv))]

    return make_op(values, (a,), backward)


def matmul(a, b) -> Grid:
    """Matrix product over the last two axes; leading axes must match."""
    a, b = as_grid(a), as_grid(b)
    if a.values.ndim < 2 or b.values.ndim < 2:
        raise DimensionError("matmul needs at least 2 axes per operand")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul: inner axes disagree, {a.shape} @ {b.shape} (axis {len(a.shape) - 1})"
        )
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: leading axes disagree, {a.shape} vs {b.shape}")
    values = a.values @ b.values

    def backward(g):
        return [
            (a, g @ np.swapaxes(b.values, -1, -2)),
            (b, np.swapaxes(a.values, -1, -2) @ g),
        ]

    return make_op(values, (a, b), backward)


def softmax(a, axis: int) -> Grid:
    a = as_grid(a)
    x = a.values
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    values = (e / e.sum(axis=axis, keepdims=True)).astype(x.dtype)

    def backward(g):
        dot = (g * values).sum(axis=axis, keepdims=True)
        return [(a, values * (g - dot))]

    return make_op(values, (a,), backward)


def log_softmax(a, axis: int) -> Grid:
    a = as_grid(a)
    x = a.values
    m = x.max(axis=axis, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    values = (shifted - lse).astype(x.dtype)

    def backward(g):
        soft = np.exp(values)
        return [(a, g - soft * g.sum(axis=axis, keepdims=True))]

    return make_op(values, (a,), backward)


def channel_slice(a, n: int) -> Grid:
    """Keep the first n channels (axis 1)."""
    a = as_grid(a)
    if a.values.ndim != 4 or not 0 < n <= a.shape[1]:
        raise DimensionError(f"channel_slice: cannot keep {n} channels of shape {a.shape}")
    values = a.values[:, :n].copy()

    def backward(g):
        gx = np.zeros_like(a.values)
        gx[:, :n] = g
        return [(a, gx)]

    return make_op(values, (a,), backward)


def channel_pad(a, n: int) -> Grid:
    """Zero-pad the channel axis (axis 1) up to n channels."""
    a = as_grid(a)
    if a.values.ndim != 4 or n < a.shape[1]:
        raise DimensionError(f"channel_pad: cannot pad shape {a.shape} to {n} channels")
    if n == a.shape[1]:
        values = a.values.copy()
    else:
        b, c, h, w = a.shape
        values = np.zeros((b, n, h, w), dtype=a.values.dtype)
        values[:, :c] = a.values

    def backward(g):
        return [(a, g[:, : a.shape[1]])]

    return make_op(values, (a,), backward)


def check_finite(a: Grid, context: str) -> Grid:
    if not np.all(np.isfinite(a.values)):
        raise NumericError(f"non-finite values in {context}")
    return a
