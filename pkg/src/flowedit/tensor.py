"""Dense fp32 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: a `Tensor` wraps a contiguous row-major
float32 numpy array, primitive ops build a computation graph when gradients
are requested, and `backward` replays the graph in reverse topological
order. Leaves accumulate gradients with `+=`; the optimizer is responsible
for zeroing them. All forward math is float32; float64 belongs only in test
oracles.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import GradientError, NonFiniteError, ShapeError

_GELU_C = np.float32(np.sqrt(2.0 / np.pi))
_GELU_A = np.float32(0.044715)

_state = threading.local()


def _contig_f32(data) -> np.ndarray:
    """Row-major float32 view-or-copy that keeps 0-d arrays 0-d."""
    arr = np.asarray(data, dtype=np.float32)
    if not arr.flags["C_CONTIGUOUS"]:
        arr = arr.copy(order="C")
    return arr


def _all_finite(arr: np.ndarray) -> bool:
    # min/max propagate NaN and catch +/-Inf without allocating a bool temp.
    if arr.size == 0:
        return True
    return bool(np.isfinite(arr.min()) and np.isfinite(arr.max()))


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference paths)."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """fp32 value node. Immutable by convention outside the optimizer."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = _contig_f32(data)
        if not _all_finite(arr):
            raise NonFiniteError("tensor holds non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        # Leaves with requires_grad start at zero so an untouched parameter
        # reads as gradient exactly 0 after any backward pass.
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None = None
        self._op = "leaf"
        self._consumed = False

    # -- introspection ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def is_leaf(self) -> bool:
        return self._vjp is None and not self._consumed

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------------

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int] | None = None) -> "Tensor":
        return transpose(self, axes)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# -- graph plumbing ----------------------------------------------------------


def _record(out_data: np.ndarray, op: str, parents: tuple[Tensor, ...], vjp) -> Tensor:
    if not _all_finite(np.asarray(out_data)):
        raise NonFiniteError(f"non-finite result in op '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = _contig_f32(out_data)
    out.grad = None
    out._op = op
    out._consumed = False
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


class GradTape:
    """Topologically ordered record of the ops reachable from a root tensor.

    Holds the graph nodes such that every node's parents appear before the
    node itself; `backward` consumes the tape.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "GradTape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires-grad leaf, then consume the tape."""
    if loss.ndim != 0:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("loss does not require grad: nothing on the tape")
    if loss._consumed:
        raise GradientError("tape already consumed by a previous backward")
    if loss._vjp is None and loss.grad is None:
        raise GradientError("loss is disconnected from any requires-grad leaf")

    tape = GradTape.trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float32)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.requires_grad:
                node.grad += g
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            if acc is None:
                grads[id(parent)] = pg.astype(np.float32, copy=False)
            else:
                acc += pg
    for node in tape.nodes:
        if node._vjp is not None:
            node._vjp = None
            node._parents = ()
            node._consumed = True


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# -- primitives --------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from exc

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, "add", (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}") from exc

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(out, "sub", (a, b), vjp)


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)) and not isinstance(a, (int, float)):
        return scale(as_tensor(a), float(b))
    if isinstance(a, (int, float)):
        return scale(as_tensor(b), float(a))
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from exc
    a_data, b_data = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * b_data, a.shape), _unbroadcast(g * a_data, b.shape)

    return _record(out, "mul", (a, b), vjp)


def scale(a: Tensor, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)

    def vjp(g):
        return (g * np.float32(s),)

    return _record(a.data * np.float32(s), "scale", (a,), vjp)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul expects operands with ndim >= 2")
    a_data, b_data = a.data, b.data

    if a.ndim > 2 and b.ndim == 2:
        # Fold batch dims into one GEMM instead of looping stacked matmuls.
        if a_data.shape[-1] != b_data.shape[0]:
            raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
        lead = a_data.shape[:-1]
        a2 = a_data.reshape(-1, a_data.shape[-1])
        out = (a2 @ b_data).reshape(*lead, b_data.shape[1])

        def vjp(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b_data.T).reshape(a_data.shape)
            gb = a2.T @ g2
            return ga, gb

        return _record(out, "matmul", (a, b), vjp)

    try:
        out = a_data @ b_data
    except ValueError as exc:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}") from exc

    def vjp(g):
        ga = g @ b_data.swapaxes(-1, -2)
        gb = a_data.swapaxes(-1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, "matmul", (a, b), vjp)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _record(a.data.transpose(axes), "transpose", (a,), vjp)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {a.shape} -> {shape}") from exc
    orig = a.shape

    def vjp(g):
        return (g.reshape(orig),)

    return _record(out, "reshape", (a,), vjp)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of zero tensors")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError("concat: incompatible shapes") from exc
    extents = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + extents)

    def vjp(g):
        moved = np.moveaxis(g, axis, 0)
        pieces = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            pieces.append(np.ascontiguousarray(np.moveaxis(moved[lo:hi], 0, axis)))
        return tuple(pieces)

    return _record(out, "concat", tuple(ts), vjp)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice `length` entries along `axis` starting at `start`."""
    a = as_tensor(a)
    if not (0 <= start and start + length <= a.shape[axis]):
        raise ShapeError(f"narrow: [{start}:{start + length}) out of range on axis {axis} of {a.shape}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape, dtype=np.float32)
        full[index] = g
        return (full,)

    return _record(a.data[index].copy(), "narrow", (a,), vjp)


def take(a: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows of `a` (axis 0) by an integer index array; embedding lookups."""
    a = as_tensor(a)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("take expects integer indices")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"take: index out of range for leading extent {a.shape[0]}")
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape, dtype=np.float32)
        np.add.at(full, idx, g)
        return (full,)

    return _record(a.data[idx], "take", (a,), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    s = out

    def vjp(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return _record(out, "softmax", (a,), vjp)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine part)."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.float32(eps))
    y = (a.data - mu) * inv
    n = a.shape[-1]

    def vjp(g):
        g_mean = g.mean(axis=-1, keepdims=True)
        gy_mean = (g * y).mean(axis=-1, keepdims=True)
        return ((g - g_mean - y * gy_mean) * inv,)

    if n == 0:
        raise ShapeError("layer_norm on empty last axis")
    return _record(y, "layer_norm", (a,), vjp)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximation GELU: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x * x * x)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def vjp(g):
        sech2 = 1.0 - th * th
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * sech2 * d_inner),)

    return _record(out, "gelu", (a,), vjp)


def mean(a: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis)
    if axis is None:
        count = a.size
        axes: tuple[int, ...] = tuple(range(a.ndim))
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    shape = a.shape

    def vjp(g):
        g_exp = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g_exp / np.float32(count), shape).astype(np.float32),)

    return _record(out, "mean", (a,), vjp)


def sum_of_squares(a: Tensor) -> Tensor:
    """Scalar sum of all squared entries."""
    a = as_tensor(a)
    out = np.float32((a.data.astype(np.float32) ** 2).sum())
    a_data = a.data

    def vjp(g):
        return (2.0 * g * a_data,)

    return _record(out, "sum_of_squares", (a,), vjp)
