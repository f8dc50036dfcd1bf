"""Dense float64 tensors with reverse-mode differentiation.

The graph is built eagerly: every operation records vector-Jacobian
callbacks toward the operands that need gradients, and ``Tensor.backward``
replays them once in reverse topological order.  Numeric kernels are
backed by numpy; only the composition rules live here.  The kernel set
is deliberately small: matrix products, softmax, elementwise transcendentals,
reductions, shape moves, gathers, and padding, which is everything the
attention and sampling code in this package composes from.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ShapeError, UnsupportedOpError

__all__ = [
    "Tensor",
    "as_tensor",
    "matmul",
    "softmax_rows",
    "gradient",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "power",
    "tanh",
    "sigmoid",
    "softmax",
    "matmul_any",
    "reshape",
    "transpose",
    "swapaxes",
    "concat",
    "take_rows",
    "slice_",
    "pad",
    "tsum",
    "tmean",
    "tmax",
    "stop_gradient",
    "hard_threshold",
]

_Vjp = Callable[[np.ndarray], np.ndarray]


class Tensor:
    """A dense row-major float64 array plus the edges that produced it.

    ``requires_grad`` on a leaf makes ``backward`` accumulate into ``grad``;
    interior nodes carry it implicitly through their recorded edges.
    """

    __slots__ = ("data", "requires_grad", "grad", "_vjps")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._vjps: tuple[tuple["Tensor", _Vjp], ...] = ()

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        """A read-only view of the underlying array."""
        view = self.data.view()
        view.flags.writeable = False
        return view

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.shape}, grad={'yes' if self.requires_grad else 'no'})"

    # -- graph ---------------------------------------------------------

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable grad-requiring leaf.

        Only scalar roots are supported; that is all the package needs.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar root, got shape {self.shape}")
        order = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjps:
                for parent, vjp in node._vjps:
                    pg = vjp(g)
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            elif node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul_any(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _toposort(root: Tensor) -> list[Tensor]:
    # Iterative post-order; graphs from long training steps exceed the
    # recursion limit.
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
        for parent, _ in node._vjps:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or bool(t._vjps)


def _record(data: np.ndarray, edges: Iterable[tuple[Tensor, _Vjp]]) -> Tensor:
    out = Tensor(data)
    kept = tuple((p, f) for p, f in edges if _needs_grad(p))
    if kept:
        out._vjps = kept
        out.requires_grad = True
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` along the axes numpy broadcast over."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data
    return _record(
        data,
        [
            (a, lambda g: _unbroadcast(g, a.data.shape)),
            (b, lambda g: _unbroadcast(g, b.data.shape)),
        ],
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data
    return _record(
        data,
        [
            (a, lambda g: _unbroadcast(g, a.data.shape)),
            (b, lambda g: _unbroadcast(-g, b.data.shape)),
        ],
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data
    return _record(
        data,
        [
            (a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
            (b, lambda g: _unbroadcast(g * a.data, b.data.shape)),
        ],
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data
    return _record(
        data,
        [
            (a, lambda g: _unbroadcast(g / b.data, a.data.shape)),
            (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)),
        ],
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, [(a, lambda g: -g)])


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)
    return _record(data, [(a, lambda g: g * data)])


def log(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.log(a.data), [(a, lambda g: g / a.data)])


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    data = np.sqrt(a.data)
    return _record(data, [(a, lambda g: g * 0.5 / data)])


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    data = a.data**p
    return _record(data, [(a, lambda g: g * p * a.data ** (p - 1.0))])


def tanh(a) -> Tensor:
    a = as_tensor(a)
    data = np.tanh(a.data)
    return _record(data, [(a, lambda g: g * (1.0 - data * data))])


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # Split by sign to stay stable for large |x|.
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _record(data, [(a, lambda g: g * data * (1.0 - data))])


# ---------------------------------------------------------------------------
# linear algebra and shape moves


def matmul_any(a, b) -> Tensor:
    """Batched matrix product over the trailing two axes.

    Leading axes broadcast the numpy way.  The inner dimensions must agree.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}: inner dimensions differ")
    data = a.data @ b.data

    def vjp_a(g: np.ndarray) -> np.ndarray:
        return _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)

    def vjp_b(g: np.ndarray) -> np.ndarray:
        return _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)

    return _record(data, [(a, vjp_a), (b, vjp_b)])


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape
    data = a.data.reshape(tuple(shape))
    return _record(data, [(a, lambda g: g.reshape(old))])


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), [(a, lambda g: g.transpose(inverse))])


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return _record(np.swapaxes(a.data, ax1, ax2), [(a, lambda g: np.swapaxes(g, ax1, ax2))])


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i: int) -> _Vjp:
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g: np.ndarray) -> np.ndarray:
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        return vjp

    return _record(data, [(p, make_vjp(i)) for i, p in enumerate(parts)])


def take_rows(a, indices) -> Tensor:
    """Gather along the first axis; duplicate indices accumulate on backward."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)

    def vjp(g: np.ndarray) -> np.ndarray:
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return out

    return _record(a.data[idx], [(a, vjp)])


def slice_(a, key) -> Tensor:
    """Basic (non-fancy) indexing with slices and integers."""
    a = as_tensor(a)
    data = a.data[key]

    def vjp(g: np.ndarray) -> np.ndarray:
        out = np.zeros_like(a.data)
        out[key] = g
        return out

    return _record(data, [(a, vjp)])


def pad(a, pad_width: Sequence[tuple[int, int]]) -> Tensor:
    """Zero padding per axis; backward crops back."""
    a = as_tensor(a)
    pw = tuple((int(b), int(e)) for b, e in pad_width)
    data = np.pad(a.data, pw)
    crop = tuple(slice(b, b + n) for (b, _), n in zip(pw, a.data.shape))
    return _record(data, [(a, lambda g: g[crop])])


# ---------------------------------------------------------------------------
# reductions


def _restore_axes(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape
    return _record(data, [(a, lambda g: _restore_axes(g, shape, axis, keepdims).copy())])


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / data.size
    shape = a.data.shape
    return _record(data, [(a, lambda g: _restore_axes(g / count, shape, axis, keepdims).copy())])


def tmax(a, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum reduction; ties split the incoming gradient equally."""
    a = as_tensor(a)
    data = a.data.max(axis=axis, keepdims=keepdims)

    def vjp(g: np.ndarray) -> np.ndarray:
        full = _restore_axes(np.asarray(data), a.data.shape, axis, keepdims)
        mask = (a.data == full).astype(np.float64)
        counts = mask.sum(axis=axis, keepdims=True) if axis is not None else mask.sum()
        counts_full = _restore_axes(np.asarray(counts), a.data.shape, axis, True) if axis is not None else counts
        return _restore_axes(g, a.data.shape, axis, keepdims) * mask / counts_full

    return _record(data, [(a, vjp)])


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along ``axis``."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g: np.ndarray) -> np.ndarray:
        inner = (g * data).sum(axis=axis, keepdims=True)
        return (g - inner) * data

    return _record(data, [(a, vjp)])


# ---------------------------------------------------------------------------
# gradient barriers


def stop_gradient(a) -> Tensor:
    return Tensor(as_tensor(a).data)


def hard_threshold(a, thresh: float) -> Tensor:
    """1 where a > thresh else 0.  Not differentiable: backward raises."""
    a = as_tensor(a)
    data = (a.data > float(thresh)).astype(np.float64)

    def vjp(g: np.ndarray) -> np.ndarray:
        raise UnsupportedOpError("hard_threshold has no gradient; detach it from the objective")

    return _record(data, [(a, vjp)])


# ---------------------------------------------------------------------------
# contract-level entry points


def matmul(a, b) -> Tensor:
    """2-D matrix product with shape validation and a finiteness guarantee."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    return matmul_any(a, b)


def softmax_rows(a) -> Tensor:
    """Row-wise softmax of a 2-D tensor; each output row sums to one."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-D tensor, got {a.shape}")
    return softmax(a, axis=-1)


def gradient(objective: Callable[[Tensor], Tensor], wrt: Tensor) -> Tensor:
    """Derivative of a scalar-valued objective with respect to ``wrt``.

    ``objective`` receives a fresh leaf carrying ``wrt``'s values and must
    build its result from the differentiable kernels in this module.
    """
    leaf = Tensor(np.array(as_tensor(wrt).data, copy=True), requires_grad=True)
    out = objective(leaf)
    if not isinstance(out, Tensor):
        raise TypeError("objective must return a Tensor")
    if out.data.size != 1:
        raise ShapeError(f"objective must be scalar, got shape {out.shape}")
    out.backward()
    g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    return Tensor(g)
