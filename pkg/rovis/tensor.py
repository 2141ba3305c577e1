"""Dense float64 tensors with reverse-mode differentiation.

Binary ops require operands of identical shape. The only implicit
broadcasting is against Python scalars; anything else goes through
broadcast_to() with an explicit target shape.
"""

from __future__ import annotations

import os
import threading
from contextlib import contextmanager
from functools import lru_cache
from numbers import Number
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf, expit

from .errors import GraphError, ShapeError

Axis = Union[None, int, Tuple[int, ...]]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _debug_enabled() -> bool:
    flag = getattr(_state, "debug", None)
    if flag is None:
        return os.environ.get("ROVIS_DEBUG", "") == "1"
    return flag


def set_debug(enabled: bool) -> None:
    """Toggle the NaN-input check for the current thread."""
    _state.debug = bool(enabled)


def graph_edge_count() -> int:
    """Number of graph nodes recorded on this thread so far."""
    return getattr(_state, "edges", 0)


@contextmanager
def no_grad():
    """Run ops without recording graph edges (thread-local)."""
    previous = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """An n-dimensional float64 array that can take part in a graph."""

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward_fn: Optional[BackwardFn] = None
        self._op = "leaf"
        self._released = False

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward_fn = None
        out._op = "leaf"
        out._released = False
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: expected a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    def __radd__(self, other):
        return add_scalar(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else mul_scalar(self, other)

    def __rmul__(self, other):
        return mul_scalar(self, other)

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else mul_scalar(self, 1.0 / other)

    def __rtruediv__(self, other):
        return mul_scalar(power(self, -1.0), other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)


class Parameter(Tensor):
    """A learnable leaf tensor."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: Tuple[Tensor, ...], backward_fn: BackwardFn, op: str) -> Tensor:
    if _debug_enabled():
        for parent in parents:
            if np.isnan(parent.data).any():
                raise GraphError(f"{op}: NaN in input of shape {parent.shape}")
    out = Tensor._wrap(data)
    out._op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
        _state.edges = graph_edge_count() + 1
    return out


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _check_scalar(op: str, value) -> float:
    if not isinstance(value, Number):
        raise ShapeError(f"{op}: expected a Python scalar, got {type(value).__name__}")
    return float(value)


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack = [(root, False)]
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
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad tensor reachable from loss."""
    if loss.data.ndim != 0:
        raise GraphError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if loss._released:
        raise GraphError("backward: graph already consumed; run a new forward pass")
    if not loss.requires_grad:
        raise GraphError("backward: loss does not depend on any tensor that requires grad")

    order = _topological_order(loss)
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        node.grad = np.array(grad, copy=True) if node.grad is None else node.grad + grad
        if node._backward_fn is None:
            continue
        for parent, parent_grad in zip(node._parents, node._backward_fn(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + parent_grad if key in pending else parent_grad

    for node in order:
        if node._backward_fn is not None:
            node._parents = ()
            node._backward_fn = None
        node._released = True


# elementwise ---------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same("mul", a, b)
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same("div", a, b)
    return _make(
        a.data / b.data,
        (a, b),
        lambda g: (g / b.data, -g * a.data / (b.data * b.data)),
        "div",
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def add_scalar(a: Tensor, value) -> Tensor:
    value = _check_scalar("add_scalar", value)
    return _make(a.data + value, (a,), lambda g: (g,), "add_scalar")


def mul_scalar(a: Tensor, value) -> Tensor:
    value = _check_scalar("mul_scalar", value)
    return _make(a.data * value, (a,), lambda g: (g * value,), "mul_scalar")


def power(a: Tensor, exponent) -> Tensor:
    exponent = _check_scalar("power", exponent)
    return _make(
        a.data ** exponent,
        (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1.0),),
        "power",
    )


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def clip(a: Tensor, low: float, high: float) -> Tensor:
    inside = (a.data >= low) & (a.data <= high)
    return _make(np.clip(a.data, low, high), (a,), lambda g: (g * inside,), "clip")


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def gelu(a: Tensor) -> Tensor:
    cdf = 0.5 * (1.0 + erf(a.data / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * a.data * a.data) / np.sqrt(2.0 * np.pi)
    return _make(a.data * cdf, (a,), lambda g: (g * (cdf + a.data * pdf),), "gelu")


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeError(f"masked_fill: shape mismatch {a.shape} vs {mask.shape}")
    keep = ~mask
    return _make(np.where(mask, value, a.data), (a,), lambda g: (g * keep,), "masked_fill")


# reductions and normalisation -----------------------------------------------

def _normalize_axis(axis: Axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(sorted(ax % ndim for ax in axes))


def reduce_sum(a: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward_fn, "reduce_sum")


def reduce_mean(a: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if count == 0:
        raise ShapeError(f"reduce_mean: empty reduction over shape {a.shape}")
    return mul_scalar(reduce_sum(a, axis, keepdims), 1.0 / count)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward_fn, "softmax")


def layernorm(a: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    features = a.shape[-1]
    if scale.shape != (features,) or shift.shape != (features,):
        raise ShapeError(f"layernorm: shape mismatch {a.shape} vs {scale.shape}/{shift.shape}")
    mean = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mean
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    normed = centered * inv_std
    lead = tuple(range(a.ndim - 1))

    def backward_fn(g):
        g_normed = g * scale.data
        g_a = inv_std / features * (
            features * g_normed
            - g_normed.sum(axis=-1, keepdims=True)
            - normed * (g_normed * normed).sum(axis=-1, keepdims=True)
        )
        return g_a, (g * normed).sum(axis=lead), g.sum(axis=lead)

    return _make(normed * scale.data + shift.data, (a, scale, shift), backward_fn, "layernorm")


# linear algebra and layout --------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., n, k) @ (..., k, m) with identical leading dims."""
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")

    def backward_fn(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _make(a.data @ b.data, (a, b), backward_fn, "matmul")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from exc
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} do not permute shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from exc
    extra = len(shape) - a.ndim

    def backward_fn(g):
        if extra:
            g = g.sum(axis=tuple(range(extra)))
        stretched = tuple(i for i, n in enumerate(a.shape) if n == 1 and g.shape[i] != 1)
        if stretched:
            g = g.sum(axis=stretched, keepdims=True)
        return (g,)

    return _make(out, (a,), backward_fn, "broadcast_to")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: no tensors given")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis):
            raise ShapeError(f"concat: shape mismatch {tensors[0].shape} vs {t.shape}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward_fn, "concat")


def gather(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Select entries along one axis by a 1-D integer index array."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    axis = axis % a.ndim
    size = a.shape[axis]
    if idx.size and (idx.min() < -size or idx.max() >= size):
        raise ShapeError(f"gather: index out of range for axis {axis} of shape {a.shape}")

    def backward_fn(g):
        grad = np.zeros_like(a.data)
        np.add.at(np.moveaxis(grad, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (grad,)

    return _make(np.take(a.data, idx, axis=axis), (a,), backward_fn, "gather")


# spatial --------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """x: (N, C, H, W), weight: (O, C, kh, kw), bias: (O,)."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: shape mismatch {x.shape} vs {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d: shape mismatch {weight.shape} vs bias {bias.shape}")
    n, _, h, w = x.shape
    out_ch, _, kh, kw = weight.shape
    s, p = int(stride), int(padding)
    ho = (h + 2 * p - kh) // s + 1
    wo = (w + 2 * p - kw) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: shape mismatch {x.shape} vs {weight.shape} (empty output)")
    padded = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))

    def window(arr, i, j):
        return arr[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]

    out = np.zeros((n, out_ch, ho, wo))
    for i in range(kh):
        for j in range(kw):
            out += np.tensordot(window(padded, i, j), weight.data[:, :, i, j], axes=([1], [1])).transpose(0, 3, 1, 2)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward_fn(g):
        g_padded = np.zeros_like(padded)
        g_weight = np.zeros_like(weight.data)
        for i in range(kh):
            for j in range(kw):
                g_weight[:, :, i, j] = np.tensordot(g, window(padded, i, j), axes=([0, 2, 3], [0, 2, 3]))
                window(g_padded, i, j)[...] += np.tensordot(g, weight.data[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
        g_x = g_padded[:, :, p:p + h, p:p + w]
        if bias is None:
            return g_x, g_weight
        return g_x, g_weight, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward_fn, "conv2d")


@lru_cache(maxsize=128)
def interpolation_matrix(src: int, dst: int) -> np.ndarray:
    """Half-pixel bilinear weights mapping src samples to dst samples."""
    pos = np.clip((np.arange(dst) + 0.5) * (src / dst) - 0.5, 0.0, src - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    matrix = np.zeros((dst, src))
    np.add.at(matrix, (np.arange(dst), lo), 1.0 - frac)
    np.add.at(matrix, (np.arange(dst), hi), frac)
    matrix.setflags(write=False)
    return matrix


def bilinear_resize(a: Tensor, size: Tuple[int, int]) -> Tensor:
    """Resize the last two axes to size=(H', W')."""
    if a.ndim < 2:
        raise ShapeError(f"bilinear_resize: needs at least 2 dims, got {a.shape}")
    rows = interpolation_matrix(a.shape[-2], int(size[0]))
    cols = interpolation_matrix(a.shape[-1], int(size[1]))
    return _make(
        rows @ a.data @ cols.T,
        (a,),
        lambda g: (rows.T @ g @ cols,),
        "bilinear_resize",
    )


def resize_array(arr: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """bilinear_resize on a plain array, no graph."""
    return interpolation_matrix(arr.shape[-2], int(size[0])) @ arr @ interpolation_matrix(arr.shape[-1], int(size[1])).T
