"""
Dense differentiable arrays with a recording tape.

Every primitive takes Tensors (or anything numpy can turn into a float64
array), computes its forward value eagerly and, when a Tape is active and
one of its inputs requires a gradient, records a closure that maps the
output gradient to the input gradients. `Tape.gradient` replays those
closures in reverse recording order, which is a reverse topological order
because an output is always recorded after its inputs.

Primitives accept leading batch axes: matmul follows numpy's batched
matmul, conv1d and maxpool1d run along axis -2 with channels on axis -1.
"""
import logging
import threading
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from core.errors import DimensionError, EmptyReductionError, WindowTooShortError

logger = logging.getLogger(__name__)

DTYPE = np.float64
LEAKY_SLOPE = 0.2

_local = threading.local()


def _tape_stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _frozen(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = _frozen(np.array(data, dtype=DTYPE))
        self.requires_grad = requires_grad
        self.name = name
        self.parents: Tuple["Tensor", ...] = ()
        self.backward_fn: Optional[Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]] = None
        self.op: Optional[str] = None

    @classmethod
    def _result(cls, data: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = _frozen(np.asarray(data, dtype=DTYPE))
        out.requires_grad = False
        out.name = None
        out.parents = ()
        out.backward_fn = None
        out.op = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, op={self.op})"

    # Operator sugar over the primitives below
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A trainable leaf. The optimizer swaps `data` for a new frozen array on every update."""

    __slots__ = ()

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True, name=name)

    def assign(self, value: np.ndarray) -> None:
        if value.shape != self.data.shape:
            raise DimensionError(f"cannot assign shape {value.shape} to parameter '{self.name}' of shape {self.shape}")
        self.data = _frozen(np.array(value, dtype=DTYPE))


TensorLike = Union[Tensor, np.ndarray, float, int, Sequence]


def as_tensor(value: TensorLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class Tape:
    """Ordered record of primitive applications; use as a context manager."""

    def __init__(self):
        self.nodes: List[Tensor] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False

    def record(self, node: Tensor) -> None:
        self.nodes.append(node)

    def gradient(self, loss: Tensor, leaves: Sequence[Tensor]) -> List[np.ndarray]:
        """
        Reverse-mode gradient of a scalar `loss` with respect to each leaf.
        Leaves that do not influence the loss get zeros of their own shape.
        """
        if loss.data.size != 1:
            raise DimensionError(f"gradient needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            upstream = grads.pop(id(node), None)
            if upstream is None:
                continue
            for parent, grad in zip(node.parents, node.backward_fn(upstream)):
                if grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + grad if key in grads else grad
        return [np.asarray(grads.get(id(leaf), np.zeros_like(leaf.data)), dtype=DTYPE) for leaf in leaves]


def _record(data: np.ndarray, parents: Tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor._result(data)
    out.op = op
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
        tape.record(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sums `grad` down to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _normalize_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


# ──────────────────────────────────────────────
# Elementwise arithmetic
# ──────────────────────────────────────────────

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise DimensionError(f"add: cannot broadcast {a.shape} with {b.shape}") from e

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(data, (a, b), backward, "add")


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as e:
        raise DimensionError(f"sub: cannot broadcast {a.shape} with {b.shape}") from e

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(data, (a, b), backward, "sub")


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise DimensionError(f"mul: cannot broadcast {a.shape} with {b.shape}") from e

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(data, (a, b), backward, "mul")


def clamped_log(x: TensorLike, eps: float = 1e-12) -> Tensor:
    x = as_tensor(x)
    safe = np.maximum(x.data, eps)
    data = np.log(safe)

    def backward(g):
        return (np.where(x.data > eps, g / safe, 0.0),)

    return _record(data, (x,), backward, "clamped_log")


# ──────────────────────────────────────────────
# Shape manipulation
# ──────────────────────────────────────────────

def reshape(x: TensorLike, shape: Tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from e

    def backward(g):
        return (g.reshape(x.shape),)

    return _record(data, (x,), backward, "reshape")


def swapaxes(x: TensorLike, axis1: int, axis2: int) -> Tensor:
    x = as_tensor(x)
    axis1, axis2 = _normalize_axis(axis1, x.ndim), _normalize_axis(axis2, x.ndim)
    data = np.swapaxes(x.data, axis1, axis2)

    def backward(g):
        return (np.swapaxes(g, axis1, axis2),)

    return _record(data, (x,), backward, "swapaxes")


def select(x: TensorLike, index: int, axis: int) -> Tensor:
    """Picks one position along `axis`, dropping that axis."""
    x = as_tensor(x)
    axis = _normalize_axis(axis, x.ndim)
    if not -x.shape[axis] <= index < x.shape[axis]:
        raise DimensionError(f"index {index} out of range for axis {axis} of {x.shape}")
    data = np.take(x.data, index, axis=axis)

    def backward(g):
        grad = np.zeros(x.shape, dtype=DTYPE)
        slicer = [slice(None)] * x.ndim
        slicer[axis] = index
        grad[tuple(slicer)] = g
        return (grad,)

    return _record(data, (x,), backward, "select")


# ──────────────────────────────────────────────
# Linear algebra
# ──────────────────────────────────────────────

def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    """Batched matrix product over the last two axes: (..., m, k) @ (..., k, n)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as e:
        raise DimensionError(f"matmul: batch axes of {a.shape} and {b.shape} do not broadcast") from e

    def backward(g):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _record(data, (a, b), backward, "matmul")


def node_mix(x: TensorLike, mixing: np.ndarray) -> Tensor:
    """
    Applies a fixed (F, F) node-mixing matrix along axis -2 of (..., F, ch).
    The matrix is a constant: no gradient flows into it.
    """
    x = as_tensor(x)
    mixing = np.asarray(mixing, dtype=DTYPE)
    if x.ndim < 2 or mixing.shape != (x.shape[-2], x.shape[-2]):
        raise DimensionError(f"node_mix: matrix {mixing.shape} does not fit node axis of {x.shape}")
    data = np.matmul(mixing, x.data)

    def backward(g):
        return (np.matmul(mixing.T, g),)

    return _record(data, (x,), backward, "node_mix")


# ──────────────────────────────────────────────
# Convolution and pooling along time (axis -2)
# ──────────────────────────────────────────────

def conv1d(x: TensorLike, kernels: TensorLike, bias: TensorLike) -> Tensor:
    """
    Valid 1-D convolution: out[..., t, o] = bias[o] + sum_{j<k, c} x[..., t+j, c] * kernels[j, c, o].
    """
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    if kernels.ndim != 3:
        raise DimensionError(f"conv1d kernels must be (k, in_ch, out_ch), got {kernels.shape}")
    k, in_ch, out_ch = kernels.shape
    if x.ndim < 2 or x.shape[-1] != in_ch:
        raise DimensionError(f"conv1d input {x.shape} does not end with {in_ch} channels")
    if bias.shape != (out_ch,):
        raise DimensionError(f"conv1d bias must have shape ({out_ch},), got {bias.shape}")
    time = x.shape[-2]
    if time < k:
        raise WindowTooShortError(f"conv1d needs at least {k} time steps, got {time}")
    out_time = time - k + 1

    windows = sliding_window_view(x.data, k, axis=-2)  # (..., out_time, in_ch, k)
    data = np.einsum("...tck,kco->...to", windows, kernels.data) + bias.data

    def backward(g):
        flat_windows = windows.reshape((-1, out_time, in_ch, k))
        flat_g = g.reshape((-1, out_time, out_ch))
        grad_kernels = np.einsum("btck,bto->kco", flat_windows, flat_g)
        grad_bias = flat_g.sum(axis=(0, 1))
        grad_x = np.zeros(x.shape, dtype=DTYPE)
        for j in range(k):
            grad_x[..., j:j + out_time, :] += np.matmul(g, kernels.data[j].T)
        return grad_x, grad_kernels, grad_bias

    return _record(data, (x, kernels, bias), backward, "conv1d")


def maxpool1d(x: TensorLike, window: int = 2) -> Tensor:
    """
    Non-overlapping max pooling along axis -2 (stride = window). A trailing
    remainder shorter than the window is dropped; ties route the gradient to
    the earliest element.
    """
    x = as_tensor(x)
    if window < 1:
        raise DimensionError(f"pool window must be >= 1, got {window}")
    if x.ndim < 2:
        raise DimensionError(f"maxpool1d needs (..., time, ch), got {x.shape}")
    time, ch = x.shape[-2], x.shape[-1]
    if time < window:
        raise WindowTooShortError(f"maxpool1d needs at least {window} time steps, got {time}")
    out_time = time // window
    lead = x.shape[:-2]
    blocks = x.data[..., : out_time * window, :].reshape(lead + (out_time, window, ch))
    choice = np.argmax(blocks, axis=-2)  # first occurrence on ties
    data = np.take_along_axis(blocks, choice[..., None, :], axis=-2)[..., 0, :]

    def backward(g):
        grad_blocks = np.zeros(blocks.shape, dtype=DTYPE)
        np.put_along_axis(grad_blocks, choice[..., None, :], g[..., None, :], axis=-2)
        grad_x = np.zeros(x.shape, dtype=DTYPE)
        grad_x[..., : out_time * window, :] = grad_blocks.reshape(lead + (out_time * window, ch))
        return (grad_x,)

    return _record(data, (x,), backward, "maxpool1d")


# ──────────────────────────────────────────────
# Nonlinearities
# ──────────────────────────────────────────────

def relu(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    data = np.maximum(x.data, 0.0)

    def backward(g):
        return (g * (x.data > 0),)

    return _record(data, (x,), backward, "relu")


def leaky_relu(x: TensorLike, slope: float = LEAKY_SLOPE) -> Tensor:
    x = as_tensor(x)
    data = np.where(x.data > 0, x.data, slope * x.data)

    def backward(g):
        return (np.where(x.data > 0, g, slope * g),)

    return _record(data, (x,), backward, "leaky_relu")


def sigmoid(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    # exp of a non-positive number only
    e = np.exp(-np.abs(x.data))
    data = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward(g):
        return (g * data * (1.0 - data),)

    return _record(data, (x,), backward, "sigmoid")


def softmax(x: TensorLike, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Numerically stable softmax along `axis`. Entries where the broadcastable
    boolean `mask` is False get probability 0; every slice needs at least one
    unmasked entry.
    """
    x = as_tensor(x)
    axis = _normalize_axis(axis, x.ndim)
    logits = x.data if mask is None else np.where(mask, x.data, -np.inf)
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (data * (g - np.sum(g * data, axis=axis, keepdims=True)),)

    return _record(data, (x,), backward, "softmax")


# ──────────────────────────────────────────────
# Reductions
# ──────────────────────────────────────────────

def reduce_sum(x: TensorLike, axis: Optional[int] = None) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        data = np.sum(x.data)

        def backward(g):
            return (np.broadcast_to(g, x.shape).copy(),)

        return _record(data, (x,), backward, "reduce_sum")
    axis = _normalize_axis(axis, x.ndim)
    data = np.sum(x.data, axis=axis)

    def backward_axis(g):
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _record(data, (x,), backward_axis, "reduce_sum")


def reduce_mean(x: TensorLike, axis: Optional[int] = None) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.data.size
        if count == 0:
            raise EmptyReductionError("mean over an empty tensor")
        data = np.sum(x.data) / count

        def backward(g):
            return (np.full(x.shape, g / count, dtype=DTYPE),)

        return _record(data, (x,), backward, "reduce_mean")
    axis = _normalize_axis(axis, x.ndim)
    count = x.shape[axis]
    if count == 0:
        raise EmptyReductionError(f"mean over empty axis {axis} of {x.shape}")
    data = np.sum(x.data, axis=axis) / count

    def backward_axis(g):
        return (np.broadcast_to(np.expand_dims(g / count, axis), x.shape).copy(),)

    return _record(data, (x,), backward_axis, "reduce_mean")


def reduce_max(x: TensorLike, axis: int) -> Tensor:
    x = as_tensor(x)
    axis = _normalize_axis(axis, x.ndim)
    if x.shape[axis] == 0:
        raise EmptyReductionError(f"max over empty axis {axis} of {x.shape}")
    choice = np.expand_dims(np.argmax(x.data, axis=axis), axis)  # first occurrence on ties
    data = np.take_along_axis(x.data, choice, axis=axis).squeeze(axis)

    def backward(g):
        grad = np.zeros(x.shape, dtype=DTYPE)
        np.put_along_axis(grad, choice, np.expand_dims(g, axis), axis=axis)
        return (grad,)

    return _record(data, (x,), backward, "reduce_max")


# ──────────────────────────────────────────────
# Initialization and gradient checking
# ──────────────────────────────────────────────

def glorot_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def grad_check(f: Callable[[], Tensor], leaves: Sequence[Tensor], h: float = 1e-6) -> float:
    """
    Compares tape gradients of the scalar `f()` with central finite
    differences, leaf by leaf. Returns the worst relative error
    ||analytic - numeric|| / max(||analytic|| + ||numeric||, 1e-12).
    """
    with Tape() as tape:
        loss = f()
    analytic = tape.gradient(loss, leaves)

    worst = 0.0
    for leaf, grad in zip(leaves, analytic):
        base = leaf.data
        numeric = np.zeros(base.shape, dtype=DTYPE)
        for i in range(base.size):
            shifted = base.copy()
            shifted.flat[i] = base.flat[i] + h
            leaf.data = _frozen(shifted)
            upper = float(f().data)
            shifted = base.copy()
            shifted.flat[i] = base.flat[i] - h
            leaf.data = _frozen(shifted)
            lower = float(f().data)
            numeric.flat[i] = (upper - lower) / (2.0 * h)
        leaf.data = base
        scale = max(np.linalg.norm(grad) + np.linalg.norm(numeric), 1e-12)
        error = float(np.linalg.norm(grad - numeric) / scale)
        logger.debug(f"grad_check leaf {leaf.name or leaf.shape}: relative error {error:.3e}")
        worst = max(worst, error)
    return worst
