"""
caila.tensor
~~~~~~~~~~~~

Dense float tensors with tape-based reverse-mode differentiation.

Every forward op goes through :func:`apply_op`, which checks the result for
NaN/Inf and, while a :class:`Tape` is recording, appends a node holding the
op's gradient rule. :func:`backward` replays the tape in reverse.
"""

from contextlib import contextmanager
from dataclasses import dataclass
import logging
import math
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf

from .exceptions import (
    ContractError,
    DegenerateInputError,
    DimensionError,
    NonFiniteError,
    ParameterError,
)

LOGGER = logging.getLogger("caila")

GradFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
Operand = Union["Tensor", np.ndarray, float, int]

_DTYPE: Any = np.float32
_ACTIVE_TAPE: Optional["Tape"] = None


@contextmanager
def precision(dtype: Any) -> Iterator[None]:
    """Run ops in ``dtype`` (float32 or float64) inside the block."""
    global _DTYPE
    previous = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = previous


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_grad")

    def __init__(self, data: Any, requires_grad: bool = False, name: Optional[str] = None) -> None:
        array = np.array(data, dtype=_DTYPE)
        if any(dim <= 0 for dim in array.shape):
            raise DimensionError(f"Tensor dimensions must be positive, got {array.shape}")
        _check_finite(array, "Tensor")
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.name = name
        self._grad: Optional[np.ndarray] = None

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.name = None
        out._grad = None
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

    @property
    def grad(self) -> Optional[np.ndarray]:
        """Accumulated gradient; read-only zeros until one arrives, None without ``requires_grad``."""
        if not self.requires_grad:
            return None
        if self._grad is None:
            zeros = np.zeros_like(self.data)
            zeros.flags.writeable = False
            return zeros
        return self._grad

    @property
    def received_grad(self) -> bool:
        return self._grad is not None

    def zero_grad(self) -> None:
        self._grad = None

    def set_requires_grad(self, flag: bool) -> None:
        self.requires_grad = flag
        if not flag:
            self._grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        if self._grad is None:
            self._grad = np.array(grad, dtype=self.data.dtype)
        else:
            self._grad = (self._grad + grad).astype(self.data.dtype, copy=False)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __add__(self, other: Operand) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Operand) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Operand) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: float) -> "Tensor":
        return scale(self, 1.0 / float(other))

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        label = f" '{self.name}'" if self.name else ""
        return f"<Tensor{label} shape={self.shape} requires_grad={self.requires_grad}>"


@dataclass(frozen=True)
class Node:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: GradFn


class Tape:
    """Ordered record of the ops executed while recording."""

    def __init__(self) -> None:
        self._nodes: List[Node] = []

    @property
    def nodes(self) -> List[Node]:
        return self._nodes

    def record(self, node: Node) -> None:
        self._nodes.append(node)

    @contextmanager
    def recording(self) -> Iterator["Tape"]:
        global _ACTIVE_TAPE
        previous = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        try:
            yield self
        finally:
            _ACTIVE_TAPE = previous

    def __len__(self) -> int:
        return len(self._nodes)

    def __iter__(self) -> Iterator[Node]:
        return iter(self._nodes)


def apply_op(op: str, inputs: Sequence[Tensor], data: np.ndarray, backward_fn: GradFn) -> Tensor:
    """Wrap the result of a forward computation and record it on the active tape."""
    data = np.asarray(data, dtype=_DTYPE)
    _check_finite(data, op)
    track = _ACTIVE_TAPE is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, track)
    if track:
        assert _ACTIVE_TAPE is not None
        _ACTIVE_TAPE.record(Node(op, tuple(inputs), out, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape, retain_grads: bool = False) -> None:
    """Accumulate d(loss)/dt into ``t.grad`` for every leaf ``t`` that requires grad.

    With ``retain_grads`` intermediate op outputs get their gradient too.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        LOGGER.debug("backward called on a loss with no trainable inputs")
        return

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owners: Dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        grad = grads.pop(id(node.output), None)
        if grad is None:
            continue
        owners.pop(id(node.output), None)
        if retain_grads:
            node.output._accumulate(grad)
        for tensor, tensor_grad in zip(node.inputs, node.backward(grad)):
            if tensor_grad is None or not tensor.requires_grad:
                continue
            tensor_grad = np.asarray(tensor_grad, dtype=tensor.data.dtype)
            key = id(tensor)
            grads[key] = tensor_grad if key not in grads else grads[key] + tensor_grad
            owners[key] = tensor
    for key, grad in grads.items():
        owners[key]._accumulate(grad)


# Helpers


def as_tensor(value: Operand) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _normalize_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


# Elementwise arithmetic


def add(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return apply_op(
        "add", (a, b), a.data + b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return apply_op(
        "sub", (a, b), a.data - b.data,
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return apply_op(
        "mul", (a, b), a.data * b.data,
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(x: Tensor, factor: float) -> Tensor:
    return apply_op("scale", (x,), x.data * factor, lambda g: (g * factor,))


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        data = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise DimensionError(f"cannot broadcast {x.shape} to {shape}")
    return apply_op("broadcast_to", (x,), data, lambda g: (_unbroadcast(g, x.shape),))


# Linear algebra and shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batched over any leading axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def grad_fn(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        grad_a = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.ndim == 2:
            # fold the batch axes into rows rather than summing a batched product
            rows_a = a.data.reshape(-1, a.shape[-1])
            rows_g = np.broadcast_to(g, a.shape[:-1] + (g.shape[-1],)).reshape(-1, g.shape[-1])
            grad_b = rows_a.T @ rows_g
        else:
            grad_b = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return grad_a, grad_b

    return apply_op("matmul", (a, b), np.matmul(a.data, b.data), grad_fn)


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; by default swap the last two."""
    if axes is None:
        order = list(range(x.ndim))
        order[-2], order[-1] = order[-1], order[-2]
    else:
        order = [_normalize_axis(ax, x.ndim) for ax in axes]
    inverse = np.argsort(order)
    return apply_op("transpose", (x,), np.transpose(x.data, order), lambda g: (np.transpose(g, inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = x.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}")
    return apply_op("reshape", (x,), data, lambda g: (g.reshape(x.shape),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not xs:
        raise ParameterError("concat needs at least one tensor")
    axis = _normalize_axis(axis, xs[0].ndim)
    try:
        data = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[x.shape for x in xs]}")
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return apply_op("concat", tuple(xs), data, lambda g: tuple(np.split(g, bounds, axis=axis)))


def take(x: Tensor, indices: Any, axis: int = 0) -> Tensor:
    """Gather entries along ``axis``; an integer index drops the axis."""
    axis = _normalize_axis(axis, x.ndim)
    index = np.asarray(indices, dtype=np.int64)
    if index.size and (index.min() < -x.shape[axis] or index.max() >= x.shape[axis]):
        raise DimensionError(f"take: index out of range for axis {axis} of size {x.shape[axis]}")

    def grad_fn(g: np.ndarray) -> Tuple[np.ndarray]:
        grad = np.zeros_like(x.data)
        moved = np.moveaxis(grad, axis, 0)
        g_moved = np.moveaxis(g, list(range(axis, axis + index.ndim)), list(range(index.ndim)))
        np.add.at(moved, index, g_moved)
        return (grad,)

    return apply_op("take", (x,), np.take(x.data, index, axis=axis), grad_fn)


def place(x: Tensor, position: int, value: Tensor, axis: int = 1) -> Tensor:
    """Copy of ``x`` with the slice at ``position`` along ``axis`` replaced by ``value``."""
    axis = _normalize_axis(axis, x.ndim)
    slicer = (slice(None),) * axis + (position,)
    expected = x.shape[:axis] + x.shape[axis + 1:]
    if value.shape != expected:
        raise DimensionError(f"place: value shape {value.shape} does not match slot shape {expected}")
    data = x.data.copy()
    data[slicer] = value.data

    def grad_fn(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        grad_x = g.copy()
        grad_x[slicer] = 0
        return grad_x, g[slicer].copy()

    return apply_op("place", (x, value), data, grad_fn)


# Reductions (accumulate in double precision)


def sum(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    data = np.sum(x.data, axis=axis, dtype=np.float64, keepdims=keepdims)

    def grad_fn(g: np.ndarray) -> Tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return apply_op("sum", (x,), data, grad_fn)


def mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"dot: shapes differ {a.shape} vs {b.shape}")
    return sum(mul(a, b))


def average(xs: Sequence[Tensor]) -> Tensor:
    """Elementwise arithmetic mean of K same-shape tensors."""
    if not xs:
        raise ParameterError("average needs at least one tensor")
    shape = xs[0].shape
    if any(x.shape != shape for x in xs):
        raise ParameterError(f"average: shapes differ {[x.shape for x in xs]}")
    count = len(xs)
    total = np.zeros(shape, dtype=np.float64)
    for x in xs:
        total += x.data
    return apply_op("average", tuple(xs), total / count, lambda g: tuple(g / count for _ in xs))


# Activations and normalization


def gelu(x: Tensor) -> Tensor:
    """x * Phi(x) with the exact Gaussian CDF."""
    cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))

    def grad_fn(g: np.ndarray) -> Tuple[np.ndarray]:
        pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + x.data * pdf),)

    return apply_op("gelu", (x,), x.data * cdf, grad_fn)


def relu(x: Tensor) -> Tensor:
    return apply_op("relu", (x,), np.maximum(x.data, 0), lambda g: (g * (x.data > 0),))


ACTIVATIONS: Dict[str, Callable[[Tensor], Tensor]] = {"gelu": gelu, "relu": relu}


def softmax(x: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    if temperature <= 0:
        raise ParameterError(f"softmax temperature must be positive, got {temperature}")
    logits = x.data.astype(np.float64) / temperature
    shifted = np.exp(logits - logits.max(axis=axis, keepdims=True))
    probs = shifted / shifted.sum(axis=axis, keepdims=True)

    def grad_fn(g: np.ndarray) -> Tuple[np.ndarray]:
        inner = np.sum(g * probs, axis=axis, keepdims=True)
        return (probs * (g - inner) / temperature,)

    return apply_op("softmax", (x,), probs, grad_fn)


def cross_entropy(logits: Tensor, targets: Sequence[int], temperature: float = 1.0) -> Tensor:
    """Per-row cross-entropy of ``softmax(logits / temperature)`` against target columns."""
    if temperature <= 0:
        raise ParameterError(f"cross_entropy temperature must be positive, got {temperature}")
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects rows x classes logits, got {logits.shape}")
    target = np.asarray(targets, dtype=np.int64)
    rows, classes = logits.shape
    if target.shape != (rows,) or target.min() < 0 or target.max() >= classes:
        raise ContractError(f"cross_entropy: targets must be {rows} indices in [0, {classes})")
    scaled = logits.data.astype(np.float64) / temperature
    peak = scaled.max(axis=1, keepdims=True)
    shifted = np.exp(scaled - peak)
    total = shifted.sum(axis=1, keepdims=True)
    log_norm = peak[:, 0] + np.log(total[:, 0])
    losses = log_norm - scaled[np.arange(rows), target]

    def grad_fn(g: np.ndarray) -> Tuple[np.ndarray]:
        probs = shifted / total
        probs[np.arange(rows), target] -= 1.0
        return (probs * (g[:, None] / temperature),)

    return apply_op("cross_entropy", (logits,), losses, grad_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise DimensionError(f"layer_norm: width {width} vs gain {gain.shape} / bias {bias.shape}")
    if eps <= 0:
        raise ParameterError(f"layer_norm eps must be positive, got {eps}")
    values = x.data.astype(np.float64)
    centered = values - values.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    normed = centered * inv_std

    def grad_fn(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        g_normed = g * gain.data
        grad_x = inv_std * (
            g_normed
            - g_normed.mean(axis=-1, keepdims=True)
            - normed * (g_normed * normed).mean(axis=-1, keepdims=True)
        )
        rows_g = g.reshape(-1, width)
        grad_gain = np.sum(rows_g * normed.reshape(-1, width), axis=0)
        grad_bias = np.sum(rows_g, axis=0, dtype=np.float64)
        return grad_x, grad_gain, grad_bias

    return apply_op("layer_norm", (x, gain, bias), normed * gain.data + bias.data, grad_fn)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Scale to unit Euclidean norm along ``axis``."""
    values = x.data.astype(np.float64)
    norm = np.sqrt(np.sum(values * values, axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise DegenerateInputError("l2_normalize: cannot normalize a zero vector")
    unit = values / norm

    def grad_fn(g: np.ndarray) -> Tuple[np.ndarray]:
        return ((g - unit * np.sum(g * unit, axis=axis, keepdims=True)) / norm,)

    return apply_op("l2_normalize", (x,), unit, grad_fn)
