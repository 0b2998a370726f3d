# src/attention_reid/autograd.py

"""
Tape-based reverse-mode automatic differentiation over float64 numpy
arrays.

Every forward op appends one node to a Tape (parents + a vector-Jacobian
closure). Tape.backward replays the tape in reverse append order, summing
the contributions of every consumer into its parents. Leaves created with
Tape.variable receive the accumulated gradient in ``.grad``.

Losses own their 1/N factors; nothing in here averages implicitly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import (
    ConfigurationError,
    DegenerateInputError,
    DimensionError,
    NumericalError,
    UsageError,
)

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]
VectorJacobian = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

NORM_EPS = 1e-12


class Activation(str, Enum):
    SIGMOID = "sigmoid"
    TANH = "tanh"
    RELU = "relu"


@dataclass
class _Node:
    parents: Tuple[int, ...]
    vjp: Optional[VectorJacobian]
    op: str


class Tensor:
    """
    A float64 array bound to one Tape.

    Tensors are never mutated after creation; ``grad`` is only filled in
    on leaves by Tape.backward.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape", "index")

    def __init__(self, data: np.ndarray, tape: "Tape", index: int, requires_grad: bool) -> None:
        self.data = data
        self.tape = tape
        self.index = index
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def backward(self) -> None:
        self.tape.backward(self)

    # arithmetic sugar ------------------------------------------------------

    def __add__(self, other: Union["Tensor", ArrayLike]) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: Union["Tensor", ArrayLike]) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(self.tape.lift(other), self)

    def __mul__(self, other: Union["Tensor", ArrayLike]) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __truediv__(self, other: float) -> "Tensor":
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """
    Append-only record of forward operations.

    Parent indices always precede child indices, so reverse append order
    is a valid topological order. One tape is driven by one thread.

    check_finite defaults to ``__debug__``: every forward value is checked
    for NaN/Inf unless Python runs with -O.
    """

    def __init__(self, check_finite: bool = __debug__) -> None:
        self.nodes: List[_Node] = []
        self.tensors: List[Tensor] = []
        self.check_finite = check_finite

    def __len__(self) -> int:
        return len(self.nodes)

    # ------------------------------------------------------------------ #
    # Leaves
    # ------------------------------------------------------------------ #

    def variable(self, value: ArrayLike, requires_grad: bool = True) -> Tensor:
        """Leaf tensor; receives ``.grad`` after backward."""
        data = np.array(value, dtype=np.float64)
        return self._append(data, _Node((), None, "leaf"), requires_grad)

    def constant(self, value: ArrayLike) -> Tensor:
        return self.variable(value, requires_grad=False)

    def lift(self, value: Union[Tensor, ArrayLike]) -> Tensor:
        if isinstance(value, Tensor):
            if value.tape is not self:
                raise UsageError("tensor belongs to a different tape")
            return value
        return self.constant(value)

    def bind(
        self,
        params: Mapping[str, np.ndarray],
        trainable: Union[bool, Callable[[str], bool]] = True,
    ) -> Dict[str, Tensor]:
        """
        Leaf tensors for a named parameter set. ``trainable`` may be a
        predicate on the name (frozen groups get requires_grad=False).
        """
        bound: Dict[str, Tensor] = {}
        for name, value in params.items():
            grad = trainable(name) if callable(trainable) else bool(trainable)
            bound[name] = self.variable(value, requires_grad=grad)
        return bound

    # ------------------------------------------------------------------ #
    # Recording
    # ------------------------------------------------------------------ #

    def record(
        self,
        value: np.ndarray,
        parents: Sequence[Tensor],
        vjp: VectorJacobian,
        op: str,
    ) -> Tensor:
        data = np.asarray(value, dtype=np.float64)
        for p in parents:
            if p.tape is not self:
                raise UsageError(f"{op}: operand belongs to a different tape")
        if self.check_finite and not np.all(np.isfinite(data)):
            raise NumericalError(f"{op} produced non-finite values")
        requires_grad = any(p.requires_grad for p in parents)
        node = _Node(tuple(p.index for p in parents), vjp if requires_grad else None, op)
        return self._append(data, node, requires_grad)

    def _append(self, data: np.ndarray, node: _Node, requires_grad: bool) -> Tensor:
        tensor = Tensor(data, self, len(self.nodes), requires_grad)
        self.nodes.append(node)
        self.tensors.append(tensor)
        return tensor

    # ------------------------------------------------------------------ #
    # Reverse pass
    # ------------------------------------------------------------------ #

    def backward(self, root: Tensor) -> None:
        """
        Accumulate d root / d leaf into ``leaf.grad`` for every
        requires_grad leaf that root depends on.
        """
        if root.tape is not self:
            raise UsageError("root belongs to a different tape")
        if root.data.size != 1:
            raise UsageError(f"backward needs a scalar root, got shape {root.shape}")

        grads: List[Optional[np.ndarray]] = [None] * (root.index + 1)
        grads[root.index] = np.ones_like(root.data)

        for i in range(root.index, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or node.vjp is None:
                continue
            contributions = node.vjp(g)
            for parent, contrib in zip(node.parents, contributions):
                if contrib is None or not self.tensors[parent].requires_grad:
                    continue
                contrib = np.asarray(contrib, dtype=np.float64)
                if contrib.shape != self.tensors[parent].shape:
                    raise DimensionError(
                        f"{node.op}: gradient shape {contrib.shape} does not match "
                        f"operand shape {self.tensors[parent].shape}"
                    )
                current = grads[parent]
                grads[parent] = contrib if current is None else current + contrib

        for i, g in enumerate(grads):
            tensor = self.tensors[i]
            if g is None or not tensor.requires_grad or self.nodes[i].parents:
                continue
            tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g


# ---------------------------------------------------------------------- #
# Helpers
# ---------------------------------------------------------------------- #


def _operands(a: Union[Tensor, ArrayLike], b: Union[Tensor, ArrayLike]) -> Tuple[Tensor, Tensor]:
    tape = a.tape if isinstance(a, Tensor) else getattr(b, "tape", None)
    if tape is None:
        raise UsageError("at least one operand must be a Tensor")
    return tape.lift(a), tape.lift(b)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from e


# ---------------------------------------------------------------------- #
# Elementwise
# ---------------------------------------------------------------------- #


def add(a: Union[Tensor, ArrayLike], b: Union[Tensor, ArrayLike]) -> Tensor:
    a, b = _operands(a, b)
    _broadcast_shape("add", a, b)
    return a.tape.record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a: Union[Tensor, ArrayLike], b: Union[Tensor, ArrayLike]) -> Tensor:
    a, b = _operands(a, b)
    _broadcast_shape("sub", a, b)
    return a.tape.record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a: Union[Tensor, ArrayLike], b: Union[Tensor, ArrayLike]) -> Tensor:
    a, b = _operands(a, b)
    _broadcast_shape("mul", a, b)
    return a.tape.record(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return x.tape.record(x.data * c, (x,), lambda g: (g * c,), "scale")


def apply_activation(x: Tensor, kind: Union[Activation, str]) -> Tensor:
    """
    Elementwise sigmoid / tanh / relu.

    relu'(0) is 0, so a hinge exactly at its kink passes no gradient.
    """
    try:
        kind = Activation(kind)
    except ValueError as e:
        raise ConfigurationError(f"unknown activation kind {kind!r}") from e

    if kind is Activation.SIGMOID:
        # exp(-log(1 + e^-x)) never overflows
        y = np.exp(-np.logaddexp(0.0, -x.data))
        return x.tape.record(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")
    if kind is Activation.TANH:
        y = np.tanh(x.data)
        return x.tape.record(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")
    mask = x.data > 0
    return x.tape.record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    return apply_activation(x, Activation.SIGMOID)


def tanh(x: Tensor) -> Tensor:
    return apply_activation(x, Activation.TANH)


def relu(x: Tensor) -> Tensor:
    return apply_activation(x, Activation.RELU)


# ---------------------------------------------------------------------- #
# Linear algebra and shape ops
# ---------------------------------------------------------------------- #


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    a_data, b_data = a.data, b.data
    return a.tape.record(
        a_data @ b_data,
        (a, b),
        lambda g: (g @ b_data.T, a_data.T @ g),
        "matmul",
    )


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")
    return x.tape.record(np.ascontiguousarray(x.data.T), (x,), lambda g: (g.T,), "transpose")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ weight.T + bias with weight stored (out, in)."""
    out = matmul(x, transpose(weight))
    return out if bias is None else add(out, bias)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from e
    original = x.shape
    return x.tape.record(out, (x,), lambda g: (g.reshape(original),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    tape = tensors[0].tape
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat shape mismatch along axis {axis}: {shapes}") from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return tape.record(out, tuple(tensors), lambda g: np.split(g, bounds, axis=axis), "concat")


def take(x: Tensor, indices: Sequence[int], axis: int = 0) -> Tensor:
    """Gather entries along ``axis``; repeated indices sum their gradients."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < -x.shape[axis] or idx.max() >= x.shape[axis]):
        raise DimensionError(f"take: index out of range for axis {axis} of shape {x.shape}")
    out = np.take(x.data, idx, axis=axis)
    shape = x.shape

    def vjp(g: np.ndarray) -> Tuple[np.ndarray]:
        grad = np.zeros(shape)
        np.add.at(np.moveaxis(grad, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (grad,)

    return x.tape.record(out, (x,), vjp, "take")


# ---------------------------------------------------------------------- #
# Reductions
# ---------------------------------------------------------------------- #


def _normalise_axes(axis: Union[int, Sequence[int], None], ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % ndim for a in axes)


def reduce_sum(x: Tensor, axis: Union[int, Sequence[int], None] = None, keepdims: bool = False) -> Tensor:
    axes = _normalise_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)
    shape = x.shape

    def vjp(g: np.ndarray) -> Tuple[np.ndarray]:
        expanded = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(expanded, shape).copy(),)

    return x.tape.record(out, (x,), vjp, "sum")


def mean(x: Tensor, axis: Union[int, Sequence[int], None] = None, keepdims: bool = False) -> Tensor:
    axes = _normalise_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if count == 0:
        raise DimensionError(f"mean over an empty axis of shape {x.shape}")
    return scale(reduce_sum(x, axes, keepdims), 1.0 / count)


def max_reduce(x: Tensor, axis: int) -> Tensor:
    """Max along one axis; the gradient goes to the first maximal entry."""
    if x.shape[axis] == 0:
        raise DimensionError(f"max over an empty axis of shape {x.shape}")
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)
    shape = x.shape

    def vjp(g: np.ndarray) -> Tuple[np.ndarray]:
        grad = np.zeros(shape)
        np.put_along_axis(grad, idx, np.expand_dims(g, axis), axis=axis)
        return (grad,)

    return x.tape.record(out, (x,), vjp, "max")


# ---------------------------------------------------------------------- #
# Normalisations and losses
# ---------------------------------------------------------------------- #


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """exp(x - max) / sum(exp(x - max)); the max shift is not optional."""
    if x.size == 0 or x.shape[axis] == 0:
        raise DimensionError(f"softmax of an empty tensor (shape {x.shape})")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    return x.tape.record(
        y,
        (x,),
        lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),),
        "softmax",
    )


def l2_normalize(x: Tensor, axis: int = -1, eps: float = NORM_EPS) -> Tensor:
    """x / ||x||_2 along ``axis``."""
    if x.size == 0:
        raise DimensionError(f"l2_normalize of an empty tensor (shape {x.shape})")
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    smallest = float(norm.min())
    if smallest < eps:
        raise DegenerateInputError(
            f"cannot L2-normalise a vector of norm {smallest:.3e} (< {eps:g})"
        )
    y = x.data / norm
    return x.tape.record(
        y,
        (x,),
        lambda g: ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,),
        "l2_normalize",
    )


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean over rows of -log softmax(logits)[label]."""
    if logits.ndim != 2:
        raise DimensionError(f"logits must be (N, G), got shape {logits.shape}")
    n, g_classes = logits.shape
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (n,):
        raise DimensionError(f"{labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    if n == 0:
        raise DimensionError("softmax_cross_entropy over an empty batch")
    if labels.min() < 0 or labels.max() >= g_classes:
        raise UsageError(f"labels must lie in [0, {g_classes}), got max {int(labels.max())}")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_norm
    rows = np.arange(n)
    loss = -log_p[rows, labels].sum() / n
    p = np.exp(log_p)

    def vjp(g: np.ndarray) -> Tuple[np.ndarray]:
        grad = p.copy()
        grad[rows, labels] -= 1.0
        return (grad * (g / n),)

    return logits.tape.record(np.asarray(loss), (logits,), vjp, "softmax_cross_entropy")


# ---------------------------------------------------------------------- #
# Gradient checking
# ---------------------------------------------------------------------- #


@dataclass
class GradientCheck:
    """Outcome of comparing autodiff with central finite differences."""

    max_relative_error: float
    nonfinite_count: int = 0
    coordinates: int = 0

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.nonfinite_count == 0 and self.max_relative_error < tolerance


def _scalar_value(f: Callable[[Tensor], Tensor], x: np.ndarray) -> float:
    tape = Tape(check_finite=False)
    out = f(tape.constant(x))
    if out.size != 1:
        raise UsageError(f"gradient check needs a scalar function, got shape {out.shape}")
    return float(out.data.reshape(-1)[0])


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: ArrayLike,
    step: float = 1e-5,
) -> GradientCheck:
    """
    Compare the autodiff gradient of scalar ``f`` at ``x`` with central
    differences, coordinate by coordinate.

    Relative error per coordinate is |ad - fd| / max(1e-8, |ad| + |fd|);
    coordinates where f is non-finite are counted, not scored.
    """
    if step <= 0:
        raise UsageError(f"step must be > 0, got {step}")
    x = np.array(x, dtype=np.float64)

    tape = Tape(check_finite=False)
    leaf = tape.variable(x.copy())
    out = f(leaf)
    if out.size != 1:
        raise UsageError(f"gradient check needs a scalar function, got shape {out.shape}")
    tape.backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x)

    worst = 0.0
    nonfinite = 0
    flat = x.reshape(-1)
    for i in range(flat.size):
        plus = flat.copy()
        minus = flat.copy()
        plus[i] += step
        minus[i] -= step
        fp = _scalar_value(f, plus.reshape(x.shape))
        fm = _scalar_value(f, minus.reshape(x.shape))
        ad = float(analytic.reshape(-1)[i])
        if not (np.isfinite(fp) and np.isfinite(fm) and np.isfinite(ad)):
            nonfinite += 1
            continue
        fd = (fp - fm) / (2.0 * step)
        err = abs(ad - fd) / max(1e-8, abs(ad) + abs(fd))
        worst = max(worst, err)

    return GradientCheck(max_relative_error=worst, nonfinite_count=nonfinite, coordinates=flat.size)
