"""Dense tensors with reverse-mode automatic differentiation.

A ``Node`` wraps an immutable NumPy array (the tensor storage) and, when it
participates in a differentiable computation, the ``Function`` that produced it.
Calling :func:`backward` on a scalar node walks the graph in reverse
topological order and accumulates gradients into ``Node.grad``.

Every operation checks its output for NaN/Inf and raises
:class:`~diffound_mad.errors.NumericalError` naming itself when one appears.
"""

import logging
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import NDArray

from diffound_mad.errors import (
    ConfigValidationError,
    ContractError,
    DomainError,
    NumericalError,
    ShapeError,
)

logger = logging.getLogger(__name__)

Tensor = NDArray[np.floating]
ArrayLike = Union[Tensor, float, int, Sequence[Any]]

_default_dtype: np.dtype = np.dtype(np.float64)


def set_default_dtype(dtype: Any) -> None:
    """Set the floating dtype new nodes are created with (float64 or float32)."""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ConfigValidationError(f"unsupported dtype {dtype}", field="dtype")
    _default_dtype = dtype


def get_default_dtype() -> np.dtype:
    return _default_dtype


def _frozen_array(value: ArrayLike, dtype: Optional[np.dtype] = None) -> Tensor:
    arr = np.array(value, dtype=dtype or _default_dtype, copy=True)
    arr.setflags(write=False)
    return arr


class Node:
    """A tensor value plus its place in the computation graph."""

    __slots__ = ("value", "parents", "fn", "grad", "requires_grad", "name")

    def __init__(
        self,
        value: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
        fn: Optional["Function"] = None,
        parents: Tuple["Node", ...] = (),
    ):
        if isinstance(value, np.ndarray) and not value.flags.writeable:
            self.value = value
        else:
            self.value = _frozen_array(value)
        self.parents = parents
        self.fn = fn
        self.grad: Optional[Tensor] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return int(self.value.size)

    @property
    def op(self) -> str:
        """Backward-rule tag of the producing operation (``leaf`` for inputs)."""
        return self.fn.op if self.fn is not None else "leaf"

    def assign(self, value: ArrayLike) -> None:
        """Replace the stored value of a leaf node (optimisers, gradient checks)."""
        if self.fn is not None:
            raise ContractError("only leaf nodes can be assigned")
        new = _frozen_array(value, self.value.dtype)
        if new.shape != self.value.shape:
            raise ShapeError(f"cannot assign shape {new.shape} to node of shape {self.shape}")
        self.value = new

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.value.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.value.reshape(()))

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Node(shape={self.shape}, op={self.op}{label}, requires_grad={self.requires_grad})"

    # Operator sugar
    def __add__(self, other: Any) -> "Node":
        return add(self, _as_node(other))

    def __radd__(self, other: Any) -> "Node":
        return add(_as_node(other), self)

    def __sub__(self, other: Any) -> "Node":
        return sub(self, _as_node(other))

    def __rsub__(self, other: Any) -> "Node":
        return sub(_as_node(other), self)

    def __mul__(self, other: Any) -> "Node":
        return mul(self, _as_node(other))

    def __rmul__(self, other: Any) -> "Node":
        return mul(_as_node(other), self)

    def __truediv__(self, other: Any) -> "Node":
        return div(self, _as_node(other))

    def __neg__(self) -> "Node":
        return neg(self)

    def __pow__(self, exponent: float) -> "Node":
        return power(self, exponent)

    def __matmul__(self, other: "Node") -> "Node":
        return matmul(self, other)

    def __getitem__(self, key: Any) -> "Node":
        return GetItem.apply(self, key=key)


def constant(value: ArrayLike, name: Optional[str] = None) -> Node:
    """A node that never receives gradient."""
    return Node(value, requires_grad=False, name=name)


def parameter(value: ArrayLike, name: Optional[str] = None, trainable: bool = True) -> Node:
    """A leaf node; ``trainable=False`` marks a frozen weight."""
    return Node(value, requires_grad=trainable, name=name)


def _as_node(value: Any) -> Node:
    return value if isinstance(value, Node) else constant(value)


def unbroadcast(grad: Tensor, shape: Tuple[int, ...]) -> Tensor:
    """Sum ``grad`` down to ``shape``, undoing NumPy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tuple[int, ...], b: Tuple[int, ...]) -> None:
    for x, y in zip(reversed(a), reversed(b)):
        if x != y and x != 1 and y != 1:
            raise ShapeError(f"{op}: shapes {a} and {b} are not broadcast-compatible")


class Function:
    """A differentiable operation.

    Subclasses implement ``forward`` on arrays and ``backward`` returning one
    gradient (or ``None``) per input.
    """

    op = "function"

    def __init__(self, *inputs: Node):
        self.inputs = inputs

    def forward(self, *arrays: Tensor, **kwargs: Any) -> Tensor:
        raise NotImplementedError

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Node, **kwargs: Any) -> Node:
        fn = cls(*inputs)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            out = fn.forward(*(node.value for node in inputs), **kwargs)
        if not np.all(np.isfinite(out)):
            raise NumericalError(cls.op)
        out = np.asarray(out)
        out.setflags(write=False)
        if any(node.requires_grad for node in inputs):
            return Node(out, requires_grad=True, fn=fn, parents=inputs)
        return Node(out)


# Elementwise arithmetic


class Add(Function):
    op = "add"

    def forward(self, a: Tensor, b: Tensor) -> Tensor:
        _check_broadcast(self.op, a.shape, b.shape)
        return a + b

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        a, b = self.inputs
        return unbroadcast(grad, a.shape), unbroadcast(grad, b.shape)


class Sub(Function):
    op = "subtract"

    def forward(self, a: Tensor, b: Tensor) -> Tensor:
        _check_broadcast(self.op, a.shape, b.shape)
        return a - b

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        a, b = self.inputs
        return unbroadcast(grad, a.shape), unbroadcast(-grad, b.shape)


class Mul(Function):
    op = "multiply"

    def forward(self, a: Tensor, b: Tensor) -> Tensor:
        _check_broadcast(self.op, a.shape, b.shape)
        return a * b

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        a, b = self.inputs
        return (
            unbroadcast(grad * b.value, a.shape),
            unbroadcast(grad * a.value, b.shape),
        )


class Div(Function):
    op = "divide"

    def forward(self, a: Tensor, b: Tensor) -> Tensor:
        _check_broadcast(self.op, a.shape, b.shape)
        if np.any(b == 0):
            raise DomainError("divide: division by zero")
        return a / b

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        a, b = self.inputs
        return (
            unbroadcast(grad / b.value, a.shape),
            unbroadcast(-grad * a.value / (b.value**2), b.shape),
        )


class Neg(Function):
    op = "negate"

    def forward(self, a: Tensor) -> Tensor:
        return -a

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        return (-grad,)


class Power(Function):
    op = "power"

    def forward(self, a: Tensor, exponent: float) -> Tensor:
        self.exponent = float(exponent)
        if not self.exponent.is_integer() and np.any(a < 0):
            raise DomainError(f"power: negative base with exponent {exponent}")
        return a**self.exponent

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        (a,) = self.inputs
        if self.exponent == 0.0:
            return (np.zeros_like(grad),)
        return (grad * self.exponent * a.value ** (self.exponent - 1.0),)


class Log(Function):
    op = "log"

    def forward(self, a: Tensor) -> Tensor:
        if np.any(a <= 0):
            raise DomainError("log: argument must be strictly positive")
        return np.log(a)

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        (a,) = self.inputs
        return (grad / a.value,)


def _sigmoid(x: Tensor) -> Tensor:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


class Sigmoid(Function):
    op = "sigmoid"

    def forward(self, a: Tensor) -> Tensor:
        self.out = _sigmoid(a)
        return self.out

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        return (grad * self.out * (1.0 - self.out),)


_GELU_C = np.sqrt(2.0 / np.pi)


class GELU(Function):
    """Tanh approximation of the Gaussian error linear unit."""

    op = "gelu"

    def forward(self, a: Tensor) -> Tensor:
        self.t = np.tanh(_GELU_C * (a + 0.044715 * a**3))
        return 0.5 * a * (1.0 + self.t)

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        (a,) = self.inputs
        x = a.value
        dt = (1.0 - self.t**2) * _GELU_C * (1.0 + 3.0 * 0.044715 * x**2)
        return (grad * (0.5 * (1.0 + self.t) + 0.5 * x * dt),)


class Clip(Function):
    op = "clip"

    def forward(self, a: Tensor, low: float, high: float) -> Tensor:
        self.mask = (a >= low) & (a <= high)
        return np.clip(a, low, high)

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        return (grad * self.mask,)


# Linear algebra


class MatMul(Function):
    op = "matmul"

    def forward(self, a: Tensor, b: Tensor) -> Tensor:
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
        return a @ b

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        a, b = self.inputs
        ga = grad @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ grad
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)


class Linear(Function):
    """``x @ W.T (+ b)`` with ``W`` stored as ``[d_out, d_in]``."""

    op = "linear"

    def forward(self, x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
        if w.ndim != 2 or x.shape[-1] != w.shape[1]:
            raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
        out = x @ w.T
        if b is not None:
            out = out + b
        return out

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        x, w = self.inputs[0], self.inputs[1]
        g2 = grad.reshape(-1, grad.shape[-1])
        x2 = x.value.reshape(-1, x.shape[-1])
        grads: List[Optional[Tensor]] = [grad @ w.value, g2.T @ x2]
        if len(self.inputs) == 3:
            grads.append(g2.sum(axis=0))
        return tuple(grads)


# Shape manipulation


class Reshape(Function):
    op = "reshape"

    def forward(self, a: Tensor, shape: Tuple[int, ...]) -> Tensor:
        return a.reshape(shape)

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        return (grad.reshape(self.inputs[0].shape),)


class Transpose(Function):
    op = "transpose"

    def forward(self, a: Tensor, axes: Tuple[int, ...]) -> Tensor:
        self.axes = axes
        return np.transpose(a, axes)

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        return (np.transpose(grad, np.argsort(self.axes)),)


class Concat(Function):
    op = "concat"

    def forward(self, *arrays: Tensor, axis: int = 0) -> Tensor:
        self.axis = axis
        self.sizes = [arr.shape[axis] for arr in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        splits = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, splits, axis=self.axis))


class GetItem(Function):
    op = "getitem"

    def forward(self, a: Tensor, key: Any) -> Tensor:
        self.key = key
        return np.array(a[key])

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        (a,) = self.inputs
        out = np.zeros(a.shape, dtype=grad.dtype)
        np.add.at(out, self.key, grad)
        return (out,)


# Reductions and normalisation


class Sum(Function):
    op = "sum"

    def forward(self, a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
        self.axis, self.keepdims = axis, keepdims
        return np.sum(a, axis=axis, keepdims=keepdims)

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        (a,) = self.inputs
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, a.shape).copy(),)


class Mean(Function):
    op = "mean"

    def forward(self, a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
        self.axis, self.keepdims = axis, keepdims
        self.count = a.size if axis is None else a.shape[axis]
        return np.mean(a, axis=axis, keepdims=keepdims)

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        (a,) = self.inputs
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad / self.count, a.shape).copy(),)


class LayerNorm(Function):
    op = "layer_norm"

    def forward(self, x: Tensor, gain: Tensor, bias: Tensor, eps: float) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mu) * self.inv_std
        return self.xhat * gain + bias

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        _, gain, _ = self.inputs
        gxhat = grad * gain.value
        gx = self.inv_std * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - self.xhat * (gxhat * self.xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(grad.ndim - 1))
        return gx, (grad * self.xhat).sum(axis=lead), grad.sum(axis=lead)


class Softmax(Function):
    op = "softmax"

    def forward(self, x: Tensor, axis: int = -1) -> Tensor:
        self.axis = axis
        e = np.exp(x - x.max(axis=axis, keepdims=True))
        self.out = e / e.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        y = self.out
        return (y * (grad - (grad * y).sum(axis=self.axis, keepdims=True)),)


# Public operation API


def add(a: Node, b: Node) -> Node:
    return Add.apply(a, b)


def sub(a: Node, b: Node) -> Node:
    return Sub.apply(a, b)


def mul(a: Node, b: Node) -> Node:
    return Mul.apply(a, b)


def div(a: Node, b: Node) -> Node:
    return Div.apply(a, b)


def neg(a: Node) -> Node:
    return Neg.apply(a)


def power(a: Node, exponent: float) -> Node:
    return Power.apply(a, exponent=exponent)


def log(a: Node) -> Node:
    return Log.apply(a)


def sigmoid(a: Node) -> Node:
    return Sigmoid.apply(a)


def gelu(a: Node) -> Node:
    return GELU.apply(a)


def clip(a: Node, low: float, high: float) -> Node:
    return Clip.apply(a, low=low, high=high)


_BINARY: Dict[str, Callable[[Node, Node], Node]] = {
    "add": add,
    "subtract": sub,
    "multiply": mul,
    "divide": div,
}
_UNARY: Dict[str, Callable[[Node], Node]] = {
    "negate": neg,
    "log": log,
    "sigmoid": sigmoid,
    "gelu": gelu,
}


def elementwise(op: str, a: Node, b: Optional[Any] = None) -> Node:
    """Dispatch a pointwise operation by tag.

    Binary tags: ``add``, ``subtract``, ``multiply``, ``divide``.
    Unary tags: ``negate``, ``log``, ``sigmoid``, ``gelu``.
    ``power`` takes a scalar exponent as ``b``.
    """
    if op in _BINARY:
        if b is None:
            raise ContractError(f"elementwise '{op}' needs two operands")
        return _BINARY[op](a, _as_node(b))
    if op in _UNARY:
        return _UNARY[op](a)
    if op == "power":
        if b is None:
            raise ContractError("elementwise 'power' needs an exponent")
        return power(a, float(b))
    raise ContractError(f"unknown elementwise op '{op}'")


def matmul(a: Node, b: Node) -> Node:
    """Matrix product over the last two axes (leading axes broadcast)."""
    return MatMul.apply(a, b)


def linear(x: Node, weight: Node, bias: Optional[Node] = None) -> Node:
    if bias is None:
        return Linear.apply(x, weight)
    return Linear.apply(x, weight, bias)


def reshape(a: Node, shape: Tuple[int, ...]) -> Node:
    return Reshape.apply(a, shape=tuple(shape))


def transpose(a: Node, axes: Tuple[int, ...]) -> Node:
    return Transpose.apply(a, axes=tuple(axes))


def concat(nodes: Sequence[Node], axis: int = 0) -> Node:
    return Concat.apply(*nodes, axis=axis)


def reduce_sum(a: Node, axis: Optional[int] = None, keepdims: bool = False) -> Node:
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def reduce_mean(a: Node, axis: Optional[int] = None, keepdims: bool = False) -> Node:
    return Mean.apply(a, axis=axis, keepdims=keepdims)


def layer_norm(x: Node, gain: Node, bias: Node, eps: float = 1e-6) -> Node:
    """Normalise over the last axis, then apply ``gain`` and ``bias``."""
    if eps <= 0:
        raise ConfigValidationError(f"layer_norm eps must be > 0, got {eps}", field="eps")
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} must match last axis {x.shape[-1]}"
        )
    return LayerNorm.apply(x, gain, bias, eps=eps)


def softmax(x: Node, axis: int = -1) -> Node:
    return Softmax.apply(x, axis=axis)


# Reverse pass


def _topological_order(root: Node) -> List[Node]:
    order: List[Node] = []
    seen = set()
    stack: List[Tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Node) -> Dict[int, Tensor]:
    """Accumulate d(loss)/d(node) into ``grad`` of every reachable node.

    Gradients are propagated from fresh per-call buffers and then added into
    ``Node.grad``, so calling this twice on the same graph doubles every
    gradient. Returns a map from ``id(node)`` to this call's gradient.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads: Dict[int, Tensor] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(_topological_order(loss)):
        grad = grads.get(id(node))
        if grad is None:
            continue
        node.grad = grad.copy() if node.grad is None else node.grad + grad
        if node.fn is None:
            continue
        for parent, pgrad in zip(node.parents, node.fn.backward(grad)):
            if pgrad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pgrad if key not in grads else grads[key] + pgrad
    return grads


def zero_grad(nodes: Iterable[Node]) -> None:
    for node in nodes:
        node.grad = None
