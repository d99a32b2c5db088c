"""
Tensors with a recorded reverse-mode graph and the elementwise op set.

Every op builds a new Tensor and, while gradients are enabled, records its
parents plus a closure mapping the output gradient to one gradient per parent.
Backward rules are module-level functions looked up at call time.
"""

import threading
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from typing import Any

import numpy as np
from numpy.typing import ArrayLike, NDArray

from vpnlab.config import get_vpnlab_dtype, is_vpnlab_debug_mode
from vpnlab.errors import ConfigurationError, NumericHealthError, UsageError

Array = NDArray[Any]
BackwardFn = Callable[[Array], Sequence[Array | None]]

g_GRAD_STATE = threading.local()


@contextmanager
def no_grad() -> Iterator[None]:
    """Stop recording graphs in the calling thread; other threads keep recording."""
    previous = is_grad_enabled()
    g_GRAD_STATE.enabled = False
    try:
        yield
    finally:
        g_GRAD_STATE.enabled = previous


def is_grad_enabled() -> bool:
    return bool(getattr(g_GRAD_STATE, "enabled", True))


class Tensor:
    __slots__ = ("backward_fn", "data", "grad", "name", "parents")

    def __init__(
        self,
        data: ArrayLike,
        *,
        name: str | None = None,
        dtype: np.dtype[Any] | None = None,
    ) -> None:
        self.data: Array = np.array(data, dtype=dtype or get_vpnlab_dtype())
        self.grad: Array | None = None
        self.name = name
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: BackwardFn | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype[Any]:
        return self.data.dtype

    @property
    def requires_graph(self) -> bool:
        return self.grad is not None or self.backward_fn is not None

    def requires_grad_(self) -> "Tensor":
        """Give a leaf its own gradient accumulator."""
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self

    def item(self) -> float:
        if self.size != 1:
            raise UsageError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> Array:
        return self.data.copy()

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other: "Tensor | float") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor | float") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor | float") -> "Tensor":
        return mul(self, other)


def constant(data: ArrayLike) -> Tensor:
    return Tensor(data)


def check_finite(values: Array, where: str) -> None:
    if not is_vpnlab_debug_mode():
        return
    if not np.all(np.isfinite(values)):
        diagnostic = {
            "nan": float(np.isnan(values).sum()),
            "inf": float(np.isinf(values).sum()),
            "size": float(values.size),
        }
        raise NumericHealthError(f"non-finite values after {where}", diagnostic)


def _wrap(values: Array) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = values
    out.grad = None
    out.name = None
    out.parents = ()
    out.backward_fn = None
    return out


def record(
    values: Array, parents: tuple[Tensor, ...], backward_fn: BackwardFn, op: str
) -> Tensor:
    check_finite(values, op)
    out = _wrap(values)
    if is_grad_enabled() and any(parent.requires_graph for parent in parents):
        out.parents = parents
        out.backward_fn = backward_fn
    return out


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    order.reverse()
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every leaf gradient buffer reachable from loss."""
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.backward_fn is None:
        raise UsageError("backward called on a tensor with no recorded forward pass")

    pending: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for node in _topological_order(loss):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        if node.backward_fn is None:
            if node.grad is not None:
                node.grad += grad
            continue
        parent_grads = node.backward_fn(grad)
        for parent, parent_grad in zip(node.parents, parent_grads, strict=True):
            if parent_grad is None or not parent.requires_graph:
                continue
            check_finite(parent_grad, "backward")
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + parent_grad
            else:
                pending[key] = parent_grad


def _as_tensor(value: "Tensor | float") -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ConfigurationError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


def add_backward(grad: Array, a_shape: tuple[int, ...], b_shape: tuple[int, ...]) -> tuple[Array, Array]:
    return _unbroadcast(grad, a_shape), _unbroadcast(grad, b_shape)


def mul_backward(grad: Array, a: Array, b: Array) -> tuple[Array, Array]:
    return _unbroadcast(grad * b, a.shape), _unbroadcast(grad * a, b.shape)


def elu_backward(grad: Array, x: Array, y: Array) -> Array:
    return grad * np.where(x > 0, 1.0, y + 1.0)


def sigmoid_backward(grad: Array, y: Array) -> Array:
    return grad * y * (1.0 - y)


def square_backward(grad: Array, x: Array) -> Array:
    return grad * 2.0 * x


def add(a: "Tensor | float", b: "Tensor | float") -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "add")
    return record(
        a.data + b.data,
        (a, b),
        lambda g: add_backward(g, a.shape, b.shape),
        "add",
    )


def sub(a: "Tensor | float", b: "Tensor | float") -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "sub")

    def _backward(g: Array) -> tuple[Array, Array]:
        ga, gb = add_backward(g, a.shape, b.shape)
        return ga, -gb

    return record(a.data - b.data, (a, b), _backward, "sub")


def mul(a: "Tensor | float", b: "Tensor | float") -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "mul")
    return record(
        a.data * b.data,
        (a, b),
        lambda g: mul_backward(g, a.data, b.data),
        "mul",
    )


def elu(x: Tensor) -> Tensor:
    """x for x > 0, e^x - 1 otherwise (alpha = 1)."""
    y = np.where(x.data > 0, x.data, np.expm1(np.minimum(x.data, 0.0)))
    return record(y, (x,), lambda g: (elu_backward(g, x.data, y),), "elu")


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return record(y, (x,), lambda g: (sigmoid_backward(g, y),), "sigmoid")


def square(x: Tensor) -> Tensor:
    return record(x.data * x.data, (x,), lambda g: (square_backward(g, x.data),), "square")


def sum_all(x: Tensor) -> Tensor:
    return record(
        np.asarray(x.data.sum(), dtype=x.dtype),
        (x,),
        lambda g: (np.full(x.shape, g, dtype=x.dtype),),
        "sum",
    )


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        y = x.data.reshape(shape)
    except ValueError as ex:
        raise ConfigurationError(f"cannot reshape {x.shape} to {shape}") from ex
    return record(y, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def flatten(x: Tensor) -> Tensor:
    """Keep the leading (batch) axis, flatten the rest."""
    return reshape(x, (x.shape[0], -1))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(tensors)
    try:
        y = np.concatenate([t.data for t in parts], axis=axis)
    except ValueError as ex:
        raise ConfigurationError(
            f"concat: incompatible shapes {[t.shape for t in parts]}"
        ) from ex
    bounds = np.cumsum([t.shape[axis] for t in parts])[:-1]

    def _backward(g: Array) -> list[Array]:
        return list(np.split(g, bounds, axis=axis))

    return record(y, parts, _backward, "concat")


def take(x: Tensor, indices: ArrayLike, axis: int = 0) -> Tensor:
    """Select entries along one axis; repeated indices get their gradients summed."""
    index = np.atleast_1d(np.asarray(indices, dtype=np.intp))
    y = np.take(x.data, index, axis=axis)

    def _backward(g: Array) -> tuple[Array]:
        gx = np.zeros_like(x.data)
        np.add.at(np.moveaxis(gx, axis, 0), index, np.moveaxis(g, axis, 0))
        return (gx,)

    return record(y, (x,), _backward, "take")
