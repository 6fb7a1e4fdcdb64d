"""Tensor type and the reverse-mode backward pass."""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate operations without recording a backward graph."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Float64 n-d array with an optional gradient and a backward-graph node.

    A tensor built by an operation keeps its parents and a closure mapping the
    upstream gradient to one gradient per parent. Leaves that require grad
    accumulate into ``.grad`` when ``backward`` runs.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple = (),
        _backward: Optional[BackwardFn] = None,
        name: str = "",
    ):
        arr = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Propagate ``grad`` (default: ones, for scalars) to every leaf upstream."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a gradient needs a scalar, got {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise ShapeError(f"upstream gradient {grad.shape} does not match tensor {self.shape}")
        if not self.requires_grad:
            return

        order = _topological_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from mitml.autodiff import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from mitml.autodiff import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from mitml.autodiff import ops

        return ops.add(ops.neg(self), other)

    def __mul__(self, other):
        from mitml.autodiff import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from mitml.autodiff import ops

        if isinstance(other, Tensor):
            raise TypeError("tensor division is only defined by a constant")
        return ops.scale(self, 1.0 / float(other))

    def __neg__(self):
        from mitml.autodiff import ops

        return ops.neg(self)

    def __matmul__(self, other):
        from mitml.autodiff import ops

        return ops.matmul(self, other)

    def __getitem__(self, key):
        from mitml.autodiff import ops

        return ops.index(self, key)


def _topological_order(root: Tensor) -> list:
    order: list = []
    seen: set = set()
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def make_result(data: np.ndarray, parents: tuple, backward: BackwardFn) -> Tensor:
    """Wrap an op output, recording the graph edge only when a parent needs it."""
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward)
    return Tensor(data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
