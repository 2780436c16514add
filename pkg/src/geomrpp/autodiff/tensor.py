"""Dense float64 tensors with reverse-mode gradients."""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence, Tuple

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Tensor:
    """A node in the computation graph.

    ``backward`` visits every node reachable from the root exactly once, in
    reverse topological order, and sums gradient contributions from every
    consumer into ``grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data)
        # float64 throughout; extended precision is kept for gradient checks
        self.data = arr if arr.dtype == np.longdouble else arr.astype(np.float64, copy=False)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.name = name

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"],
                backward: Callable[[np.ndarray], None]) -> "Tensor":
        out = cls(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if g.shape != self.data.shape:
            g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward without an explicit gradient needs a scalar")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
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
        for node in order:
            if node._backward is not None:
                node.grad = None
        self.accumulate(np.asarray(grad, dtype=np.float64))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                node.grad = None

    # elementwise arithmetic with numpy broadcasting

    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other
        return Tensor.from_op(a.data + b.data, (a, b),
                              lambda g: (a.accumulate(g), b.accumulate(g)))

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        a = self
        return Tensor.from_op(-a.data, (a,), lambda g: a.accumulate(-g))

    def __sub__(self, other) -> "Tensor":
        return self + (-as_tensor(other))

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other
        return Tensor.from_op(a.data * b.data, (a, b),
                              lambda g: (a.accumulate(g * b.data), b.accumulate(g * a.data)))

    __rmul__ = __mul__

    def __matmul__(self, other) -> "Tensor":
        a, b = self, as_tensor(other)
        if a.ndim != 2 or b.ndim != 2:
            raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")

        def back(g: np.ndarray) -> None:
            a.accumulate(g @ b.data.T)
            b.accumulate(a.data.T @ g)
        return Tensor.from_op(a.data @ b.data, (a, b), back)

    def sum(self) -> "Tensor":
        a = self
        return Tensor.from_op(np.asarray(a.data.sum()), (a,),
                              lambda g: a.accumulate(np.broadcast_to(g, a.shape)))

    def mean(self) -> "Tensor":
        a = self
        n = a.data.size
        return Tensor.from_op(np.asarray(a.data.mean()), (a,),
                              lambda g: a.accumulate(np.broadcast_to(g / n, a.shape)))

    def reshape(self, *shape) -> "Tensor":
        a = self
        return Tensor.from_op(a.data.reshape(*shape), (a,),
                              lambda g: a.accumulate(g.reshape(a.shape)))

    def flatten(self) -> "Tensor":
        return self.reshape(self.shape[0], -1)


class Parameter(Tensor):
    """Trainable tensor carrying its Adam moment buffers and step count."""

    __slots__ = ("m", "v", "step")

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True, name=name)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
