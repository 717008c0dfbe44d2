"""Dense tensors with a reverse-mode gradient tape.

A Tensor wraps a numpy array. Operations on tensors that require gradients
record their parents and a backward rule; ``Tensor.backward`` replays those
rules in reverse topological order through a :class:`GradientTape`.
"""
import logging
import threading
from contextlib import contextmanager
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ShapeMismatch

logger = logging.getLogger(__name__)

Scalar = Union[int, float]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

# Recording is switched per thread so grid cells can evaluate while others train.
_recording = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_recording, "enabled", True)


@contextmanager
def no_grad():
    previous = is_grad_enabled()
    _recording.enabled = False
    try:
        yield
    finally:
        _recording.enabled = previous


def _as_float_array(data, dtype=None) -> np.ndarray:
    array = np.asarray(data, dtype=dtype)
    if array.dtype.kind != "f":
        array = array.astype(np.float64)
    return array


class Tensor:
    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        self.data = _as_float_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.op = "leaf"
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn, op: str) -> "Tensor":
        out = cls(data)
        out.op = op
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # ------------------ Introspection ------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"

    # ------------------ Backward ------------------
    def backward(self, gradient: Optional[np.ndarray] = None) -> None:
        if not self.requires_grad:
            raise ShapeMismatch("backward() called on a tensor that does not require gradients")
        if gradient is None:
            if self.size != 1:
                raise ShapeMismatch(f"backward() needs an explicit gradient for shape {self.shape}")
            gradient = np.ones_like(self.data)
        gradient = np.asarray(gradient, dtype=self.dtype)
        if gradient.shape != self.shape:
            raise ShapeMismatch(f"gradient shape {gradient.shape} does not match {self.shape}")
        GradientTape.record(self).run(gradient)

    # ------------------ Elementwise arithmetic ------------------
    def _check_same_shape(self, other: "Tensor", op: str) -> None:
        if other.shape != self.shape:
            raise ShapeMismatch(f"{op}: shapes {self.shape} and {other.shape} differ")

    def __add__(self, other: Union["Tensor", Scalar]) -> "Tensor":
        if not isinstance(other, Tensor):
            return Tensor.from_op(self.data + float(other), (self,), lambda g: (g,), "add_scalar")
        self._check_same_shape(other, "add")
        return Tensor.from_op(self.data + other.data, (self, other), lambda g: (g, g), "add")

    def __radd__(self, other: Scalar) -> "Tensor":
        return self + other

    def __neg__(self) -> "Tensor":
        return Tensor.from_op(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other: Union["Tensor", Scalar]) -> "Tensor":
        if not isinstance(other, Tensor):
            return self + (-other)
        self._check_same_shape(other, "sub")
        return Tensor.from_op(self.data - other.data, (self, other), lambda g: (g, -g), "sub")

    def __rsub__(self, other: Scalar) -> "Tensor":
        return (-self) + other

    def __mul__(self, other: Union["Tensor", Scalar]) -> "Tensor":
        if not isinstance(other, Tensor):
            factor = float(other)
            return Tensor.from_op(self.data * factor, (self,), lambda g: (g * factor,), "scale")
        self._check_same_shape(other, "mul")
        a, b = self.data, other.data
        return Tensor.from_op(a * b, (self, other), lambda g: (g * b, g * a), "mul")

    def __rmul__(self, other: Scalar) -> "Tensor":
        return self * other

    def __truediv__(self, other: Scalar) -> "Tensor":
        if isinstance(other, Tensor):
            raise ShapeMismatch("division is only defined by a scalar constant")
        return self * (1.0 / other)

    # ------------------ Nonlinearities ------------------
    def relu(self) -> "Tensor":
        mask = self.data > 0
        return Tensor.from_op(np.where(mask, self.data, 0).astype(self.dtype), (self,), lambda g: (g * mask,), "relu")

    def sigmoid(self) -> "Tensor":
        out = 1.0 / (1.0 + np.exp(-self.data))
        return Tensor.from_op(out, (self,), lambda g: (g * out * (1.0 - out),), "sigmoid")

    def square(self) -> "Tensor":
        x = self.data
        return Tensor.from_op(x * x, (self,), lambda g: (2.0 * x * g,), "square")

    # ------------------ Reductions ------------------
    def sum(self) -> "Tensor":
        shape = self.shape
        return Tensor.from_op(np.sum(self.data), (self,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")

    def mean(self) -> "Tensor":
        return self.sum() * (1.0 / self.size)

    # ------------------ Layout ------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError as e:
            raise ShapeMismatch(f"cannot reshape {original} into {shape}") from e
        return Tensor.from_op(out, (self,), lambda g: (g.reshape(original),), "reshape")

    def permute(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if sorted(axes) != list(range(self.ndim)):
            raise ShapeMismatch(f"permute axes {axes} invalid for {self.ndim}-d tensor")
        inverse = tuple(np.argsort(axes))
        return Tensor.from_op(np.transpose(self.data, axes), (self,), lambda g: (np.transpose(g, inverse),), "permute")

    def __getitem__(self, index) -> "Tensor":
        shape, dtype = self.shape, self.dtype

        def backward(g):
            full = np.zeros(shape, dtype=dtype)
            full[index] += g
            return (full,)

        return Tensor.from_op(np.array(self.data[index]), (self,), backward, "getitem")


class GradientTape:
    """Ordered record of the operations reachable from one output."""

    def __init__(self, nodes: List[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, output: Tensor) -> "GradientTape":
        order: List[Tensor] = []
        visited = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def run(self, gradient: np.ndarray) -> None:
        pending = {id(self.nodes[-1]): gradient}
        for node in reversed(self.nodes):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.astype(node.dtype, copy=True) if node.grad is None else node.grad + g
                continue
            for parent, parent_grad in zip(node._parents, node._backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = parent_grad if key not in pending else pending[key] + parent_grad
