"""Dense tensor with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers its
parents and a closure computing the parents' gradient contributions. Calling
:meth:`Tensor.backward` on a scalar walks the recorded graph in reverse
topological order and accumulates gradients additively into ``.grad``.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_DTYPES = {"single": np.float32, "double": np.float64}


class _State(threading.local):
    def __init__(self):
        self.dtype = np.float32
        self.grad_enabled = True


_state = _State()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def get_default_dtype() -> type:
    return _state.dtype


def set_default_dtype(dtype) -> None:
    if isinstance(dtype, str):
        dtype = _DTYPES[dtype]
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _state.dtype = dtype


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch the default floating-point precision ('single' or 'double')."""
    prev = _state.dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        _state.dtype = prev


def is_grad_enabled() -> bool:
    return _state.grad_enabled


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = get_default_dtype()
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.op = ""
        self.name = name

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], op: str,
              backward: Callable[[np.ndarray], None]) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = ""
        out.op = op
        needs = _state.grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # ------------------------------------------------------------------ info
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # --------------------------------------------------------------- autograd
    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Populate ``.grad`` on every ``requires_grad`` tensor reachable from ``self``."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        graph = Graph.from_output(self)
        self._accumulate(grad)
        for node in reversed(graph.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # ------------------------------------------------------------- operators
    def __add__(self, other):
        from . import ops
        return ops.add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, _lift(other, self))

    def __rsub__(self, other):
        from . import ops
        return ops.sub(_lift(other, self), self)

    def __mul__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            return ops.hadamard(self, other)
        return ops.mul_const(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul_const(self, -1.0)

    def __getitem__(self, idx):
        from . import ops
        return ops.getitem(self, idx)

    def sum(self):
        from . import ops
        return ops.sum_all(self)

    def mean(self, axis=None):
        from . import ops
        return ops.mean(self, axis)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, x, dtype=like.dtype))


class Graph:
    """Operation nodes reachable from an output, in execution (topological) order."""

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        order: list = []
        seen: set = set()
        stack = [(out, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)
