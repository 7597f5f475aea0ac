"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Every differentiable operation produces a :class:`Tensor` whose ``node``
records the inputs and a closure computing input gradients from the output
gradient. Node ids come from a global counter, so sorting the nodes reachable
from a loss by id yields the insertion (topological) order of the tape.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "Node",
    "Graph",
    "ShapeError",
    "backward",
    "no_grad",
    "is_grad_enabled",
    "as_tensor",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


_ids = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block (inference, FD probes)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Node:
    """One operation record on the tape."""

    __slots__ = ("id", "op", "inputs", "backward_fn", "ctx", "out")

    def __init__(self, op: str, inputs: Sequence["Tensor"], backward_fn: Callable, ctx=None):
        self.id = next(_ids)
        self.out = 0
        self.op = op
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn
        self.ctx = ctx

    def __repr__(self) -> str:
        return f"Node({self.id}, {self.op!r})"


class Tensor:
    """Dense real array with an optional gradient and tape link."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; the real work lives in morphopc.ops
    def __add__(self, other):
        from . import ops

        return ops.add(self, other) if isinstance(other, Tensor) else ops.add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other) if isinstance(other, Tensor) else ops.add_scalar(self, -other)

    def __rsub__(self, other):
        from . import ops

        return ops.add_scalar(ops.scale(self, -1.0), other)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other) if isinstance(other, Tensor) else ops.scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)


class Parameter(Tensor):
    """A named trainable tensor carrying its own Adam moments."""

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0

    def reset_state(self) -> None:
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def make_result(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward_fn: Callable, ctx=None) -> Tensor:
    """Wrap an op output, recording a tape node when any input needs grad."""
    out = Tensor(data)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, backward_fn, ctx)
        out.node.out = id(out)
    return out


class Graph:
    """Nodes reachable from an output, in insertion order."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        seen: dict[int, Node] = {}
        stack = [output]
        while stack:
            t = stack.pop()
            n = t.node
            if n is None or n.id in seen:
                continue
            seen[n.id] = n
            stack.extend(n.inputs)
        return cls(sorted(seen.values(), key=lambda n: n.id))

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def is_topological(self) -> bool:
        pos = {n.id: i for i, n in enumerate(self.nodes)}
        for i, n in enumerate(self.nodes):
            for t in n.inputs:
                if t.node is not None and pos[t.node.id] >= i:
                    return False
        return True


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf needing grad.

    Leaves are tensors with ``requires_grad`` and no producing node. Calling
    twice with ``retain_graph=True`` accumulates additively. Without it, the
    tape links are dropped afterwards.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = Graph.trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss.node is None:
        _accumulate_leaf(loss, grads.pop(id(loss)))
        return
    for node in reversed(graph.nodes):
        g = grads.pop(node.out, None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.node is None:
                _accumulate_leaf(t, gi)
            else:
                k = id(t)
                if k in grads:
                    grads[k] = grads[k] + gi
                else:
                    grads[k] = gi
    if not retain_graph:
        for node in graph.nodes:
            node.inputs = ()
            node.backward_fn = None
            node.ctx = None


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g
