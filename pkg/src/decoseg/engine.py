"""Tape-based reverse-mode differentiation.

A :class:`Graph` is an append-only record of executed ops. Ops (see
:mod:`decoseg.ops`) record themselves on the graph that is active in the
current context whenever at least one input requires a gradient. Calling
:meth:`Graph.backward` walks the tape in strict reverse append order and
leaves a ``.grad`` array on every tensor that took part, interior
activations included.

    >>> from decoseg import ops
    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Graph() as g:
    ...     y = ops.sum_all(ops.scale(x, 2.0))
    ...     g.backward(y)
    >>> x.grad
    array([2., 2.])
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

_ACTIVE: contextvars.ContextVar[Optional["Graph"]] = contextvars.ContextVar(
    "decoseg_active_graph", default=None
)

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class NumericError(FloatingPointError):
    """An op produced NaN or Inf."""


class GraphConsumedError(RuntimeError):
    """Raised when a graph is used after its backward pass."""


class Tensor:
    """Dense float64 array, optionally tracked by the active graph."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_graph", "_node")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._graph: Optional[Graph] = None
        self._node: Optional[int] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def node_id(self) -> Optional[int]:
        return self._node

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """New untracked tensor sharing the same buffer."""
        return Tensor(self.data, name=self.name)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Optional[BackwardFn]


class Graph:
    """Append-only tape of executed ops.

    Use as a context manager so that ops executed inside the ``with`` block
    are recorded. A graph supports exactly one backward pass.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.gradients: dict[int, np.ndarray] = {}
        self.consumed = False
        self._tokens: list = []

    def __enter__(self) -> "Graph":
        self._tokens.append(_ACTIVE.set(self))
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor,
               backward: BackwardFn) -> int:
        if self.consumed:
            raise GraphConsumedError("cannot record on a graph whose backward pass already ran")
        node_id = len(self.nodes)
        self.nodes.append(Node(op, tuple(inputs), output, backward))
        output._graph = self
        output._node = node_id
        return node_id

    def backward(self, output: Tensor, seed=None) -> dict[int, np.ndarray]:
        """Propagate ``seed`` (default 1 for scalar outputs) back to every input.

        Returns the node-id -> gradient map. Leaf tensors with
        ``requires_grad`` get their ``.grad`` overwritten.
        """
        if self.consumed:
            raise GraphConsumedError("backward already ran on this graph")
        if output._graph is not self or output._node is None:
            raise ValueError("output tensor was not produced on this graph")
        if seed is None:
            if output.size != 1:
                raise ValueError(
                    f"non-scalar output of shape {output.shape} needs an explicit seed")
            seed = np.ones(output.shape)
        seed = np.asarray(seed.data if isinstance(seed, Tensor) else seed, dtype=np.float64)
        if seed.shape != output.shape:
            raise ValueError(f"seed shape {seed.shape} does not match output shape {output.shape}")

        self.consumed = True
        grads = self.gradients
        grads[output._node] = seed
        leaves: dict[int, tuple[Tensor, np.ndarray]] = {}

        for node_id in range(output._node, -1, -1):
            node = self.nodes[node_id]
            g = grads.get(node_id)
            if g is None:
                continue
            node.output.grad = g
            in_grads = node.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                if not np.all(np.isfinite(ig)):
                    raise NumericError(f"non-finite gradient flowing out of {node.op!r}")
                if inp._graph is self and inp._node is not None:
                    prev = grads.get(inp._node)
                    grads[inp._node] = ig if prev is None else prev + ig
                else:
                    key = id(inp)
                    prev = leaves.get(key)
                    leaves[key] = (inp, ig if prev is None else prev[1] + ig)

        for tensor, g in leaves.values():
            tensor.grad = g
        for node in self.nodes:
            node.backward = None
        return grads


def active_graph() -> Optional[Graph]:
    return _ACTIVE.get()


def emit(op: str, inputs: Sequence, out: np.ndarray, backward: BackwardFn) -> Tensor:
    """Wrap an op result, check it is finite and record it if needed."""
    if not np.all(np.isfinite(out)):
        raise NumericError(f"op {op!r} produced a non-finite value")
    result = Tensor(out)
    graph = _ACTIVE.get()
    if graph is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        result.requires_grad = True
        graph.record(op, inputs, result, backward)
    return result


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
