"""Tensor values and the recording graph used for reverse-mode differentiation.

A ``Graph`` is a tape: while it is active (``with Graph(...)``) every op whose
inputs require a gradient appends a ``Node``. Appending happens in execution
order, so the tape is already topologically sorted and ``backward`` walks it
once in reverse.
"""

from __future__ import annotations

import logging
from contextvars import ContextVar
from typing import Any, Callable, Iterable, NamedTuple, Optional, Union

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32

ArrayLike = Union["Tensor", np.ndarray, float, int, list]

_ACTIVE_GRAPH: ContextVar[Optional["Graph"]] = ContextVar("_ACTIVE_GRAPH", default=None)


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an op's rule."""

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        shape_text = " vs ".join(str(tuple(s)) for s in shapes)
        message = f"{op}: incompatible shapes {shape_text}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)
        self.op = op
        self.shapes = shapes


class Tensor:
    """Dense real-valued array with an optional place in the active graph."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype: Any = None,
    ):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            array = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            array = data
        else:
            array = np.asarray(data, dtype=DEFAULT_DTYPE)
        self.data = array
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape, detail="only single-element tensors convert to float")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Same values, cut from the graph."""
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # Operator sugar; implementations live in ops.py.
    def __add__(self, other: ArrayLike) -> "Tensor":
        from . import ops

        return ops.add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        from . import ops

        return ops.add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        from . import ops

        return ops.mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        from . import ops

        return ops.mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        from . import ops

        return ops.div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        from . import ops

        return ops.div(other, self)

    def __neg__(self) -> "Tensor":
        from . import ops

        return ops.neg(self)

    def __pow__(self, exponent: float) -> "Tensor":
        from . import ops

        return ops.power(self, exponent)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        from . import ops

        return ops.matmul(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        from . import ops

        return ops.take(self, index)


class Parameter(Tensor):
    """Trainable leaf tensor. The optimizer rebinds ``data``; it never mutates it in place."""

    __slots__ = ()

    def __init__(self, data: Any, name: Optional[str] = None, dtype: Any = None):
        super().__init__(data, requires_grad=True, name=name, dtype=dtype)


def as_tensor(value: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype or DEFAULT_DTYPE))


VectorJacobian = Callable[[np.ndarray], tuple[Optional[np.ndarray], ...]]


class Node(NamedTuple):
    """One recorded forward op: output, inputs and the vector-Jacobian product."""

    op: str
    out: Tensor
    parents: tuple[Tensor, ...]
    vjp: VectorJacobian


class Graph:
    """Dynamic tape of forward ops plus the named parameters it differentiates."""

    def __init__(self, parameters: Optional[Union[dict[str, Tensor], Any]] = None):
        if parameters is None:
            named: dict[str, Tensor] = {}
        elif isinstance(parameters, dict):
            named = dict(parameters)
        else:
            named = dict(parameters.named_parameters())
        self.parameters: dict[str, Tensor] = named
        self.nodes: list[Node] = []
        self._token = None

    def __enter__(self) -> "Graph":
        self._token = _ACTIVE_GRAPH.set(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE_GRAPH.reset(self._token)
        self._token = None

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        return backward(self, loss)


def active_graph() -> Optional[Graph]:
    return _ACTIVE_GRAPH.get()


def make_result(
    data: np.ndarray,
    parents: Iterable[Tensor],
    vjp: VectorJacobian,
    op: str,
) -> Tensor:
    """Wrap an op output and record it when a graph is active and any input needs a gradient."""
    parents = tuple(parents)
    graph = _ACTIVE_GRAPH.get()
    tracked = graph is not None and any(p.requires_grad for p in parents)
    out = Tensor(np.asarray(data), requires_grad=tracked)
    if tracked:
        graph.record(Node(op, out, parents, vjp))
    return out


def backward(graph: Graph, loss: Tensor) -> dict[str, np.ndarray]:
    """Propagate d(loss)/d(node) through the tape; return one gradient per named parameter.

    Parameters that do not reach the loss get an all-zero gradient.
    """
    if loss.size != 1:
        raise ShapeError("backward", loss.shape, detail="loss must be a scalar")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        upstream = grads.pop(id(node.out), None)
        if upstream is None:
            continue
        parent_grads = node.vjp(upstream)
        for parent, grad in zip(node.parents, parent_grads):
            if grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + grad
            else:
                grads[key] = grad

    result: dict[str, np.ndarray] = {}
    for name, param in graph.parameters.items():
        grad = grads.get(id(param))
        if grad is None:
            result[name] = np.zeros_like(param.data)
        else:
            result[name] = np.asarray(grad, dtype=param.dtype).reshape(param.shape)
    return result
