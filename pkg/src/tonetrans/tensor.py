"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation builds a node in an implicit computation
graph; ``trace`` linearizes the graph into a ``ComputationRecord`` whose
reversal drives gradient accumulation. Values are numpy arrays, float64 by
default (float32 available for training speed via ``set_default_dtype``).
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float64

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class NonFiniteError(ArithmeticError):
    """A tensor contains NaN or Inf where finite values are required."""


def set_default_dtype(dtype) -> None:
    """Set the dtype used for new float tensors ('float32' or 'float64')."""
    global _DEFAULT_DTYPE
    resolved = np.dtype(dtype).type
    if resolved not in _FLOAT_DTYPES:
        raise ValueError(f"unsupported default dtype: {dtype}")
    _DEFAULT_DTYPE = resolved


def default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """Immutable-by-convention n-d float array, optionally tracked for grads.

    ``parents``/``op`` describe how the value was produced; leaves have no
    parents. ``requires_grad`` marks tensors that should receive gradients
    (trainable parameters) or that lie on a path to one.
    """

    __slots__ = ("data", "requires_grad", "parents", "op", "_forward", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype.type not in _FLOAT_DTYPES:
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.parents: tuple[Tensor, ...] = ()
        self.op = "leaf"
        self._forward: Callable | None = None
        self._backward: Callable | None = None

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def assert_finite(self, name: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"{name} contains non-finite values")
        return self

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    """Wrap plain arrays/scalars as constant tensors; pass tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def make_node(
    data: np.ndarray,
    parents: Sequence[Tensor],
    op: str,
    forward: Callable,
    backward: Callable,
) -> Tensor:
    """Create a graph node.

    ``forward`` recomputes the value from the parents' arrays (used by
    ``ComputationRecord.replay``); ``backward`` maps the output gradient to
    one gradient array (or None) per parent.
    """
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    out.parents = tuple(parents)
    out.op = op
    out._forward = forward
    out._backward = backward
    return out


class ComputationRecord:
    """Topologically ordered trace of the graph below one root tensor.

    Replaying the trace recomputes every non-leaf value from the leaves,
    bit-exactly, without touching the tensors themselves.
    """

    def __init__(self, root: Tensor, nodes: list[Tensor]):
        self.root = root
        self.nodes = nodes  # parents always precede children

    def replay(self) -> np.ndarray:
        values: dict[int, np.ndarray] = {}
        for node in self.nodes:
            if node._forward is None:
                values[id(node)] = node.data
            else:
                values[id(node)] = node._forward(*(values[id(p)] for p in node.parents))
        return values[id(self.root)]


def trace(root: Tensor) -> ComputationRecord:
    """Linearize the graph below ``root`` in topological order."""
    nodes: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            nodes.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return ComputationRecord(root, nodes)


def gradient_of(loss: Tensor, params):
    """Reverse-mode gradients of a scalar loss w.r.t. the given parameters.

    ``params`` may be a dict (name -> Tensor) or an iterable of tensors; the
    result mirrors its structure with numpy arrays. Parameters that do not
    appear on the loss's trace receive zero gradients rather than being
    omitted.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ShapeError(f"gradient_of expects a scalar loss, got shape {loss.shape}")

    record = trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(record.nodes):
        out_grad = grads.get(id(node))
        if out_grad is None or node._backward is None:
            continue
        if not any(p.requires_grad for p in node.parents):
            continue
        parent_grads = node._backward(out_grad)
        for parent, g in zip(node.parents, parent_grads):
            if g is None or not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            if acc is None:
                # Copy: backward fns may return views or share arrays
                # between parents, and accumulation below is in-place.
                grads[id(parent)] = np.array(g)
            else:
                acc += g

    def lookup(t: Tensor) -> np.ndarray:
        g = grads.get(id(t))
        return np.zeros_like(t.data) if g is None else g

    if isinstance(params, dict):
        return {name: lookup(t) for name, t in params.items()}
    return [lookup(t) for t in params]
