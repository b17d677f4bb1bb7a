"""Tensors, the recording tape and reverse-mode backward."""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class Tensor:
    """An n-d float array with an optional gradient buffer.

    ``grad`` is allocated (zeros, same shape) when ``requires_grad`` is set on
    a leaf; intermediate tensors receive ``grad`` during ``backward``.
    """

    __slots__ = ("value", "grad", "requires_grad", "node", "name")

    def __init__(self, value, requires_grad=False, dtype=None, name=None):
        if isinstance(value, Tensor):
            value = value.value
        if dtype is None:
            arr = np.asarray(value)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.value = np.ascontiguousarray(value, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.value) if self.requires_grad else None
        self.node = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def size(self):
        return self.value.size

    def numpy(self):
        return self.value

    def item(self):
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else _not_scalar(self)

    def detach(self):
        return Tensor(self.value, dtype=self.value.dtype)

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; kernels live in ops.py
    def __add__(self, other):
        from caml.autodiff import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from caml.autodiff import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from caml.autodiff import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from caml.autodiff import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from caml.autodiff import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from caml.autodiff import ops
        return ops.div(other, self)

    def __neg__(self):
        from caml.autodiff import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from caml.autodiff import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from caml.autodiff import ops
        return ops.getitem(self, index)


def _not_scalar(t):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


@dataclass(eq=False)
class Node:
    """One recorded kernel application."""

    op: str
    inputs: tuple
    output: Tensor
    backward: Callable  # grad_output -> tuple of input grads (None where unused)


@dataclass(eq=False)
class Graph:
    """Ordered tape of nodes; usable as a context manager to become ambient."""

    nodes: list = field(default_factory=list)

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)


_local = threading.local()


def _stack():
    if not hasattr(_local, "graphs"):
        _local.graphs = []
    return _local.graphs


class no_grad:
    """Context in which kernel outputs never require grad (inference)."""

    def __enter__(self):
        self.prev = getattr(_local, "grad_enabled", True)
        _local.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _local.grad_enabled = self.prev
        return False


def grad_enabled():
    return getattr(_local, "grad_enabled", True)


def current_graph():
    stack = _stack()
    return stack[-1] if stack else None


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x, dtype=dtype)


def record(op: str, inputs: Sequence[Tensor], value: np.ndarray, backward: Callable) -> Tensor:
    """Wrap ``value`` as the output of ``op`` and tape it if any input needs grad."""
    out = Tensor.__new__(Tensor)
    out.value = value
    out.grad = None
    out.name = None
    out.requires_grad = grad_enabled() and any(t.requires_grad for t in inputs)
    out.node = None
    if out.requires_grad:
        node = Node(op, tuple(inputs), out, backward)
        out.node = node
        g = current_graph()
        if g is not None:
            g.nodes.append(node)
    return out


def _topo_order(loss: Tensor) -> list:
    order, seen = [], set()
    stack = [(loss.node, False)] if loss.node is not None else []
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for t in node.inputs:
            if t.node is not None and id(t.node) not in seen:
                stack.append((t.node, False))
    return order


def backward(loss: Tensor, graph: Graph | None = None, retain_grads=True) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor needing grad.

    With ``graph`` the tape order is used; otherwise the order is recovered by
    walking back from ``loss``. Repeated calls add up until grads are zeroed.
    ``retain_grads=False`` fills only leaves (tensors not produced by a kernel).
    """
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if graph is not None:
        if loss.node not in graph.nodes:
            raise ValueError("loss was not produced inside the given graph")
        order = graph.nodes
    else:
        order = _topo_order(loss)

    grads = {id(loss): np.ones_like(loss.value)}
    owners = {id(loss): loss}
    for node in reversed(order):
        g = grads.get(id(node.output))
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                owners[key] = t

    for key, t in owners.items():
        if not retain_grads and t.node is not None:
            continue
        g = grads[key]
        if g.shape != t.value.shape:
            g = np.broadcast_to(g, t.value.shape)
        if t.grad is None:
            t.grad = np.array(g, dtype=t.value.dtype)
        else:
            t.grad += g
