"""Tensors, recorded op nodes and reverse-mode accumulation."""
from __future__ import annotations

from collections import OrderedDict
from typing import Dict, List, Optional

import numpy as np

DTYPES = {"float64": np.float64, "float32": np.float32}


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node: Optional[Node] = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self, grad=None) -> None:
        backward(self, grad)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{label})"


class Node:
    """One recorded application of an op."""

    __slots__ = ("op", "inputs", "out_id", "label")

    def __init__(self, op, inputs, output, label):
        self.op = op
        self.inputs = inputs
        # only the id: a strong reference would form a tensor/node cycle
        # that holds activations until the cyclic collector runs
        self.out_id = id(output)
        self.label = label

    def __repr__(self):
        return f"Node({self.label})"


class Op:
    """Base class for differentiable ops.

    Subclasses implement ``forward`` on raw arrays (caching what they need)
    and ``backward`` returning one gradient per input (``None`` allowed for
    non-differentiable inputs such as targets).
    """

    name = "op"
    smooth = True

    def forward(self, *xs):
        raise NotImplementedError

    def backward(self, g):
        raise NotImplementedError


_counter = [0]


def apply(op: Op, *inputs: Tensor, label: Optional[str] = None) -> Tensor:
    arrays = [t.data for t in inputs]
    out = op.forward(*arrays)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"non-finite output from {label or op.name}")
    result = Tensor(out)
    if any(t.requires_grad for t in inputs):
        _counter[0] += 1
        result.requires_grad = True
        result.node = Node(op, list(inputs), result, label or f"{op.name}#{_counter[0]}")
    return result


def topo_order(root: Tensor) -> List[Node]:
    order: List[Node] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        t, done = stack.pop()
        node = t.node
        if node is None:
            continue
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((t, True))
        for inp in node.inputs:
            if inp.node is not None and id(inp.node) not in seen:
                stack.append((inp, False))
    return order


def backward(root: Tensor, grad=None) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if root.node is None:
        raise RuntimeError("backward called on a tensor with no recorded graph; run forward first")
    if grad is None:
        if root.data.size != 1:
            raise ValueError("grad must be given for non-scalar roots")
        grad = np.ones_like(root.data)
    grads: Dict[int, np.ndarray] = {id(root): np.asarray(grad, dtype=root.data.dtype)}
    for node in reversed(topo_order(root)):
        g = grads.pop(node.out_id, None)
        if g is None:
            continue
        in_grads = node.op.backward(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp.node is None:
                inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
            else:
                key = id(inp)
                grads[key] = ig if key not in grads else grads[key] + ig


class Graph:
    """Named parameters plus a forward builder.

    Subclasses implement ``forward(x)``; every call records a fresh set of
    nodes, and ``backward`` must follow a forward.
    """

    def __init__(self, dtype=np.float64):
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.dtype = np.dtype(dtype)
        self._forwarded = False

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        out = self.forward(x)
        self._forwarded = True
        return out

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def backward(self, loss: Tensor) -> Dict[str, np.ndarray]:
        if not self._forwarded:
            raise RuntimeError("backward before forward")
        self.zero_grad()
        backward(loss)
        return {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for k, p in self.params.items()}

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data.copy()) for k, p in self.params.items())

    def load_state_dict(self, state, strict: bool = True) -> None:
        if strict and set(state) != set(self.params):
            missing = sorted(set(self.params) - set(state))
            extra = sorted(set(state) - set(self.params))
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for k, v in state.items():
            if k not in self.params:
                continue
            p = self.params[k]
            if p.data.shape != np.shape(v):
                raise ValueError(f"shape mismatch for {k}: {p.data.shape} vs {np.shape(v)}")
            p.data = np.array(v, dtype=self.dtype, copy=True)

    def num_params(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))
