"""Central-difference gradient verification."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from .tensor import Tensor, backward, topo_order


def rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


@dataclass
class GradCheckReport:
    max_rel_err: float
    failing_nodes: List[str]
    per_tensor: Dict[str, float] = field(default_factory=dict)
    per_node: Dict[str, float] = field(default_factory=dict)
    coords_checked: int = 0

    @property
    def ok(self) -> bool:
        return not self.failing_nodes

    def as_dict(self):
        return {"max_rel_err": self.max_rel_err, "failing_nodes": list(self.failing_nodes),
                "per_tensor": dict(self.per_tensor), "per_node": dict(self.per_node),
                "coords_checked": self.coords_checked}


def _pick(size: int, cap: Optional[int], rng: np.random.Generator) -> np.ndarray:
    if cap is None or size <= cap:
        return np.arange(size)
    return np.sort(rng.choice(size, size=cap, replace=False))


def _check_node(node, h, tol, cap, rng):
    """Verify one node's backward as a vector-Jacobian product against local differences."""
    arrays = [np.array(t.data, dtype=np.float64) for t in node.inputs]
    op = copy.copy(node.op)
    out = op.forward(*arrays)
    u = rng.standard_normal(np.shape(out))
    analytic = op.backward(u.copy())
    worst = 0.0
    for i, (t, ga) in enumerate(zip(node.inputs, analytic)):
        if ga is None or not t.requires_grad:
            continue
        x = arrays[i]
        flat = x.reshape(-1)
        for k in _pick(flat.size, cap, rng):
            orig = flat[k]

            def f(val):
                flat[k] = val
                return float((u * copy.copy(node.op).forward(*arrays)).sum())

            fp, fm = f(orig + h), f(orig - h)
            if not node.op.smooth:
                f0 = f(orig)
                fwd, bwd = (fp - f0) / h, (f0 - fm) / h
                if rel_err(fwd, bwd) > 1e-3 and abs(fwd - bwd) > 1e-6:
                    flat[k] = orig
                    continue  # straddles a kink
            flat[k] = orig
            worst = max(worst, rel_err(float(ga.reshape(-1)[k]), (fp - fm) / (2 * h)))
    return worst


def grad_check(loss_fn: Callable[[], Tensor], tensors: Dict[str, Tensor], tolerance: float = 1e-4,
               h: float = 1e-5, max_coords: Optional[int] = None, seed: int = 0,
               check_nodes: bool = True, node_coords: int = 12) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences.

    ``loss_fn`` rebuilds the graph and returns a scalar loss each call.
    Every coordinate of every tensor in ``tensors`` is perturbed unless
    ``max_coords`` caps it, in which case a seeded subsample is used.
    With ``check_nodes`` each recorded op is also checked locally so a
    faulty backward can be named.
    """
    for name, t in tensors.items():
        if t.data.dtype != np.float64:
            raise TypeError(f"grad_check requires 64-bit tensors ({name} is {t.data.dtype})")
    rng = np.random.default_rng(seed)

    for t in tensors.values():
        t.grad = None
    loss = loss_fn()
    backward(loss)
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for k, t in tensors.items()}

    per_tensor: Dict[str, float] = {}
    count = 0
    for name, t in tensors.items():
        flat = t.data.reshape(-1)
        worst = 0.0
        for k in _pick(flat.size, max_coords, rng):
            orig = flat[k]
            flat[k] = orig + h
            fp = float(loss_fn().data)
            flat[k] = orig - h
            fm = float(loss_fn().data)
            flat[k] = orig
            worst = max(worst, rel_err(float(analytic[name].reshape(-1)[k]), (fp - fm) / (2 * h)))
            count += 1
        per_tensor[name] = worst

    per_node: Dict[str, float] = {}
    failing: List[str] = []
    if check_nodes:
        loss = loss_fn()
        for node in topo_order(loss):
            err = _check_node(node, h, tolerance, node_coords, rng)
            per_node[node.label] = err
            if err > tolerance:
                failing.append(node.label)

    max_err = max(per_tensor.values(), default=0.0)
    if max_err > tolerance and not failing:
        failing.append("<composite>")
    return GradCheckReport(max_err, failing, per_tensor, per_node, count)
