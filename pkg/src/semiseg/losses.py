"""Training losses and the Dice evaluation metric.

Each loss exists as a differentiable op (for training graphs) and as a plain
function on arrays. Probability maps and targets are laid out class-first,
``(L, H, W)``, or batched ``(N, L, H, W)``.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .nnkit.tensor import Op, Tensor, apply

LOG_EPS = 1e-12
DICE_EPS = 1e-6


def _check_shapes(a, b, what):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"{what}: shape mismatch {np.shape(a)} vs {np.shape(b)}")


def _pixels(shape) -> int:
    # all axes except the class axis
    if len(shape) == 4:
        return shape[0] * shape[2] * shape[3]
    return int(np.prod(shape)) // shape[0]


class L1Loss(Op):
    name = "l1_loss"
    smooth = False

    def forward(self, pred, target):
        _check_shapes(pred, target, "l1_loss")
        self.diff = pred - target
        return np.asarray(np.abs(self.diff).mean())

    def backward(self, g):
        # sign(0) == 0: the subgradient at a tie is zero
        return g * np.sign(self.diff) / self.diff.size, None


class CELoss(Op):
    name = "ce_loss"

    def __init__(self, reduction: str = "mean"):
        if reduction not in ("mean", "sum"):
            raise ValueError(f"unknown reduction {reduction!r}")
        self.reduction = reduction

    def forward(self, m, t):
        _check_shapes(m, t, "ce_loss")
        self.m, self.t = m, t
        total = -(t * np.log(np.maximum(m, LOG_EPS))).sum()
        self.scale = 1.0 / _pixels(m.shape) if self.reduction == "mean" else 1.0
        return np.asarray(total * self.scale)

    def backward(self, g):
        live = self.m > LOG_EPS
        dm = np.where(live, -self.t / np.where(live, self.m, 1.0), 0.0)
        return g * self.scale * dm, None


class DiceLoss(Op):
    """Soft multi-class Dice loss, background included, averaged over the batch."""

    name = "dice_loss"

    def forward(self, m, t):
        _check_shapes(m, t, "dice_loss")
        batched = m.ndim == 4
        m4 = m if batched else m[None]
        t4 = t if batched else t[None]
        self.batched = batched
        self.m4, self.t4 = m4, t4
        self.inter = (m4 * t4).sum(axis=(2, 3))                     # N L
        self.denom = m4.sum(axis=(2, 3)) + t4.sum(axis=(2, 3)) + DICE_EPS
        ratio = (2.0 * self.inter + DICE_EPS) / self.denom
        return np.asarray(1.0 - ratio.mean())

    def backward(self, g):
        n, nl = self.inter.shape
        num = 2.0 * self.inter + DICE_EPS
        d = self.denom
        dm = (2.0 * self.t4 * d[..., None, None] - num[..., None, None]) / (d * d)[..., None, None]
        dm = -g * dm / (n * nl)
        return (dm if self.batched else dm[0]), None


class MSELoss(Op):
    name = "mse_loss"

    def forward(self, m, t):
        _check_shapes(m, t, "mse_loss")
        self.diff = m - t
        return np.asarray((self.diff ** 2).mean())

    def backward(self, g):
        return g * 2.0 * self.diff / self.diff.size, None


class TotalLoss(Op):
    name = "total_loss"

    def forward(self, a, b):
        return a + b

    def backward(self, g):
        return g, g


def _t(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def l1(pred: Tensor, target) -> Tensor:
    return apply(L1Loss(), pred, _t(target, pred))


def ce(m: Tensor, t, reduction: str = "mean") -> Tensor:
    return apply(CELoss(reduction), m, _t(t, m))


def dice(m: Tensor, t) -> Tensor:
    return apply(DiceLoss(), m, _t(t, m))


def mse(m: Tensor, t) -> Tensor:
    return apply(MSELoss(), m, _t(t, m))


def total(l_su: Tensor, l_un: Tensor) -> Tensor:
    """Hybrid objective: supervised plus unsupervised term, unit weights."""
    for part in (l_su, l_un):
        if not np.all(np.isfinite(part.data)):
            raise FloatingPointError("total_loss: non-finite branch loss")
    return apply(TotalLoss(), l_su, l_un)


SUPERVISED = {"CE": ce, "DL": dice}


# -- array-level API ---------------------------------------------------------

def l1_loss(prediction, target) -> float:
    return float(L1Loss().forward(np.asarray(prediction, float), np.asarray(target, float)))


def ce_loss(m, t, reduction: str = "mean") -> float:
    return float(CELoss(reduction).forward(np.asarray(m, float), np.asarray(t, float)))


def dice_loss(m, t) -> float:
    return float(DiceLoss().forward(np.asarray(m, float), np.asarray(t, float)))


def mse_loss(m, t) -> float:
    return float(MSELoss().forward(np.asarray(m, float), np.asarray(t, float)))


def total_loss(l_su: float, l_un: float) -> float:
    if not (math.isfinite(l_su) and math.isfinite(l_un)):
        raise FloatingPointError("total_loss: non-finite branch loss")
    return l_su + l_un


def one_hot(labels, num_classes: int) -> np.ndarray:
    """Class-id map (H, W) or (N, H, W) -> one-hot, class axis first after batch."""
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= num_classes:
        raise ValueError("label ids out of range")
    oh = np.eye(num_classes, dtype=np.float64)[labels]  # ... H W L
    return np.moveaxis(oh, -1, -3)


def hard_mask(probs) -> np.ndarray:
    """Per-pixel argmax as a one-hot field; ties resolve to the lowest class id."""
    probs = np.asarray(probs)
    axis = probs.ndim - 3
    ids = probs.argmax(axis=axis)
    return one_hot(ids, probs.shape[axis])


def dsc_metric(p, t, class_id: int) -> float:
    """Dice coefficient of one class between a hard prediction and the ground truth.

    Both empty counts as perfect agreement (1.0).
    """
    _check_shapes(p, t, "dsc_metric")
    p = np.asarray(p)[..., class_id, :, :]
    t = np.asarray(t)[..., class_id, :, :]
    return _dice_counts(float((t * p).sum()), float(t.sum()), float(p.sum()))


def _dice_counts(inter: float, t_sum: float, p_sum: float) -> float:
    if t_sum + p_sum == 0:
        return 1.0
    return 2.0 * inter / (t_sum + p_sum)


def subject_dsc(predictions: Sequence, targets: Sequence, class_id: int) -> float:
    """Pool all pixels of one subject's slices into a single Dice computation."""
    if len(predictions) == 0:
        raise ValueError("subject_dsc needs at least one slice")
    if len(predictions) != len(targets):
        raise ValueError("predictions and targets differ in length")
    inter = t_sum = p_sum = 0.0
    for p, t in zip(predictions, targets):
        _check_shapes(p, t, "subject_dsc")
        pc = np.asarray(p)[class_id]
        tc = np.asarray(t)[class_id]
        inter += float((pc * tc).sum())
        t_sum += float(tc.sum())
        p_sum += float(pc.sum())
    return _dice_counts(inter, t_sum, p_sum)
