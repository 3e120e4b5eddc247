"""Differentiable operators.

Feature maps are channel-major, ``(C, N, H, W)``: im2col then reduces to
contiguous block copies and a single GEMM per convolution. ``to_channel_major``
and ``to_batch_major`` convert at graph boundaries.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .tensor import Op, Tensor, apply


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    c, n, h, w = x.shape
    if k == 1:
        return x.reshape(c, n * h * w)
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((c, k, k, n, h, w), dtype=x.dtype)
    for dy in range(k):
        for dx in range(k):
            cols[:, dy, dx] = xp[:, :, dy:dy + h, dx:dx + w]
    return cols.reshape(c * k * k, n * h * w)


def _conv_same(x: np.ndarray, w: np.ndarray):
    """Stride-1 correlation with zero 'same' padding; returns (out, cols)."""
    _, n, h, wd = x.shape
    o, _, k, _ = w.shape
    cols = _im2col(x, k)
    out = w.reshape(o, -1) @ cols
    return out.reshape(o, n, h, wd), cols


class Conv2d(Op):
    name = "conv2d"

    def forward(self, x, w, b):
        if x.ndim != 4 or w.ndim != 4 or x.shape[0] != w.shape[1]:
            raise ValueError(f"conv2d shape mismatch: input {x.shape}, kernel {w.shape}")
        if w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
            raise ValueError("conv2d expects square odd kernels")
        out, self.cols = _conv_same(x, w)
        self.w = w
        out += b.reshape(-1, 1, 1, 1)
        return out

    def backward(self, g):
        o = self.w.shape[0]
        gm = g.reshape(o, -1)
        dw = (gm @ self.cols.T).reshape(self.w.shape)
        db = gm.sum(axis=1)
        wf = np.ascontiguousarray(self.w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        dx, _ = _conv_same(g, wf)
        return dx, dw, db


class ConvTranspose2x2(Op):
    """Kernel 2, stride 2 transposed convolution (exact 2x upsampling)."""

    name = "conv_transpose2x2"

    def forward(self, x, w, b):
        if x.shape[0] != w.shape[0] or w.shape[2:] != (2, 2):
            raise ValueError(f"transpose-conv shape mismatch: input {x.shape}, kernel {w.shape}")
        c, n, h, wd = x.shape
        o = w.shape[1]
        self.x, self.w = x, w
        wm = w.transpose(1, 2, 3, 0).reshape(o * 4, c)
        y = (wm @ x.reshape(c, -1)).reshape(o, 2, 2, n, h, wd)
        y = y.transpose(0, 3, 4, 1, 5, 2).reshape(o, n, 2 * h, 2 * wd)
        return y + b.reshape(-1, 1, 1, 1)

    def backward(self, g):
        c, n, h, wd = self.x.shape
        o = self.w.shape[1]
        g6 = g.reshape(o, n, h, 2, wd, 2).transpose(0, 3, 5, 1, 2, 4).reshape(o * 4, n * h * wd)
        wm = self.w.transpose(1, 2, 3, 0).reshape(o * 4, c)
        dx = (wm.T @ g6).reshape(c, n, h, wd)
        dw = (g6 @ self.x.reshape(c, -1).T).reshape(o, 2, 2, c).transpose(3, 0, 1, 2)
        db = g.sum(axis=(1, 2, 3))
        return dx, np.ascontiguousarray(dw), db


class MaxPool2(Op):
    name = "maxpool2"
    smooth = False

    def forward(self, x):
        a, b, h, w = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"maxpool2 needs even spatial size, got {x.shape}")
        win = x.reshape(a, b, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        win = win.reshape(a, b, h // 2, w // 2, 4)
        # ties go to the first window position
        self.idx = win.argmax(axis=-1)
        self.shape = x.shape
        return np.take_along_axis(win, self.idx[..., None], axis=-1)[..., 0]

    def backward(self, g):
        a, b, h, w = self.shape
        win = np.zeros((a, b, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(win, self.idx[..., None], g[..., None], axis=-1)
        dx = win.reshape(a, b, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (dx.reshape(self.shape),)


class ReLU(Op):
    name = "relu"
    smooth = False

    def forward(self, x):
        self.mask = x > 0
        return x * self.mask

    def backward(self, g):
        return (g * self.mask,)


class Sigmoid(Op):
    name = "sigmoid"

    def forward(self, x):
        self.y = 0.5 * (1.0 + np.tanh(0.5 * x))
        return self.y

    def backward(self, g):
        return (g * self.y * (1.0 - self.y),)


class Softmax(Op):
    """Softmax over one axis (the class axis)."""

    name = "softmax"

    def __init__(self, axis: int = 0):
        self.axis = axis

    def forward(self, x):
        e = np.exp(x - x.max(axis=self.axis, keepdims=True))
        self.y = e / e.sum(axis=self.axis, keepdims=True)
        return self.y

    def backward(self, g):
        s = self.y
        return (s * (g - (g * s).sum(axis=self.axis, keepdims=True)),)


class Concat(Op):
    name = "concat"

    def __init__(self, axis: int = 0):
        self.axis = axis

    def forward(self, *xs):
        self.sizes = [x.shape[self.axis] for x in xs]
        return np.concatenate(xs, axis=self.axis)

    def backward(self, g):
        cuts = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(g, cuts, axis=self.axis))


class Transpose(Op):
    name = "transpose"

    def __init__(self, axes):
        self.axes = tuple(axes)

    def forward(self, x):
        return np.ascontiguousarray(x.transpose(self.axes))

    def backward(self, g):
        return (np.ascontiguousarray(g.transpose(np.argsort(self.axes))),)


class Add(Op):
    name = "add"

    def forward(self, a, b):
        if a.shape != b.shape:
            raise ValueError(f"add shape mismatch {a.shape} vs {b.shape}")
        return a + b

    def backward(self, g):
        return g, g


class Sum(Op):
    name = "sum"

    def forward(self, x):
        self.shape = x.shape
        return np.asarray(x.sum())

    def backward(self, g):
        return (np.broadcast_to(g, self.shape).copy(),)


class WeightedSum(Op):
    """sum(x * c) for a constant array c."""

    name = "weighted_sum"

    def forward(self, x, c):
        self.c = c
        return np.asarray((x * c).sum())

    def backward(self, g):
        return g * self.c, None


def conv2d(x: Tensor, w: Tensor, b: Tensor, label: Optional[str] = None) -> Tensor:
    return apply(Conv2d(), x, w, b, label=label)


def conv_transpose2x2(x: Tensor, w: Tensor, b: Tensor, label: Optional[str] = None) -> Tensor:
    return apply(ConvTranspose2x2(), x, w, b, label=label)


def maxpool2(x: Tensor, label: Optional[str] = None) -> Tensor:
    return apply(MaxPool2(), x, label=label)


def relu(x: Tensor, label: Optional[str] = None) -> Tensor:
    return apply(ReLU(), x, label=label)


def sigmoid(x: Tensor, label: Optional[str] = None) -> Tensor:
    return apply(Sigmoid(), x, label=label)


def softmax(x: Tensor, axis: int = 0, label: Optional[str] = None) -> Tensor:
    return apply(Softmax(axis), x, label=label)


def concat(xs: Sequence[Tensor], axis: int = 0, label: Optional[str] = None) -> Tensor:
    return apply(Concat(axis), *xs, label=label)


def to_channel_major(x: Tensor, label: Optional[str] = None) -> Tensor:
    """(N, C, H, W) -> (C, N, H, W)."""
    return apply(Transpose((1, 0, 2, 3)), x, label=label)


def to_batch_major(x: Tensor, label: Optional[str] = None) -> Tensor:
    """(C, N, H, W) -> (N, C, H, W)."""
    return apply(Transpose((1, 0, 2, 3)), x, label=label)


def add(a: Tensor, b: Tensor, label: Optional[str] = None) -> Tensor:
    return apply(Add(), a, b, label=label)


def tsum(x: Tensor, label: Optional[str] = None) -> Tensor:
    return apply(Sum(), x, label=label)


def weighted_sum(x: Tensor, c, label: Optional[str] = None) -> Tensor:
    return apply(WeightedSum(), x, Tensor(np.asarray(c, dtype=x.dtype)), label=label)
