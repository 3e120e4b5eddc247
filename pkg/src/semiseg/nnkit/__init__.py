"""Small reverse-mode autodiff kit: tensors, conv ops, Adam, gradient checks."""
from .tensor import DTYPES, Graph, Node, NonFiniteError, Op, Tensor, apply, backward, topo_order
from .ops import (add, concat, conv2d, conv_transpose2x2, maxpool2, relu, sigmoid, softmax,
                  to_batch_major, to_channel_major, tsum, weighted_sum)
from .adam import AdamState, adam_step, apply_adam
from .gradcheck import GradCheckReport, grad_check, rel_err

__all__ = [
    "DTYPES", "Graph", "Node", "NonFiniteError", "Op", "Tensor", "apply", "backward", "topo_order",
    "add", "concat", "conv2d", "conv_transpose2x2", "maxpool2", "relu", "sigmoid", "softmax",
    "to_batch_major", "to_channel_major", "tsum", "weighted_sum", "AdamState", "adam_step", "apply_adam", "GradCheckReport",
    "grad_check", "rel_err",
]
