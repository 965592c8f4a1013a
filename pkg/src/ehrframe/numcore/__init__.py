"""Minimal float32 tensor engine with reverse-mode autodiff."""

from . import ops
from .checkpoint import load_arrays, save_arrays
from .ops import (
    ShapeError,
    bce_with_logits,
    concat,
    dropout,
    embedding,
    gelu,
    layer_norm,
    matmul,
    relu,
    sigmoid,
    softmax,
)
from .rng import stream
from .tensor import DTYPE, NumericError, Tape, Tensor, active_tape, as_tensor, backward

__all__ = [
    "DTYPE", "NumericError", "ShapeError", "Tape", "Tensor", "active_tape", "as_tensor",
    "backward", "bce_with_logits", "concat", "dropout", "embedding", "gelu", "layer_norm",
    "load_arrays", "matmul", "ops", "relu", "save_arrays", "sigmoid", "softmax", "stream",
]
