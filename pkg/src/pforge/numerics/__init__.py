"""Tensor arithmetic with reverse-mode gradients, RNG, and the optimizer."""

from .gradcheck import GradCheckReport, grad_check
from .optim import AdamW, adamw_step
from .rng import (
    Rng,
    STREAM_DROPOUT,
    STREAM_INIT,
    STREAM_MASKING,
    STREAM_SAMPLING,
)
from .tensor import (
    DTYPES,
    IGNORE_INDEX,
    NEG_INF,
    Tensor,
    add,
    concat_seq,
    const,
    cross_entropy,
    dropout,
    embedding,
    expand,
    gather_positions,
    gelu,
    grad_enabled,
    layer_norm,
    matmul,
    mean_all,
    merge_heads,
    mul,
    neg,
    no_grad,
    parameter,
    reshape,
    scale,
    softmax_rows,
    split_heads,
    sum_all,
    transpose,
)

__all__ = [
    "AdamW",
    "DTYPES",
    "GradCheckReport",
    "IGNORE_INDEX",
    "NEG_INF",
    "Rng",
    "STREAM_DROPOUT",
    "STREAM_INIT",
    "STREAM_MASKING",
    "STREAM_SAMPLING",
    "Tensor",
    "adamw_step",
    "add",
    "concat_seq",
    "const",
    "cross_entropy",
    "dropout",
    "embedding",
    "expand",
    "gather_positions",
    "gelu",
    "grad_check",
    "grad_enabled",
    "layer_norm",
    "matmul",
    "mean_all",
    "merge_heads",
    "mul",
    "neg",
    "no_grad",
    "parameter",
    "reshape",
    "scale",
    "softmax_rows",
    "split_heads",
    "sum_all",
    "transpose",
]
