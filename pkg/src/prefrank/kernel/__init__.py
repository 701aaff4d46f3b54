"""Minimal dense-tensor kernel: taped autodiff, counter-based RNG, AdamW."""

from .checkpoint import load_tensors, save_tensors
from .optim import OptimState, collect_grads, opt_step, zero_grads
from .rng import Rng, derive_seed
from .tensor import (
    BackwardError,
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    concat,
    embedding,
    gather_last,
    grad_or_zeros,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mul,
    no_grad,
    relu,
    sigmoid,
    softmax,
    softplus,
    tanh,
    tmean,
    tslice,
    tsum,
)

__all__ = [
    "BackwardError",
    "NonFiniteError",
    "OptimState",
    "Rng",
    "ShapeError",
    "Tensor",
    "add",
    "collect_grads",
    "concat",
    "derive_seed",
    "embedding",
    "gather_last",
    "grad_or_zeros",
    "layer_norm",
    "load_tensors",
    "log",
    "log_softmax",
    "matmul",
    "mul",
    "no_grad",
    "opt_step",
    "relu",
    "save_tensors",
    "sigmoid",
    "softmax",
    "softplus",
    "tanh",
    "tmean",
    "tslice",
    "tsum",
    "zero_grads",
]
