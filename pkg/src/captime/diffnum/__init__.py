"""Minimal float64 reverse-mode autodiff used by every model component."""
from .gradcheck import GradCheckReport, ParamCheck, grad_check
from .optim import Adam, clip_grad_norm
from .tensor import (
    DomainError,
    GraphError,
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    concat,
    div,
    exp,
    gelu,
    layer_norm,
    lgamma,
    log,
    matmul,
    mul,
    neg,
    reduce_mean,
    reduce_sum,
    reshape,
    slice_,
    softmax,
    softplus,
    sub,
    tensor,
    transpose,
)

__all__ = [
    "Adam", "DomainError", "GradCheckReport", "GraphError", "NonFiniteError", "ParamCheck",
    "ShapeError", "Tensor", "add", "as_tensor", "clip_grad_norm", "concat", "div", "exp",
    "gelu", "grad_check", "layer_norm", "lgamma", "log", "matmul", "mul", "neg",
    "reduce_mean", "reduce_sum", "reshape", "slice_", "softmax", "softplus", "sub",
    "tensor", "transpose",
]
