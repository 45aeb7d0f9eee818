"""Reverse-mode tensor engine, Adam, finite-difference checks and FGT1 I/O."""
from . import fgt
from .gradcheck import GradCheckReport, grad_check, relative_error
from .layers import MLP, Linear
from .optim import AdamState, ParamStore, adam_step
from .tensor import (
    DomainError,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    avg_pool2d,
    broadcast_to,
    clip,
    concat,
    conv2d,
    default_dtype,
    div,
    exp,
    gather,
    getitem,
    l2_normalize,
    log,
    log_sigmoid,
    matmul,
    maximum,
    mean,
    minimum,
    mul,
    no_grad,
    power,
    precision,
    relu,
    reshape,
    scatter_rows,
    set_precision,
    sigmoid,
    softmax,
    sqrt,
    stack,
    sub,
    tabs,
    tanh,
    transpose,
    tsum,
    where,
)
