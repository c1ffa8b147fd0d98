"""Minimal dense tensors, reverse-mode autodiff, and SGD."""

from .tensor import (
    Graph,
    ShapeError,
    Tensor,
    get_default_dtype,
    is_grad_enabled,
    no_grad,
    precision,
    set_default_dtype,
)
from .ops import (
    add,
    batch_norm,
    concat,
    conv2d,
    dropout,
    elementwise_add,
    getitem,
    global_avg_pool,
    hadamard,
    linear,
    log_softmax_np,
    max_pool,
    mean,
    mul_const,
    relu,
    reshape,
    scalar_scale,
    softmax_cross_entropy,
    softmax_np,
    stack,
    sub,
    sum_all,
)
from .optim import SGD, OptimizerState, sgd_step
from .gradcheck import grad_check, numerical_grad, relative_error
from .rng import DropoutStream


def backward(loss: Tensor) -> None:
    loss.backward()


__all__ = [name for name in dir() if not name.startswith("_")]
