"""Tensor engine: dense arrays with reverse-mode differentiation."""
from fimp.numerics.functional import (
    concat_last_axis,
    cross_entropy,
    dropout,
    embedding_lookup,
    gelu,
    layer_norm,
    leaky_relu,
    linear,
    log_softmax,
    mean_axis,
    mse,
    relu,
    segment_mean,
    segment_softmax,
    segment_sum,
    sigmoid,
    softmax_rows,
    take_rows,
)
from fimp.numerics.gradcheck import grad_check, grad_check_params
from fimp.numerics.module import Linear, Module, init_weight, parameter
from fimp.numerics.optim import Adam
from fimp.numerics.rng import Rng
from fimp.numerics.tensor import (
    Tensor,
    add,
    as_tensor,
    concat,
    exp,
    get_default_dtype,
    grad_enabled,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    precision,
    reshape,
    stack,
    sub,
    sum_,
    tanh,
    transpose,
    where,
)

