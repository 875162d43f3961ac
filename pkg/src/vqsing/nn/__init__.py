from .module import Module
from .optim import Adam, AdamState, adam_step, grad_check
from .tensor import (
    Parameter,
    Tensor,
    concat,
    cross_entropy,
    default_dtype,
    detach,
    dropout,
    elu,
    exp,
    gather_rows,
    log,
    log_softmax,
    no_grad,
    relu,
    repeat,
    reshape,
    set_default_dtype,
    sigmoid,
    softmax,
    softmax_xent,
    straight_through,
    tanh,
    transpose,
)
from .layers import (
    BiGRU,
    Conv1d,
    Embedding,
    GroupNorm,
    GRU,
    LayerNorm,
    Linear,
    conv1d,
    group_norm,
    gru_cell,
    gru_seq,
    layer_norm,
    uniform_init,
)

__all__ = [
    "Adam", "AdamState", "BiGRU", "Conv1d", "Embedding", "GRU", "GroupNorm",
    "LayerNorm", "Linear", "Module", "Parameter", "Tensor", "adam_step",
    "concat", "conv1d", "cross_entropy", "default_dtype", "detach", "dropout",
    "elu", "exp", "gather_rows", "grad_check", "group_norm", "gru_cell",
    "gru_seq", "layer_norm", "log", "log_softmax", "no_grad", "relu", "repeat",
    "reshape", "set_default_dtype", "sigmoid", "softmax", "softmax_xent",
    "straight_through", "tanh", "transpose", "uniform_init",
]
