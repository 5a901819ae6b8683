from .tensor import (
    PRIMITIVES,
    ShapeError,
    Tape,
    Tensor,
    backward,
    clip,
    concat,
    constant,
    div,
    exp,
    log,
    matmul,
    mean,
    mul,
    neg,
    primitive,
    relu,
    reshape,
    sigmoid,
    slice_,
    sqrt,
    square,
    sub,
    sum_,
    tanh,
)
from .nn import Linear, LstmCell, ParamGroup, bilstm_final, run_lstm, xavier
from .optim import Adam, AdamState, adam_step

add = PRIMITIVES["add"]

__all__ = [
    "PRIMITIVES",
    "ShapeError",
    "Tape",
    "Tensor",
    "backward",
    "add",
    "clip",
    "concat",
    "constant",
    "div",
    "exp",
    "log",
    "matmul",
    "mean",
    "mul",
    "neg",
    "primitive",
    "relu",
    "reshape",
    "sigmoid",
    "slice_",
    "sqrt",
    "square",
    "sub",
    "sum_",
    "tanh",
    "Linear",
    "LstmCell",
    "ParamGroup",
    "bilstm_final",
    "run_lstm",
    "xavier",
    "Adam",
    "AdamState",
    "adam_step",
]
