from vpnlab.netcore.adam import AdamState, adam_step
from vpnlab.netcore.gradcheck import check_gradients, finite_diff_grad, relative_error
from vpnlab.netcore.layers import (
    Conv2d,
    ConvTranspose2d,
    Linear,
    OptionConv2d,
    conv2d,
    conv_transpose2d,
    fully_connected,
    option_conv2d,
)
from vpnlab.netcore.params import ParamStore
from vpnlab.netcore.tensor import (
    Tensor,
    add,
    backward,
    concat,
    constant,
    elu,
    flatten,
    mul,
    no_grad,
    reshape,
    sigmoid,
    square,
    sub,
    sum_all,
    take,
)

__all__ = [
    "AdamState",
    "Conv2d",
    "ConvTranspose2d",
    "Linear",
    "OptionConv2d",
    "ParamStore",
    "Tensor",
    "adam_step",
    "add",
    "backward",
    "check_gradients",
    "concat",
    "constant",
    "conv2d",
    "conv_transpose2d",
    "elu",
    "finite_diff_grad",
    "flatten",
    "fully_connected",
    "mul",
    "no_grad",
    "option_conv2d",
    "relative_error",
    "reshape",
    "sigmoid",
    "square",
    "sub",
    "sum_all",
    "take",
]
