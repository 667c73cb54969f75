from .conv import conv3d, conv3d_output_shape
from .gradcheck import GradCase, GradResult, check_gradients, numerical_grad, run_cases
from .tensor import (
    NumericError,
    ShapeError,
    Tensor,
    add,
    broadcast_channels,
    channel_stats,
    clamp,
    concat,
    div,
    exp,
    flatten,
    getitem,
    leaky_relu,
    linear,
    log,
    matmul,
    maximum,
    maxpool3d,
    mean,
    mul,
    nearest_upsample3d,
    neg,
    pad3d,
    reshape,
    sigmoid,
    sqrt,
    square,
    sub,
    tabs,
    tensor,
    tsum,
    unbroadcast,
)

__all__ = [name for name in dir() if not name.startswith("_")]
