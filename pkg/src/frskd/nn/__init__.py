from . import functional
from .functional import (
    adaptive_max_pool,
    batch_norm,
    conv2d,
    depthwise_conv2d,
    global_avg_pool,
    infer_shape,
    linear,
    resize,
    upsample_bilinear,
)
from .layers import (
    BatchNorm2d,
    Conv2d,
    DepthwiseSeparableConv,
    Linear,
    Module,
    ModuleList,
    PointwiseConv,
    separable_param_count,
)

__all__ = [
    "functional",
    "adaptive_max_pool",
    "batch_norm",
    "conv2d",
    "depthwise_conv2d",
    "global_avg_pool",
    "infer_shape",
    "linear",
    "resize",
    "upsample_bilinear",
    "BatchNorm2d",
    "Conv2d",
    "DepthwiseSeparableConv",
    "Linear",
    "Module",
    "ModuleList",
    "PointwiseConv",
    "separable_param_count",
]
