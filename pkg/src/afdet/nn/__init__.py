from .flops import flops_count, layer_macs, lite_vs_plain_ratio
from .functional import (
    avg_pool2,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    shortcut_add,
    upsample_nearest,
    upsample_nearest_backward,
)
from .gradcheck import grad_check, numeric_grad, relative_error
from .layers import BatchNorm2d, Conv2d, ConvBN, LayerSpec, LiteBlock, VdDownsample
from .model import DetectorOutput, ToyDetector
from .optim import EmaState, ema_update, lr_schedule, scaled_milestones, sgd_step
