"""flowforge: occlusion-aware coarse-to-fine optical flow on a tape-based
NCHW tensor core."""

from .estimator import FlowEstimator
from .flow_ops import correlate, deform_conv, mask_tradeoff, warp
from .losses import LossConfig, aepe, fl_all, multiscale_epe
from .model import CoarseToFineFlowNet, DualPyramidFlowNet, ModelConfig, build_model
from .nn import ConvParams, ParamStore, conv2d, deconv2d, upsample_bilinear, upsample_bilinear_2x
from .tensor import Tape, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "FlowEstimator",
    "Tensor",
    "Tape",
    "backward",
    "ConvParams",
    "ParamStore",
    "conv2d",
    "deconv2d",
    "upsample_bilinear",
    "upsample_bilinear_2x",
    "warp",
    "correlate",
    "deform_conv",
    "mask_tradeoff",
    "LossConfig",
    "multiscale_epe",
    "aepe",
    "fl_all",
    "ModelConfig",
    "CoarseToFineFlowNet",
    "DualPyramidFlowNet",
    "build_model",
    "__version__",
]
