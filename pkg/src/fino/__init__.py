"""Flow-based joint image and noise denoiser.

The flow maps an image losslessly to a latent code whose first three
quarters hold clean content and last quarter holds noise; denoising keeps
the content code and replaces the noise code.
"""

from .flow import (
    FlowModel,
    LatentCode,
    flow_forward,
    flow_inverse,
    haar_forward,
    haar_inverse,
    init_model,
    latent_swap,
)
from .inference import denoise
from .metrics import psnr, ssim
from .tensor import Tensor, no_grad
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "FlowModel",
    "LatentCode",
    "Tensor",
    "TrainConfig",
    "denoise",
    "flow_forward",
    "flow_inverse",
    "haar_forward",
    "haar_inverse",
    "init_model",
    "latent_swap",
    "load_checkpoint",
    "no_grad",
    "psnr",
    "save_checkpoint",
    "ssim",
    "train",
]
