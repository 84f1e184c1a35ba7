"""Minimal numpy tensor core: layers, U-Net, Adam and the lr schedule."""

from .layers import Tensor
from .optim import OptimState, adam_step, cosine_annealing_lr
from .unet import (
    UNet,
    UNetConfig,
    backward,
    build_unet,
    forward,
    load_checkpoint,
    read_checkpoint_header,
    save_checkpoint,
)

__all__ = [
    "OptimState",
    "Tensor",
    "UNet",
    "UNetConfig",
    "adam_step",
    "backward",
    "build_unet",
    "cosine_annealing_lr",
    "forward",
    "load_checkpoint",
    "read_checkpoint_header",
    "save_checkpoint",
]
