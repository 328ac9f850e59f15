"""From-scratch reverse-mode layers, U-Net, optimizer and checkpoint format."""
__all__ = ["load_checkpoint", "save_checkpoint", "avg_pool", "conv2d_backward", "conv2d_forward", "icnr_init",
           "pixel_shuffle", "pixel_unshuffle", "swish", "Adam", "adam_step", "UNet", "UNetConfig",
           "unet_backward", "unet_forward"]
from .checkpoint import load_checkpoint, save_checkpoint
from .layers import (avg_pool, conv2d_backward, conv2d_forward, icnr_init, pixel_shuffle,
                     pixel_unshuffle, swish)
from .optim import Adam, adam_step
from .unet import UNet, UNetConfig, unet_backward, unet_forward
