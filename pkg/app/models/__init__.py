import torch.nn as nn

from app.core.schemas import ModelConfig
from app.models.shuffle_unet import ShuffleUNet, count_parameters
from app.models.unet import UNet3D


def build_model(config: ModelConfig) -> nn.Module:
    """Construct the network named by config.architecture"""
    if config.architecture == "unet":
        return UNet3D(config)
    return ShuffleUNet(config)


__all__ = ["ShuffleUNet", "UNet3D", "build_model", "count_parameters"]
