"""Plain 3D UNet used as the learned baseline.

Max-pool downsampling, transposed-convolution upsampling and batch
normalization after every convolution.
"""
import torch
import torch.nn as nn

from app.core.errors import ConfigurationError, ShapeError
from app.core.schemas import ModelConfig
from app.models.shuffle_unet import check_patch_size, init_weights
from app.models.tensor_ops import check_tensor5d


class DoubleConvBN(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv3d(in_channels, out_channels, kernel, padding=kernel // 2),
            nn.BatchNorm3d(out_channels),
            nn.ReLU(inplace=True),
            nn.Conv3d(out_channels, out_channels, kernel, padding=kernel // 2),
            nn.BatchNorm3d(out_channels),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class UNet3D(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.architecture != "unet":
            raise ConfigurationError(f"UNet3D cannot be built from architecture {config.architecture!r}")
        self.config = config
        k = config.conv_kernel

        self.encoders = nn.ModuleList()
        in_channels = config.in_channels
        for level in range(1, config.levels + 1):
            self.encoders.append(DoubleConvBN(in_channels, config.filters(level), k))
            in_channels = config.filters(level)
        self.pool = nn.MaxPool3d(2)
        self.bottleneck = DoubleConvBN(in_channels, config.filters(config.levels + 1), k)

        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for level in range(config.levels, 0, -1):
            self.ups.append(nn.ConvTranspose3d(config.filters(level + 1), config.filters(level), kernel_size=2, stride=2))
            self.decoders.append(DoubleConvBN(2 * config.filters(level), config.filters(level), k))

        self.out_conv = nn.Conv3d(config.filters(1), config.out_channels, kernel_size=1)
        init_weights(self, config.init_seed, negative_slope=0.0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        check_tensor5d(x, "patch")
        if x.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected {self.config.in_channels} input channels, got {x.shape[1]}")
        check_patch_size(x.shape[2:], self.config)

        skips = []
        out = x
        for encoder in self.encoders:
            out = encoder(out)
            skips.append(out)
            out = self.pool(out)
        out = self.bottleneck(out)
        for up, decoder, skip in zip(self.ups, self.decoders, reversed(skips)):
            out = decoder(torch.cat([up(out), skip], dim=1))

        out = self.out_conv(out)
        if self.config.global_residual:
            out = out + x
        return out
