"""ShuffleUNet: a normalization-free 3D tight-frame UNet.

Contraction level l: double convolution -> four-branch convolutional
decomposition (a1..a4) -> learned pixel unshuffle of a4. Expansion level l:
learned pixel shuffle -> four-branch decomposition (b1..b4) -> c_i = b_i + a_i
-> concat(c1, c2, c3, c4, a4) -> double convolution. A 1x1x1 convolution maps
the last expansion output to the output channels.

Channel schedule for base filters F (F_l = F * 2^(l-1)):
    contraction double conv      -> F_l
    decomposition branches       -> F_l each
    learned unshuffle            -> 8 F_l
    latent double conv           -> 2 F_L
    expansion shuffle            -> F_(l+1) / 8
    expansion decomposition      -> F_l each
    concatenation                -> 5 F_l
    expansion double conv        -> F_l
"""
import logging
from typing import List, Sequence, Tuple

import torch
import torch.nn as nn

from app.core.errors import ConfigurationError, ShapeError
from app.core.schemas import ModelConfig
from app.models.tensor_ops import LearnedShuffle, LearnedUnshuffle, check_tensor5d

logger = logging.getLogger(__name__)

DECOMPOSITION_BRANCHES = 4


def make_activation(config: ModelConfig) -> nn.Module:
    if config.activation == "relu":
        return nn.ReLU(inplace=False)
    return nn.LeakyReLU(config.negative_slope, inplace=False)


class DoubleConv(nn.Module):
    """(conv -> activation) x 2, spatial size preserved, no normalization"""

    def __init__(self, in_channels: int, out_channels: int, config: ModelConfig):
        super().__init__()
        k = config.conv_kernel
        self.in_channels = in_channels
        self.conv1 = nn.Conv3d(in_channels, out_channels, k, padding=k // 2)
        self.act1 = make_activation(config)
        self.conv2 = nn.Conv3d(out_channels, out_channels, k, padding=k // 2)
        self.act2 = make_activation(config)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"double convolution expects {self.in_channels} channels, got {x.shape[1]}")
        return self.act2(self.conv2(self.act1(self.conv1(x))))


class ConvDecomposition(nn.Module):
    """Four independent linear convolutions of the same input; branch order is fixed"""

    def __init__(self, in_channels: int, out_channels: int, config: ModelConfig):
        super().__init__()
        k = config.conv_kernel
        self.in_channels = in_channels
        self.branches = nn.ModuleList(
            nn.Conv3d(in_channels, out_channels, k, padding=k // 2) for _ in range(DECOMPOSITION_BRANCHES)
        )

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, ...]:
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"decomposition expects {self.in_channels} channels, got {x.shape[1]}")
        return tuple(branch(x) for branch in self.branches)


class ContractionBlock(nn.Module):
    def __init__(self, in_channels: int, filters: int, config: ModelConfig):
        super().__init__()
        self.double_conv = DoubleConv(in_channels, filters, config)
        self.decomposition = ConvDecomposition(filters, filters, config)
        self.unshuffle = LearnedUnshuffle(filters, filters, config.conv_kernel, config.scale_per_level)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, Tuple[torch.Tensor, ...]]:
        skips = self.decomposition(self.double_conv(x))
        return self.unshuffle(skips[-1]), skips


class ExpansionBlock(nn.Module):
    def __init__(self, in_channels: int, filters: int, config: ModelConfig):
        super().__init__()
        r3 = config.scale_per_level ** 3
        self.shuffle = LearnedShuffle(in_channels, in_channels, config.conv_kernel, config.scale_per_level)
        self.decomposition = ConvDecomposition(in_channels // r3, filters, config)
        self.double_conv = DoubleConv((DECOMPOSITION_BRANCHES + 1) * filters, filters, config)

    def forward(self, z: torch.Tensor, skips: Sequence[torch.Tensor]) -> torch.Tensor:
        branches = self.decomposition(self.shuffle(z))
        merged = [b + a for b, a in zip(branches, skips)]
        # a4 is the tensor that went into the pixel unshuffle
        merged.append(skips[-1])
        return self.double_conv(torch.cat(merged, dim=1))


class ShuffleUNet(nn.Module):
    """Same-size volumetric network with lossless down/up-sampling"""

    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.architecture != "shuffleunet":
            raise ConfigurationError(f"ShuffleUNet cannot be built from architecture {config.architecture!r}")
        self.config = config
        r3 = config.scale_per_level ** 3

        self.contraction = nn.ModuleList()
        in_channels = config.in_channels
        for level in range(1, config.levels + 1):
            filters = config.filters(level)
            self.contraction.append(ContractionBlock(in_channels, filters, config))
            in_channels = filters * r3

        self.latent = DoubleConv(in_channels, config.filters(config.levels + 1), config)

        # deepest level first
        self.expansion = nn.ModuleList(
            ExpansionBlock(config.filters(level + 1), config.filters(level), config)
            for level in range(config.levels, 0, -1)
        )
        self.output = nn.Conv3d(config.filters(1), config.out_channels, kernel_size=1)

        init_weights(self, config.init_seed, config.negative_slope if config.activation == "leaky_relu" else 0.0)

    def check_input(self, x: torch.Tensor) -> None:
        check_tensor5d(x, "patch")
        if x.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected {self.config.in_channels} input channels, got {x.shape[1]}")
        check_patch_size(x.shape[2:], self.config)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.check_input(x)

        skips: List[Tuple[torch.Tensor, ...]] = []
        down = x
        for block in self.contraction:
            down, level_skips = block(down)
            skips.append(level_skips)

        z = self.latent(down)
        for block, level_skips in zip(self.expansion, reversed(skips)):
            z = block(z, level_skips)

        out = self.output(z)
        if self.config.global_residual:
            out = out + x
        return out

    def level_shapes(self, spatial: Sequence[int]) -> List[Tuple[int, int, int]]:
        """Spatial size at levels 1..levels+1 for a given patch size"""
        check_patch_size(spatial, self.config)
        r = self.config.scale_per_level
        return [tuple(s // r ** i for s in spatial) for i in range(self.config.levels + 1)]


def check_patch_size(spatial: Sequence[int], config: ModelConfig) -> None:
    """Spatial dims must be divisible by 2^levels"""
    divisor = config.divisor
    bad = [size for size in spatial if size % divisor != 0]
    if len(spatial) != 3 or bad:
        raise ConfigurationError(
            f"patch spatial size {tuple(spatial)} must be three dims divisible by {divisor} "
            f"(2^{config.levels})"
        )


def init_weights(model: nn.Module, seed: int, negative_slope: float = 0.01) -> None:
    """Kaiming-Normal (fan-in) weights for every convolution, zero biases, reproducible from seed"""
    generator = torch.Generator().manual_seed(seed)
    gain = nn.init.calculate_gain("leaky_relu", negative_slope)
    initialized = 0
    with torch.no_grad():
        for module in model.modules():
            if not isinstance(module, (nn.Conv3d, nn.ConvTranspose3d)):
                continue
            weight = module.weight
            # meta tensors carry no storage to fill
            if weight.is_meta:
                continue
            fan_in = weight.shape[1] * weight[0][0].numel()
            weight.normal_(0.0, gain / fan_in ** 0.5, generator=generator)
            if module.bias is not None:
                module.bias.zero_()
            initialized += 1
    logger.debug(f"Initialized {initialized} convolutions with seed {seed}")


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
