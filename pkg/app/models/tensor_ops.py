"""3D pixel shuffle / pixel unshuffle.

Tensors are laid out as (n, c, H, W, D). The sub-voxel offset (dh, dw, dd)
of an unshuffled voxel goes to channel ``c_in * r**3 + (dh * r + dw) * r + dd``;
pixel shuffle is the exact inverse permutation. The pure rearrangements do
no arithmetic on values, the learned variants prepend a convolution.
"""
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from app.core.errors import ShapeError
from app.core.schemas import ShuffleSpec

SPATIAL_AXES = ("H", "W", "D")


def check_tensor5d(x: torch.Tensor, name: str = "x") -> None:
    """Raise ShapeError unless x is a dense rank-5 tensor with non-empty dims"""
    if x.dim() != 5:
        raise ShapeError(f"{name} must be rank 5 (n, c, H, W, D), got shape {tuple(x.shape)}")
    if any(size < 1 for size in x.shape):
        raise ShapeError(f"{name} has an empty dimension: {tuple(x.shape)}")


def pixel_unshuffle_3d(x: torch.Tensor, spec: ShuffleSpec) -> torch.Tensor:
    """(n, c, rH, rW, rD) -> (n, r^3 c, H, W, D)"""
    check_tensor5d(x)
    r = spec.factor
    n, c, h, w, d = x.shape
    for axis, size in zip(SPATIAL_AXES, (h, w, d)):
        if size % r != 0:
            raise ShapeError(f"axis {axis} of size {size} is not divisible by factor {r}")

    y = x.reshape(n, c, h // r, r, w // r, r, d // r, r)
    y = y.permute(0, 1, 3, 5, 7, 2, 4, 6)
    return y.reshape(n, c * r ** 3, h // r, w // r, d // r)


def pixel_shuffle_3d(x: torch.Tensor, spec: ShuffleSpec) -> torch.Tensor:
    """(n, k^3 c, H, W, D) -> (n, c, kH, kW, kD)"""
    check_tensor5d(x)
    k = spec.factor
    n, c, h, w, d = x.shape
    if c % k ** 3 != 0:
        raise ShapeError(f"channel count {c} is not divisible by factor^3 = {k ** 3}")

    out_c = c // k ** 3
    y = x.reshape(n, out_c, k, k, k, h, w, d)
    y = y.permute(0, 1, 5, 2, 6, 3, 7, 4)
    return y.reshape(n, out_c, h * k, w * k, d * k)


def _convolve(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor]) -> torch.Tensor:
    check_tensor5d(x)
    if weight.dim() != 5:
        raise ShapeError(f"kernel must be rank 5 (out, in, kH, kW, kD), got {tuple(weight.shape)}")
    if weight.shape[1] != x.shape[1]:
        raise ShapeError(f"kernel expects {weight.shape[1]} input channels, tensor has {x.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {tuple(bias.shape)} does not match {weight.shape[0]} output channels")
    if any(size % 2 == 0 for size in weight.shape[2:]):
        raise ShapeError(f"kernel spatial size must be odd, got {tuple(weight.shape[2:])}")
    padding = tuple(size // 2 for size in weight.shape[2:])
    return F.conv3d(x, weight, bias, padding=padding)


def learned_unshuffle(
    x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor], spec: ShuffleSpec
) -> torch.Tensor:
    """PU(W * x + b): same-size convolution followed by pixel unshuffle"""
    return pixel_unshuffle_3d(_convolve(x, weight, bias), spec)


def learned_shuffle(
    x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor], spec: ShuffleSpec
) -> torch.Tensor:
    """PS(W * x + b): same-size convolution followed by pixel shuffle"""
    return pixel_shuffle_3d(_convolve(x, weight, bias), spec)


class LearnedUnshuffle(nn.Module):
    """Convolution (padding kernel//2) then pixel unshuffle; output has factor^3 x out_channels"""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, factor: int = 2):
        super().__init__()
        self.spec = ShuffleSpec(factor=factor)
        self.conv = nn.Conv3d(in_channels, out_channels, kernel_size, padding=kernel_size // 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return learned_unshuffle(x, self.conv.weight, self.conv.bias, self.spec)

    def extra_repr(self) -> str:
        return f"factor={self.spec.factor}"


class LearnedShuffle(nn.Module):
    """Convolution (padding kernel//2) then pixel shuffle; output has out_channels / factor^3"""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, factor: int = 2):
        super().__init__()
        if out_channels % factor ** 3 != 0:
            raise ShapeError(f"{out_channels} channels cannot be shuffled by factor {factor}")
        self.spec = ShuffleSpec(factor=factor)
        self.conv = nn.Conv3d(in_channels, out_channels, kernel_size, padding=kernel_size // 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return learned_shuffle(x, self.conv.weight, self.conv.bias, self.spec)

    def extra_repr(self) -> str:
        return f"factor={self.spec.factor}"
