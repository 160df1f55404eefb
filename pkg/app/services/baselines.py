"""Comparison methods: trilinear and sinc interpolation, and the plain UNet configuration."""
import logging
from typing import Callable, Dict, Sequence

import numpy as np
from scipy import ndimage

from app.core.errors import ShapeError, UsageError
from app.core.schemas import ModelConfig
from app.services.data_pipeline import scaled_affine, sinc_upsample, upsampling_factors
from app.storage.volumes import Volume

logger = logging.getLogger(__name__)


def trilinear_upsample(lr: Volume, target_dims: Sequence[int]) -> Volume:
    """Trilinear interpolation on the grid of sinc_upsample and simulate_lowres.

    Target voxel i samples source coordinate i * n_in / n_out, so source voxel 0 stays at
    target voxel 0 and, for an exact factor f, target voxel f * i equals source voxel i.
    Coordinates past the last source voxel repeat the edge value.
    """
    target_dims = tuple(int(s) for s in target_dims)
    if any(s < 2 for s in lr.shape):
        raise ShapeError(f"trilinear interpolation needs at least 2 voxels per axis, got {lr.shape}")
    factors = upsampling_factors(lr.shape, target_dims)
    axes = [np.minimum(np.arange(m) * (n / m), n - 1) for n, m in zip(lr.shape, target_dims)]
    coordinates = np.stack(np.meshgrid(*axes, indexing="ij"))
    voxels = ndimage.map_coordinates(np.asarray(lr.voxels, dtype=np.float64), coordinates, order=1, mode="nearest")
    return Volume(
        voxels.astype(lr.voxels.dtype, copy=False),
        spacing=tuple(s / f for s, f in zip(lr.spacing, factors)),
        affine=scaled_affine(lr.affine, [1.0 / f for f in factors]),
        intensity_scale=lr.intensity_scale,
    )


INTERPOLATORS: Dict[str, Callable[[Volume, Sequence[int]], Volume]] = {
    "trilinear": trilinear_upsample,
    "sinc": sinc_upsample,
}
LEARNED_METHODS = {"unet": "unet", "shuffleunet": "shuffleunet"}
METHOD_NAMES = tuple(INTERPOLATORS) + tuple(LEARNED_METHODS)


def interpolate(method: str, lr: Volume, target_dims: Sequence[int]) -> Volume:
    if method not in INTERPOLATORS:
        raise UsageError(f"{method!r} is not an interpolation method; choose from {', '.join(INTERPOLATORS)}")
    return INTERPOLATORS[method](lr, target_dims)


def is_learned(method: str) -> bool:
    if method not in METHOD_NAMES:
        raise UsageError(f"unknown method {method!r}; choose from {', '.join(METHOD_NAMES)}")
    return method in LEARNED_METHODS


def unet_baseline_config(config: ModelConfig) -> ModelConfig:
    """The same hyperparameters with the plain UNet architecture"""
    return config.model_copy(update={"architecture": "unet"})
