"""Synthetic diffusion-weighted phantoms: smooth isotropic tissue plus sharp anisotropic tracts."""
import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from app.core.errors import DataError
from app.services.dti_service import GradientTable, synthesize_signals, tensors_to_coefficients
from app.storage.volumes import DwiStudy, Volume, save_dwi_study

logger = logging.getLogger(__name__)

DEFAULT_BVAL = 1000.0
DEFAULT_SPACING = (1.75, 1.75, 2.35)
TISSUE_MD = 0.8e-3
FLUID_MD = 2.5e-3
TRACT_EIGENVALUES = (1.7e-3, 0.3e-3, 0.3e-3)
S0_SCALE = 1000.0
GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


def make_gradient_table(
    n_directions: int = 16, n_b0: int = 1, bval: float = DEFAULT_BVAL, seed: Optional[int] = None
) -> GradientTable:
    """Golden-spiral directions over the upper hemisphere, optionally randomly rotated"""
    if n_directions < 6:
        raise DataError(f"at least 6 diffusion directions are needed, got {n_directions}")
    if n_b0 < 1:
        raise DataError("at least one b0 volume is needed")
    k = np.arange(n_directions)
    z = 1.0 - (k + 0.5) / n_directions
    radius = np.sqrt(1.0 - z ** 2)
    directions = np.stack([radius * np.cos(k * GOLDEN_ANGLE), radius * np.sin(k * GOLDEN_ANGLE), z], axis=1)
    if seed is not None:
        directions = Rotation.random(None, seed).apply(directions)
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)

    bvals = np.concatenate([np.zeros(n_b0), np.full(n_directions, float(bval))])
    bvecs = np.concatenate([np.zeros((n_b0, 3)), directions])
    return GradientTable(bvals, bvecs)


def _grid(shape: Sequence[int]) -> np.ndarray:
    axes = [np.linspace(-1.0, 1.0, n) for n in shape]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def make_tensor_phantom(shape: Sequence[int] = (64, 64, 64), seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """(coefficients (X, Y, Z, 6) in mm^2/s, S0 (X, Y, Z)); S0 is zero outside the head"""
    rng = np.random.default_rng(seed)
    points = _grid(shape)
    head = (points ** 2).sum(axis=-1) <= 0.85 ** 2

    # smooth blobs modulate S0 and the isotropic diffusivity
    s0 = np.full(points.shape[:3], 0.6)
    diffusivity = np.full(points.shape[:3], TISSUE_MD)
    for _ in range(rng.integers(3, 6)):
        centre = rng.uniform(-0.5, 0.5, size=3)
        width = rng.uniform(0.15, 0.35)
        blob = np.exp(-((points - centre) ** 2).sum(axis=-1) / (2 * width ** 2))
        s0 += rng.uniform(0.1, 0.4) * blob
        diffusivity += rng.uniform(0.0, 1.0) * (FLUID_MD - TISSUE_MD) * blob
    diffusivity = np.minimum(diffusivity, FLUID_MD)
    tensors = diffusivity[..., None, None] * np.eye(3)

    # sharp-edged tracts whose principal direction bends along their length
    parallel, perpendicular, _ = TRACT_EIGENVALUES
    for _ in range(rng.integers(2, 4)):
        axis = _unit(rng.normal(size=3))
        bend = _unit(np.cross(axis, rng.normal(size=3)))
        centre = rng.uniform(-0.3, 0.3, size=3)
        radius = rng.uniform(0.1, 0.2)
        offset = points - centre
        along = offset @ axis
        distance = np.linalg.norm(offset - along[..., None] * axis, axis=-1)
        inside = (distance <= radius) & head

        direction = _unit(axis + 0.4 * np.sin(np.pi * along)[..., None] * bend)
        tract = perpendicular * np.eye(3) + (parallel - perpendicular) * direction[..., :, None] * direction[..., None, :]
        tensors[inside] = tract[inside]
        s0[inside] = 0.9

    s0 = np.where(head, s0 * S0_SCALE, 0.0)
    coefficients = np.where(head[..., None], tensors_to_coefficients(tensors), 0.0)
    return coefficients, s0


def synthesize_dwi(
    coefficients: np.ndarray,
    s0: np.ndarray,
    gradients: GradientTable,
    spacing: Sequence[float] = DEFAULT_SPACING,
) -> DwiStudy:
    signals = synthesize_signals(coefficients, s0, gradients).astype(np.float32)
    volumes = [Volume(np.ascontiguousarray(signals[..., i]), spacing) for i in range(signals.shape[-1])]
    return DwiStudy(volumes, gradients.bvals, gradients.bvecs)


def make_subject(shape: Sequence[int], seed: int, n_directions: int = 16) -> DwiStudy:
    coefficients, s0 = make_tensor_phantom(shape, seed)
    return synthesize_dwi(coefficients, s0, make_gradient_table(n_directions))


def write_subjects(
    output_dir: Path, subjects: int = 8, shape: Sequence[int] = (64, 64, 64), seed: int = 0, n_directions: int = 16
) -> List[Path]:
    """Write <sid>.nii.gz with .bval/.bvec sidecars for each synthetic subject"""
    output_dir = Path(output_dir)
    paths = []
    for index in range(subjects):
        subject_id = f"sub-{index + 1:03d}"
        study = make_subject(shape, seed + index, n_directions)
        paths.append(save_dwi_study(output_dir / f"{subject_id}.nii.gz", study))
        logger.info(f"Wrote phantom {subject_id} {tuple(shape)} with {len(study.volumes)} volumes")
    return paths
