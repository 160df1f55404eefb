"""Volumes, diffusion studies and their on-disk formats (NIfTI-1, FSL bval/bvec)."""
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import nibabel as nib
import numpy as np
from dipy.io import read_bvals_bvecs

from app.core.errors import DataError, ShapeError

logger = logging.getLogger(__name__)

# b-values at or below this count as b0 (s/mm^2)
B0_THRESHOLD = 50.0
BVEC_NORM_TOLERANCE = 1e-3
NIFTI_SUFFIXES = (".nii.gz", ".nii")


@dataclass(frozen=True)
class IntensityScale:
    """voxels_raw = voxels * scale + offset"""
    offset: float = 0.0
    scale: float = 1.0

    @property
    def is_identity(self) -> bool:
        return self.offset == 0.0 and self.scale == 1.0


@dataclass
class Volume:
    """A 3D scalar grid with voxel spacing (mm) and a 4x4 spatial affine"""
    voxels: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: Optional[np.ndarray] = None
    intensity_scale: IntensityScale = field(default_factory=IntensityScale)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3:
            raise ShapeError(f"volume must be 3D, got shape {self.voxels.shape}")
        if not np.issubdtype(self.voxels.dtype, np.floating):
            self.voxels = self.voxels.astype(np.float32)
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise DataError(f"spacing must be three positive values, got {self.spacing}")
        if self.affine is None:
            self.affine = np.diag([*self.spacing, 1.0])
        self.affine = np.asarray(self.affine, dtype=np.float64)
        if self.affine.shape != (4, 4) or abs(np.linalg.det(self.affine[:3, :3])) < 1e-12:
            raise DataError("affine must be an invertible 4x4 matrix")
        if not np.all(np.isfinite(self.voxels)):
            raise DataError("volume contains non-finite voxels")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.voxels.shape)

    def with_voxels(self, voxels: np.ndarray, **changes) -> "Volume":
        return replace(self, voxels=voxels, **changes)


@dataclass
class DwiStudy:
    """A 4D stack of volumes with its gradient table"""
    volumes: List[Volume]
    bvals: np.ndarray
    bvecs: np.ndarray

    def __post_init__(self):
        self.bvals = np.asarray(self.bvals, dtype=np.float64).reshape(-1)
        self.bvecs = np.asarray(self.bvecs, dtype=np.float64)
        if self.bvecs.shape == (3, len(self.bvals)) and len(self.bvals) != 3:
            self.bvecs = self.bvecs.T
        if not (len(self.volumes) == len(self.bvals) == len(self.bvecs)):
            raise DataError(
                f"{len(self.volumes)} volumes, {len(self.bvals)} b-values and {len(self.bvecs)} b-vectors"
            )
        if self.bvecs.ndim != 2 or self.bvecs.shape[1] != 3:
            raise DataError(f"b-vectors must be N x 3, got {self.bvecs.shape}")
        weighted = self.bvals > B0_THRESHOLD
        norms = np.linalg.norm(self.bvecs[weighted], axis=1)
        if np.any(np.abs(norms - 1.0) > BVEC_NORM_TOLERANCE):
            raise DataError("every diffusion-weighted b-vector must have unit norm")
        if not np.any(~weighted):
            raise DataError("study has no b0 volume")
        shapes = {v.shape for v in self.volumes}
        if len(shapes) != 1:
            raise ShapeError(f"study volumes differ in shape: {sorted(shapes)}")

    @property
    def b0_indices(self) -> np.ndarray:
        return np.flatnonzero(self.bvals <= B0_THRESHOLD)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.volumes[0].shape

    def stacked(self) -> np.ndarray:
        return np.stack([v.voxels for v in self.volumes], axis=-1)


# ============ NIfTI ============

def subject_id_from_path(path: Path) -> str:
    name = Path(path).name
    for suffix in NIFTI_SUFFIXES:
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return Path(path).stem


def find_nifti_files(directory: Path) -> List[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"not a directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.name.endswith(NIFTI_SUFFIXES))


def load_nifti(path: Path) -> List[Volume]:
    """Load a 3D or 4D NIfTI file as 32-bit float volumes"""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"NIfTI file not found: {path}")
    try:
        img = nib.load(str(path))
        data = np.asarray(img.dataobj, dtype=np.float32)
    except Exception as e:
        raise DataError(f"cannot read NIfTI file {path}: {e}") from e

    spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
    if data.ndim == 3:
        data = data[..., np.newaxis]
    if data.ndim != 4:
        raise ShapeError(f"{path} has {data.ndim} dimensions; expected 3 or 4")
    logger.debug(f"Loaded {path.name}: shape {data.shape}, spacing {spacing}")
    return [Volume(np.ascontiguousarray(data[..., i]), spacing, img.affine) for i in range(data.shape[-1])]


def load_volume(path: Path) -> Volume:
    volumes = load_nifti(path)
    if len(volumes) != 1:
        raise ShapeError(f"{path} holds {len(volumes)} volumes; expected one")
    return volumes[0]


def save_nifti(path: Path, volumes: Sequence[Volume]) -> Path:
    """Write one volume as 3D or several as 4D, float32, with the first volume's affine"""
    if not volumes:
        raise DataError(f"nothing to write to {path}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.stack([np.asarray(v.voxels, dtype=np.float32) for v in volumes], axis=-1)
    if data.shape[-1] == 1:
        data = data[..., 0]
    img = nib.Nifti1Image(data, volumes[0].affine)
    img.header.set_zooms(tuple(volumes[0].spacing) + (1.0,) * (data.ndim - 3))
    img.header.set_data_dtype(np.float32)
    nib.save(img, str(path))
    return path


def save_volume(path: Path, volume: Volume) -> Path:
    return save_nifti(path, [volume])


# ============ Gradient tables ============

def read_gradients(
    bval_path: Optional[Path], bvec_path: Optional[Path]
) -> Tuple[Optional[np.ndarray], Optional[np.ndarray]]:
    """FSL bval/bvec files; b-vectors come back as N x 3 in either file layout"""
    names = [None if p is None else str(p) for p in (bval_path, bvec_path)]
    try:
        bvals, bvecs = read_bvals_bvecs(*names)
    except (OSError, ValueError) as e:
        shown = ", ".join(n for n in names if n)
        raise DataError(f"cannot read gradient table from {shown}: {e}") from e
    if bvals is not None:
        bvals = np.asarray(bvals, dtype=np.float64).reshape(-1)
    if bvecs is not None:
        bvecs = np.atleast_2d(np.asarray(bvecs, dtype=np.float64))
        if bvecs.shape[1] != 3:
            raise DataError(f"{bvec_path} must have three rows of b-vector components, got {bvecs.shape}")
    return bvals, bvecs


def read_bvals(path: Path) -> np.ndarray:
    return read_gradients(path, None)[0]


def read_bvecs(path: Path) -> np.ndarray:
    return read_gradients(None, path)[1]


def _format_row(values: np.ndarray) -> str:
    return " ".join(np.format_float_positional(float(v), trim="-") for v in values)


def write_bvals(path: Path, bvals: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_format_row(np.asarray(bvals).reshape(-1)) + "\n", encoding="utf-8")
    return path


def write_bvecs(path: Path, bvecs: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = np.asarray(bvecs, dtype=np.float64).T
    path.write_text("".join(_format_row(row) + "\n" for row in rows), encoding="utf-8")
    return path


def gradient_paths(nifti_path: Path) -> Tuple[Path, Path]:
    """Sidecar bval/bvec paths next to a NIfTI file"""
    nifti_path = Path(nifti_path)
    stem = subject_id_from_path(nifti_path)
    return nifti_path.with_name(f"{stem}.bval"), nifti_path.with_name(f"{stem}.bvec")


def load_dwi_study(nifti_path: Path, bval_path: Optional[Path] = None, bvec_path: Optional[Path] = None) -> DwiStudy:
    default_bval, default_bvec = gradient_paths(nifti_path)
    volumes = load_nifti(nifti_path)
    bvals, bvecs = read_gradients(bval_path or default_bval, bvec_path or default_bvec)
    return DwiStudy(volumes, bvals, bvecs)


def save_dwi_study(nifti_path: Path, study: DwiStudy) -> Path:
    save_nifti(nifti_path, study.volumes)
    bval_path, bvec_path = gradient_paths(nifti_path)
    write_bvals(bval_path, study.bvals)
    write_bvecs(bvec_path, study.bvecs)
    return Path(nifti_path)
