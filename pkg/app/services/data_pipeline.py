"""Low-resolution simulation, sinc re-interpolation, normalization, patches and splits.

Both resampling directions work in the Fourier domain: downsampling keeps
the central band of the spectrum and decimates, upsampling zero-pads the
spectrum. Each is applied separably along the three axes with
``scipy.signal.resample``, which rescales so constants are preserved.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy import signal

from app.core.errors import CoverageError, DataError, ShapeError
from app.storage.volumes import (
    DwiStudy,
    IntensityScale,
    Volume,
    find_nifti_files,
    load_dwi_study,
    save_dwi_study,
    subject_id_from_path,
)

logger = logging.getLogger(__name__)

DEFAULT_PATCH_SIZE = (96, 96, 48)
DEFAULT_OVERLAP = (16, 16, 8)
SPLIT_NAMES = ("train", "validation", "test")


# ============ Resampling ============

def _fourier_resample(voxels: np.ndarray, target: Sequence[int]) -> np.ndarray:
    out = np.asarray(voxels, dtype=np.float64)
    for axis, size in enumerate(target):
        if out.shape[axis] != size:
            out = signal.resample(out, size, axis=axis)
    return out


def scaled_affine(affine: np.ndarray, factors: Sequence[float]) -> np.ndarray:
    """Scale voxel axes while keeping voxel (0, 0, 0) in place"""
    scaled = np.array(affine, dtype=np.float64)
    scaled[:3, :3] = scaled[:3, :3] * np.asarray(factors, dtype=np.float64)[np.newaxis, :]
    return scaled


def simulate_lowres(hr: Volume, factor: int) -> Volume:
    """Ideal low-pass and decimate by `factor` along every axis"""
    if factor < 2:
        raise DataError(f"downsampling factor must be >= 2, got {factor}")
    if any(size < factor for size in hr.shape):
        raise ShapeError(f"volume of shape {hr.shape} is too small for factor {factor}")

    target = tuple(math.ceil(size / factor) for size in hr.shape)
    voxels = _fourier_resample(hr.voxels, target).astype(hr.voxels.dtype, copy=False)
    return Volume(
        voxels,
        spacing=tuple(s * factor for s in hr.spacing),
        affine=scaled_affine(hr.affine, (factor,) * 3),
        intensity_scale=hr.intensity_scale,
    )


def upsampling_factors(lr_dims: Sequence[int], target_dims: Sequence[int]) -> Tuple[int, int, int]:
    """Integer factor f per axis with ceil(target / f) == lr"""
    if len(lr_dims) != 3 or len(target_dims) != 3:
        raise ShapeError(f"expected 3D dims, got {tuple(lr_dims)} -> {tuple(target_dims)}")
    factors = []
    for axis, (lr, target) in enumerate(zip(lr_dims, target_dims)):
        if target < lr:
            raise ShapeError(f"axis {axis}: target {target} is smaller than source {lr}")
        candidates = [f for f in range(1, target + 1) if math.ceil(target / f) == lr]
        if not candidates:
            raise ShapeError(f"axis {axis}: {target} is not an integer multiple of {lr} within rounding")
        factors.append(candidates[0])
    return tuple(factors)


def sinc_upsample(lr: Volume, target_dims: Sequence[int]) -> Volume:
    """Band-limited interpolation onto the high-resolution grid by spectral zero-padding"""
    target_dims = tuple(int(s) for s in target_dims)
    factors = upsampling_factors(lr.shape, target_dims)
    voxels = _fourier_resample(lr.voxels, target_dims).astype(lr.voxels.dtype, copy=False)
    return Volume(
        voxels,
        spacing=tuple(s / f for s, f in zip(lr.spacing, factors)),
        affine=scaled_affine(lr.affine, [1.0 / f for f in factors]),
        intensity_scale=lr.intensity_scale,
    )


# ============ Intensity normalization ============

def normalize(volume: Volume, scale: Optional[IntensityScale] = None) -> Volume:
    """Min-max scale to [0, 1]; constant volumes map to zero.

    With `scale` given, those parameters are applied instead of the volume's own.
    """
    voxels = volume.voxels
    if scale is None:
        lo, hi = float(voxels.min()), float(voxels.max())
        scale = IntensityScale(offset=lo, scale=hi - lo if hi > lo else 1.0)
    normalized = ((voxels - scale.offset) / scale.scale).astype(voxels.dtype, copy=False)
    return volume.with_voxels(normalized, intensity_scale=scale)


def denormalize(volume: Volume) -> Volume:
    scale = volume.intensity_scale
    voxels = (volume.voxels * scale.scale + scale.offset).astype(volume.voxels.dtype, copy=False)
    return volume.with_voxels(voxels, intensity_scale=IntensityScale())


# ============ Patches ============

@dataclass
class PatchSample:
    """A (1, 1, h, w, d) crop of a volume and where it came from"""
    data: torch.Tensor
    origin: Tuple[int, int, int]
    subject_id: str = ""
    direction_index: int = 0

    @property
    def size(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape[2:])


def pad_to_patch(voxels: np.ndarray, size: Sequence[int]) -> np.ndarray:
    """Edge-replicate at the far end of each axis up to at least `size`"""
    pad = [(0, max(0, int(p) - s)) for p, s in zip(size, voxels.shape)]
    if not any(after for _, after in pad):
        return voxels
    return np.pad(voxels, pad, mode="edge")


def sample_origins(
    dims: Sequence[int], size: Sequence[int], count: int, rng: np.random.Generator
) -> np.ndarray:
    """`count` uniformly random in-bounds origins, shape (count, 3)"""
    highs = [d - s + 1 for d, s in zip(dims, size)]
    if any(h < 1 for h in highs):
        raise ShapeError(f"patch {tuple(size)} does not fit in {tuple(dims)}")
    return np.stack([rng.integers(0, h, size=count) for h in highs], axis=1)


def crop(voxels: np.ndarray, origin: Sequence[int], size: Sequence[int]) -> np.ndarray:
    x, y, z = (int(o) for o in origin)
    return voxels[x : x + size[0], y : y + size[1], z : z + size[2]]


def extract_patches(
    volume: Volume,
    size: Sequence[int] = DEFAULT_PATCH_SIZE,
    n_per_volume: int = 8,
    seed: int = 0,
    subject_id: str = "",
    direction_index: int = 0,
) -> List[PatchSample]:
    """Uniformly random patches of the edge-padded volume, reproducible from seed"""
    size = tuple(int(s) for s in size)
    padded = pad_to_patch(volume.voxels, size)
    origins = sample_origins(padded.shape, size, n_per_volume, np.random.default_rng(seed))
    return [
        PatchSample(
            data=torch.from_numpy(np.ascontiguousarray(crop(padded, origin, size)))[None, None],
            origin=tuple(int(o) for o in origin),
            subject_id=subject_id,
            direction_index=direction_index,
        )
        for origin in origins
    ]


def tile_origins(
    dims: Sequence[int], size: Sequence[int] = DEFAULT_PATCH_SIZE, overlap: Sequence[int] = DEFAULT_OVERLAP
) -> List[Tuple[int, int, int]]:
    """Regular tiling with stride size - overlap; the last tile on each axis ends at the border"""
    per_axis = []
    for axis, (d, s, o) in enumerate(zip(dims, size, overlap)):
        if s > d:
            raise ShapeError(f"axis {axis}: patch size {s} exceeds volume size {d}; pad first")
        stride = s - o
        if stride < 1:
            raise ShapeError(f"axis {axis}: overlap {o} must be smaller than patch size {s}")
        starts = list(range(0, d - s + 1, stride))
        if starts[-1] != d - s:
            starts.append(d - s)
        per_axis.append(starts)
    return [(x, y, z) for x in per_axis[0] for y in per_axis[1] for z in per_axis[2]]


def aggregate_patches(
    patches: Iterable[Tuple[PatchSample, np.ndarray]],
    target_dims: Sequence[int],
    reference: Optional[Volume] = None,
) -> Volume:
    """Average overlapping patch outputs with uniform weights.

    Outputs extending past `target_dims` (padded borders) are cropped.
    """
    target_dims = tuple(int(d) for d in target_dims)
    total = np.zeros(target_dims, dtype=np.float64)
    count = np.zeros(target_dims, dtype=np.int64)
    for sample, output in patches:
        output = np.asarray(output)
        output = output.reshape(output.shape[-3:])
        window = tuple(
            slice(o, min(o + s, d)) for o, s, d in zip(sample.origin, output.shape, target_dims)
        )
        clipped = output[tuple(slice(0, w.stop - w.start) for w in window)]
        total[window] += clipped
        count[window] += 1

    if np.any(count == 0):
        uncovered = np.argwhere(count == 0)
        lo, hi = uncovered.min(axis=0), uncovered.max(axis=0)
        raise CoverageError(
            f"{len(uncovered)} voxels uncovered, region {tuple(int(v) for v in lo)} to {tuple(int(v) for v in hi)}"
        )

    voxels = (total / count).astype(np.float32)
    if reference is None:
        return Volume(voxels)
    return Volume(voxels, reference.spacing, reference.affine, reference.intensity_scale)


# ============ Dataset splits ============

@dataclass
class SplitManifest:
    train: List[str] = field(default_factory=list)
    validation: List[str] = field(default_factory=list)
    test: List[str] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        seen = set()
        for name in SPLIT_NAMES:
            ids = getattr(self, name)
            overlap = seen.intersection(ids)
            if overlap or len(set(ids)) != len(ids):
                raise DataError(f"subject ids appear more than once: {sorted(overlap) or ids}")
            seen.update(ids)

    @property
    def all_subjects(self) -> List[str]:
        return [*self.train, *self.validation, *self.test]

    def to_text(self) -> str:
        lines = []
        for name in SPLIT_NAMES:
            lines.append(f"[{name}] seed={self.seed}")
            lines.extend(getattr(self, name))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SplitManifest":
        sections = {name: [] for name in SPLIT_NAMES}
        seed = 0
        current = None
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("["):
                header, _, rest = line.partition("]")
                current = header[1:]
                if current not in sections:
                    raise DataError(f"unknown manifest section {current!r}")
                if rest.strip().startswith("seed="):
                    seed = int(rest.strip()[len("seed="):])
                continue
            if current is None:
                raise DataError("subject id before the first manifest section")
            sections[current].append(line)
        return cls(seed=seed, **sections)

    def save(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Path) -> "SplitManifest":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"split manifest not found: {path}")
        return cls.from_text(path.read_text(encoding="utf-8"))


def default_split_counts(n: int) -> Tuple[int, int, int]:
    """Train/validation/test counts in the 300/50/49 proportion, at least one each when n >= 3"""
    if n < 3:
        return n, 0, 0
    validation = max(1, round(n * 50 / 399))
    test = max(1, round(n * 49 / 399))
    return n - validation - test, validation, test


def split_dataset(subject_ids: Sequence[str], counts: Sequence[int], seed: int = 0) -> SplitManifest:
    """Deterministic seeded shuffle of the sorted ids into train/validation/test"""
    counts = tuple(int(c) for c in counts)
    if len(counts) != 3 or any(c < 0 for c in counts):
        raise DataError(f"counts must be three non-negative integers, got {counts}")
    if sum(counts) != len(subject_ids):
        raise DataError(f"counts {counts} sum to {sum(counts)} but there are {len(subject_ids)} subjects")

    ids = sorted(subject_ids)
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_train, n_val, _ = counts
    return SplitManifest(
        train=shuffled[:n_train],
        validation=shuffled[n_train : n_train + n_val],
        test=shuffled[n_train + n_val :],
        seed=seed,
    )


# ============ Prepared dataset layout ============

HR_DIR = "hr"
LR_DIR = "lr"
INTERP_DIR = "interp"
MANIFEST_NAME = "splits.txt"


@dataclass
class PreparedSubject:
    subject_id: str
    hr_path: Path
    lr_path: Path
    interp_path: Path


def prepared_paths(root: Path, subject_id: str) -> PreparedSubject:
    root = Path(root)
    name = f"{subject_id}.nii.gz"
    return PreparedSubject(subject_id, root / HR_DIR / name, root / LR_DIR / name, root / INTERP_DIR / name)


def prepare_subject(nifti_path: Path, output_dir: Path, factor: int = 2) -> PreparedSubject:
    """Write the high-resolution study, its low-resolution simulation and the sinc re-interpolation"""
    subject_id = subject_id_from_path(nifti_path)
    study = load_dwi_study(nifti_path)
    lowres = [simulate_lowres(volume, factor) for volume in study.volumes]
    interp = [sinc_upsample(volume, study.shape) for volume in lowres]

    paths = prepared_paths(output_dir, subject_id)
    save_dwi_study(paths.hr_path, study)
    save_dwi_study(paths.lr_path, DwiStudy(lowres, study.bvals, study.bvecs))
    save_dwi_study(paths.interp_path, DwiStudy(interp, study.bvals, study.bvecs))
    logger.info(f"Prepared {subject_id}: {study.shape} -> {lowres[0].shape}, {len(study.volumes)} volumes")
    return paths


def prepare_dataset(
    input_dir: Path,
    output_dir: Path,
    factor: int = 2,
    seed: int = 0,
    counts: Optional[Sequence[int]] = None,
) -> SplitManifest:
    """Prepare every study under input_dir and persist the split manifest"""
    sources = find_nifti_files(input_dir)
    if not sources:
        raise DataError(f"no NIfTI files under {input_dir}")
    subject_ids = [subject_id_from_path(p) for p in sources]
    counts = tuple(counts) if counts is not None else default_split_counts(len(subject_ids))
    # validated before anything is written
    manifest = split_dataset(subject_ids, counts, seed)

    for source in sources:
        prepare_subject(source, output_dir, factor)
    manifest.save(Path(output_dir) / MANIFEST_NAME)
    logger.info(
        f"Split {len(subject_ids)} subjects: {len(manifest.train)} train, "
        f"{len(manifest.validation)} validation, {len(manifest.test)} test"
    )
    return manifest
