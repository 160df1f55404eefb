"""Diffusion tensor fit and the derived AD, FA, MD and E1..E6 maps.

Per voxel, ln S_i = ln S0 - b_i g_i^T D g_i is solved by ordinary least squares
against dipy's tensor design matrix. E1..E6 are the raw coefficients
Dxx, Dxy, Dxz, Dyy, Dyz, Dzz; AD/MD/FA use eigenvalues clamped at zero.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from dipy.core.gradients import GradientTable as DipyGradientTable
from dipy.core.gradients import gradient_table
from dipy.reconst import dti

from app.core.errors import DataError, NumericalError, ShapeError
from app.core.schemas import MetricRow
from app.services.metrics_service import rmse, uqi
from app.storage.volumes import B0_THRESHOLD, DwiStudy, Volume, load_volume, save_volume

logger = logging.getLogger(__name__)

MIN_SIGNAL = 1e-8
BACKGROUND_FRACTION = 1e-6
N_UNKNOWNS = 7
COMPONENT_NAMES = ("E1", "E2", "E3", "E4", "E5", "E6")
SCALAR_NAMES = ("AD", "FA", "MD")
MAP_NAMES = SCALAR_NAMES + COMPONENT_NAMES
# (row, col) of each coefficient in the symmetric tensor
COMPONENT_INDEX = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))


@dataclass
class GradientTable:
    bvals: np.ndarray
    bvecs: np.ndarray
    gtab: DipyGradientTable = field(init=False, repr=False)

    def __post_init__(self):
        self.bvals = np.asarray(self.bvals, dtype=np.float64).reshape(-1)
        self.bvecs = np.asarray(self.bvecs, dtype=np.float64)
        if self.bvecs.shape != (len(self.bvals), 3):
            raise DataError(f"{len(self.bvals)} b-values but b-vectors of shape {self.bvecs.shape}")
        try:
            self.gtab = gradient_table(self.bvals, bvecs=self.bvecs, b0_threshold=B0_THRESHOLD)
        except ValueError as e:
            raise DataError(f"invalid gradient table: {e}") from e

    @classmethod
    def from_study(cls, study: DwiStudy) -> "GradientTable":
        return cls(study.bvals, study.bvecs)

    @property
    def b0_indices(self) -> np.ndarray:
        return np.flatnonzero(self.gtab.b0s_mask)

    def __len__(self) -> int:
        return len(self.bvals)

    def design_matrix(self) -> np.ndarray:
        """dipy layout: rows [-b gx^2, -2b gx gy, -b gy^2, -2b gx gz, -2b gy gz, -b gz^2, -1]"""
        return dti.design_matrix(self.gtab)

    def checked_design_matrix(self) -> Tuple[np.ndarray, float]:
        if len(self) < N_UNKNOWNS:
            raise DataError(f"tensor fit needs at least {N_UNKNOWNS} measurements, got {len(self)}")
        design = self.design_matrix()
        if np.linalg.matrix_rank(design) < N_UNKNOWNS:
            directions = np.round(self.bvecs[~self.gtab.b0s_mask], 4).tolist()
            raise NumericalError(f"singular tensor design matrix; weighted directions {directions}")
        return design, float(np.linalg.cond(design))


@dataclass
class TensorField:
    """Per-voxel tensor fit on a (X, Y, Z) grid"""
    coefficients: np.ndarray    # (X, Y, Z, 6) Dxx, Dxy, Dxz, Dyy, Dyz, Dzz
    s0: np.ndarray              # (X, Y, Z)
    eigenvalues: np.ndarray     # (X, Y, Z, 3) descending, clamped at zero
    eigenvectors: np.ndarray    # (X, Y, Z, 3, 3) columns match eigenvalues
    clamped: np.ndarray         # voxels with a negative fitted eigenvalue
    background: np.ndarray
    condition_number: float
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: Optional[np.ndarray] = None

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.s0.shape)

    def tensors(self) -> np.ndarray:
        return coefficients_to_tensors(self.coefficients)

    def volume(self, voxels: np.ndarray) -> Volume:
        return Volume(voxels.astype(np.float32), self.spacing, self.affine)


def coefficients_to_tensors(coefficients: np.ndarray) -> np.ndarray:
    """(..., 6) coefficients -> (..., 3, 3) symmetric tensors"""
    coefficients = np.asarray(coefficients, dtype=np.float64)
    tensors = np.empty(coefficients.shape[:-1] + (3, 3), dtype=np.float64)
    for k, (i, j) in enumerate(COMPONENT_INDEX):
        tensors[..., i, j] = coefficients[..., k]
        tensors[..., j, i] = coefficients[..., k]
    return tensors


def tensors_to_coefficients(tensors: np.ndarray) -> np.ndarray:
    tensors = np.asarray(tensors, dtype=np.float64)
    return np.stack([tensors[..., i, j] for i, j in COMPONENT_INDEX], axis=-1)


def synthesize_signals(coefficients: np.ndarray, s0: np.ndarray, gradients: GradientTable) -> np.ndarray:
    """Noiseless S_i = S0 exp(-b_i g_i^T D g_i), shape (..., N)"""
    lower = dti.lower_triangular(coefficients_to_tensors(coefficients))
    # the design matrix without its S0 column maps dipy's lower triangle to -b g^T D g
    exponent = lower @ gradients.design_matrix()[:, :6].T
    return np.asarray(s0, dtype=np.float64)[..., None] * np.exp(exponent)


def fit_tensor(
    study: DwiStudy,
    gradients: Optional[GradientTable] = None,
    min_signal: float = MIN_SIGNAL,
    background_fraction: float = BACKGROUND_FRACTION,
) -> TensorField:
    gradients = gradients or GradientTable.from_study(study)
    signals = study.stacked().astype(np.float64)
    return fit_signals(signals, gradients, min_signal, background_fraction, study.volumes[0].spacing, study.volumes[0].affine)


def fit_signals(
    signals: np.ndarray,
    gradients: GradientTable,
    min_signal: float = MIN_SIGNAL,
    background_fraction: float = BACKGROUND_FRACTION,
    spacing: Sequence[float] = (1.0, 1.0, 1.0),
    affine: Optional[np.ndarray] = None,
) -> TensorField:
    """Log-linear least-squares fit of (X, Y, Z, N) signals"""
    signals = np.asarray(signals, dtype=np.float64)
    if signals.ndim != 4 or signals.shape[-1] != len(gradients):
        raise ShapeError(f"signals of shape {signals.shape} do not match {len(gradients)} gradient entries")
    if len(gradients.b0_indices) == 0:
        raise DataError("tensor fit needs at least one b0 measurement")
    design, condition = gradients.checked_design_matrix()
    logger.info(f"Tensor design matrix: {len(gradients)} measurements, condition number {condition:.3g}")

    grid = signals.shape[:3]
    b0 = signals[..., gradients.b0_indices].mean(axis=-1)
    peak = float(b0.max())
    background = b0 <= background_fraction * peak if peak > 0 else np.ones(grid, dtype=bool)

    log_signals = np.log(np.maximum(signals, min_signal)).reshape(-1, len(gradients))
    solution, *_ = np.linalg.lstsq(design, log_signals.T, rcond=None)
    solution = solution.T.reshape(grid + (N_UNKNOWNS,))
    solution[background] = 0.0

    tensors = dti.from_lower_triangular(solution[..., :6])
    # the last design column is a constant whose sign relates the solution to ln S0
    s0 = np.where(background, 0.0, np.exp(solution[..., 6] * design[0, 6]))
    clamped = np.linalg.eigvalsh(tensors).min(axis=-1) < 0
    if clamped.any():
        logger.debug(f"{int(clamped.sum())} voxels have negative eigenvalues; clamped for scalar maps")
    evals, evecs = dti.decompose_tensor(tensors, min_diffusivity=0)

    return TensorField(
        coefficients=tensors_to_coefficients(tensors),
        s0=s0,
        eigenvalues=np.ascontiguousarray(evals),
        eigenvectors=np.ascontiguousarray(evecs),
        clamped=clamped,
        background=background,
        condition_number=condition,
        spacing=tuple(spacing),
        affine=affine,
    )


def scalar_invariants(eigenvalues: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """AD, MD, FA of (..., 3) descending eigenvalues, negatives clamped to zero"""
    lam = np.maximum(np.asarray(eigenvalues, dtype=np.float64), 0.0)
    fa = np.nan_to_num(dti.fractional_anisotropy(lam), nan=0.0)
    return dti.axial_diffusivity(lam), dti.mean_diffusivity(lam), np.clip(fa, 0.0, 1.0)


def scalar_maps(tf: TensorField) -> Tuple[Volume, Volume, Volume]:
    """(AD, MD, FA) volumes"""
    ad, md, fa = scalar_invariants(tf.eigenvalues)
    return tf.volume(ad), tf.volume(md), tf.volume(fa)


def tensor_components(tf: TensorField) -> List[Volume]:
    """E1..E6 = Dxx, Dxy, Dxz, Dyy, Dyz, Dzz"""
    return [tf.volume(tf.coefficients[..., k]) for k in range(len(COMPONENT_NAMES))]


def derived_maps(tf: TensorField) -> Dict[str, Volume]:
    ad, md, fa = scalar_maps(tf)
    maps = {"AD": ad, "FA": fa, "MD": md}
    maps.update(zip(COMPONENT_NAMES, tensor_components(tf)))
    return maps


def compare_maps(
    reference: Dict[str, Volume], candidate: Dict[str, Volume], subject: str = "", method: str = ""
) -> List[MetricRow]:
    """RMSE and UQI per derived map; metric names like `fa_rmse`"""
    rows = []
    for name in MAP_NAMES:
        if name not in reference or name not in candidate:
            raise DataError(f"derived map {name} missing for {subject or 'comparison'}")
        ref, cand = reference[name], candidate[name]
        if ref.shape != cand.shape:
            raise ShapeError(f"{name}: reference grid {ref.shape} vs candidate grid {cand.shape}")
        rows.append(MetricRow(subject=subject, method=method, metric=f"{name.lower()}_rmse", value=rmse(ref, cand)))
        rows.append(MetricRow(subject=subject, method=method, metric=f"{name.lower()}_uqi", value=uqi(ref, cand)))
    return rows


def compare_derived(reference: TensorField, candidate: TensorField, subject: str = "", method: str = "") -> List[MetricRow]:
    if reference.shape != candidate.shape:
        raise ShapeError(f"tensor fields on different grids: {reference.shape} vs {candidate.shape}")
    return compare_maps(derived_maps(reference), derived_maps(candidate), subject, method)


def map_path(directory: Path, subject_id: str, name: str) -> Path:
    return Path(directory) / f"{subject_id}_{name}.nii.gz"


def save_maps(directory: Path, subject_id: str, maps: Dict[str, Volume]) -> List[Path]:
    return [save_volume(map_path(directory, subject_id, name), volume) for name, volume in maps.items()]


def load_maps(directory: Path, subject_id: str) -> Dict[str, Volume]:
    return {name: load_volume(map_path(directory, subject_id, name)) for name in MAP_NAMES}
