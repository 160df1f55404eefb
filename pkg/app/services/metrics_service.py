"""Full-reference image quality metrics and the per-subject metric report."""
import csv
import logging
from collections import defaultdict
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from skimage.metrics import structural_similarity

from app.core.errors import DataError, ShapeError
from app.core.schemas import MetricRow, MetricSummary
from app.storage.volumes import Volume

logger = logging.getLogger(__name__)

SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
# Gaussian window truncated at 3.5 sigma -> 11 voxels
SSIM_WINDOW = 11
UQI_WINDOW = 8
IMAGE_METRICS = ("ssim", "rmse", "uqi")
REPORT_COLUMNS = ("subject", "method", "metric", "value")


def _as_array(volume) -> np.ndarray:
    voxels = volume.voxels if isinstance(volume, Volume) else volume
    return np.asarray(voxels, dtype=np.float64)


def _pair(a, b, min_size: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ShapeError(f"volumes differ in shape: {a.shape} vs {b.shape}")
    if a.ndim != 3 or any(size < min_size for size in a.shape):
        raise ShapeError(f"expected a 3D volume with every dim >= {min_size}, got {a.shape}")
    return a, b


def _mask(mask, shape) -> Optional[np.ndarray]:
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise ShapeError(f"mask shape {mask.shape} does not match volume shape {shape}")
    if not mask.any():
        raise DataError("mask selects no voxels")
    return mask


def rmse(a, b, mask=None) -> float:
    a, b = _pair(a, b)
    mask = _mask(mask, a.shape)
    diff = a - b if mask is None else (a - b)[mask]
    return float(np.sqrt(np.mean(diff ** 2)))


def default_data_range(reference: np.ndarray) -> float:
    span = float(reference.max() - reference.min())
    return span if span > 0 else 1.0


def ssim(a, b, data_range: Optional[float] = None, mask=None) -> float:
    """Mean local SSIM with a 3D Gaussian window (sigma 1.5), 5-voxel border excluded.

    `data_range` defaults to the span of `a`; pass it explicitly for a symmetric metric.
    """
    a, b = _pair(a, b, SSIM_WINDOW)
    mask = _mask(mask, a.shape)
    data_range = default_data_range(a) if data_range is None else float(data_range)
    mean, ssim_map = structural_similarity(
        a,
        b,
        data_range=data_range,
        gaussian_weights=True,
        sigma=SSIM_SIGMA,
        use_sample_covariance=False,
        K1=SSIM_K1,
        K2=SSIM_K2,
        full=True,
    )
    if mask is None:
        return float(mean)
    pad = (SSIM_WINDOW - 1) // 2
    inner = (slice(pad, -pad),) * 3
    selected = mask[inner]
    if not selected.any():
        raise DataError("mask selects no voxels away from the volume border")
    return float(ssim_map[inner][selected].mean())


def uqi_map(a, b, window: int = UQI_WINDOW) -> np.ndarray:
    """Per-window quality index over every window x window x window block, stride 1.

    Q = correlation * luminance * contrast. Two flat windows score 1 when they
    hold the same value and are skipped (NaN) otherwise. Zero means on both
    windows give luminance 1; a flat window against a structured one has
    correlation 0.
    """
    a, b = _pair(a, b, window)
    shape = tuple(size - window + 1 for size in a.shape)
    quality = np.empty(shape, dtype=np.float64)
    axes = (-3, -2, -1)
    a_windows = sliding_window_view(a, (window,) * 3)
    b_windows = sliding_window_view(b, (window,) * 3)

    # one slab at a time bounds memory
    for i in range(shape[0]):
        wa, wb = a_windows[i], b_windows[i]
        ma, mb = wa.mean(axis=axes), wb.mean(axis=axes)
        da, db = wa - ma[..., None, None, None], wb - mb[..., None, None, None]
        flat_a = np.ptp(wa, axis=axes) == 0
        flat_b = np.ptp(wb, axis=axes) == 0
        # rounding in the mean must not give flat windows a variance
        va = np.where(flat_a, 0.0, (da ** 2).mean(axis=axes))
        vb = np.where(flat_b, 0.0, (db ** 2).mean(axis=axes))
        cov = np.where(flat_a | flat_b, 0.0, (da * db).mean(axis=axes))

        with np.errstate(divide="ignore", invalid="ignore"):
            spread = np.sqrt(va * vb)
            correlation = np.where(spread > 0, cov / spread, 0.0)
            correlation = np.clip(correlation, -1.0, 1.0)

            power = ma ** 2 + mb ** 2
            luminance = np.where(power > 0, 2 * ma * mb / power, 1.0)

            total = va + vb
            contrast = np.where(total > 0, 2 * spread / total, 1.0)

        both_flat = flat_a & flat_b
        same = wa[..., 0, 0, 0] == wb[..., 0, 0, 0]
        quality[i] = np.where(both_flat, np.where(same, 1.0, np.nan), correlation * luminance * contrast)
    return quality


def uqi(a, b, window: int = UQI_WINDOW, mask=None) -> float:
    """Mean quality index over the windows that are not skipped.

    With a mask, only windows lying entirely inside it count.
    """
    quality = uqi_map(a, b, window)
    shape = _as_array(a).shape
    mask = _mask(mask, shape)
    if mask is not None:
        inside = sliding_window_view(mask, (window,) * 3).all(axis=(-3, -2, -1))
        if not inside.any():
            raise DataError(f"mask contains no complete {window}^3 window")
        quality = quality[inside]
    defined = quality[~np.isnan(quality)]
    if defined.size == 0:
        raise DataError("quality index undefined: every window pairs two flat blocks of different value")
    return float(defined.mean())


METRIC_FUNCTIONS = {"ssim": ssim, "rmse": rmse, "uqi": uqi}


def parse_metric_names(text: str) -> List[str]:
    names = [name.strip().lower() for name in text.split(",") if name.strip()]
    unknown = [name for name in names if name not in METRIC_FUNCTIONS]
    if unknown or not names:
        raise DataError(f"unknown metrics {unknown}; choose from {', '.join(IMAGE_METRICS)}")
    return names


def evaluate_volumes(
    reference: Volume,
    candidate: Volume,
    subject: str,
    method: str,
    metrics: Sequence[str] = IMAGE_METRICS,
) -> List[MetricRow]:
    """Metrics on intensities scaled by the reference's min-max range (declared data range 1)"""
    ref, cand = _pair(reference, candidate)
    lo = float(ref.min())
    span = default_data_range(ref)
    ref, cand = (ref - lo) / span, (cand - lo) / span

    rows = []
    for name in metrics:
        if name == "ssim":
            value = ssim(ref, cand, data_range=1.0)
        else:
            value = METRIC_FUNCTIONS[name](ref, cand)
        rows.append(MetricRow(subject=subject, method=method, metric=name, value=value))
    return rows


def evaluate_studies(
    references: Sequence[Volume],
    candidates: Sequence[Volume],
    subject: str,
    method: str,
    metrics: Sequence[str] = IMAGE_METRICS,
) -> List[MetricRow]:
    """Per-volume metrics averaged over the volumes of one subject"""
    if len(references) != len(candidates):
        raise ShapeError(f"{subject}: {len(references)} reference volumes vs {len(candidates)} predicted")
    values: Dict[str, List[float]] = defaultdict(list)
    for reference, candidate in zip(references, candidates):
        for row in evaluate_volumes(reference, candidate, subject, method, metrics):
            values[row.metric].append(row.value)
    return [MetricRow(subject=subject, method=method, metric=name, value=float(np.mean(values[name]))) for name in metrics]


# ============ Report ============

def summarize(rows: Iterable[MetricRow]) -> List[MetricSummary]:
    """Mean and population std per (method, metric), sorted by method then metric"""
    groups: Dict[Tuple[str, str], List[float]] = defaultdict(list)
    for row in rows:
        groups[(row.method, row.metric)].append(row.value)
    return [
        MetricSummary(method=method, metric=metric, mean=float(np.mean(values)), std=float(np.std(values)), n=len(values))
        for (method, metric), values in sorted(groups.items())
    ]


def write_report(path: Path, rows: Iterable[MetricRow], append: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_header = not (append and path.exists())
    with path.open("a" if append else "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        if write_header:
            writer.writerow(REPORT_COLUMNS)
        for row in rows:
            writer.writerow([row.subject, row.method, row.metric, repr(float(row.value))])
    return path


def read_report(path: Path) -> List[MetricRow]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"metric report not found: {path}")
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
            raise DataError(f"{path}: expected columns {', '.join(REPORT_COLUMNS)}, got {reader.fieldnames}")
        try:
            return [MetricRow(**record) for record in reader]
        except ValueError as e:
            raise DataError(f"{path}: malformed row: {e}") from e
