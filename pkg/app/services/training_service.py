"""Patch-based supervised training, validation and tiled inference."""
import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.data import DataLoader, Dataset

from app.core.errors import ConfigurationError, DataError, NumericalError, ShapeError
from app.core.schemas import ModelConfig, TrainConfig
from app.core.settings import Settings
from app.services.data_pipeline import (
    DEFAULT_OVERLAP,
    MANIFEST_NAME,
    PatchSample,
    SplitManifest,
    aggregate_patches,
    crop,
    denormalize,
    normalize,
    pad_to_patch,
    prepared_paths,
    sample_origins,
    tile_origins,
)
from app.storage.checkpoints import BEST_CHECKPOINT, LAST_CHECKPOINT, load_checkpoint, restore_weights, save_checkpoint
from app.storage.volumes import B0_THRESHOLD, DwiStudy, Volume, load_dwi_study

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
METRICS_LOG = "metrics.csv"
METRICS_COLUMNS = ("epoch", "step", "split", "l1")
# rng stream reserved for the fixed validation origins; epochs use 1..epochs
VALIDATION_STREAM = 0


# ============ Data ============

@dataclass
class VolumePair:
    """Normalized network input and target on the same (padded) grid"""
    subject_id: str
    direction_index: int
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        if self.inputs.shape != self.targets.shape:
            raise ShapeError(f"{self.subject_id}[{self.direction_index}]: input {self.inputs.shape} "
                             f"and target {self.targets.shape} differ")


@dataclass
class TrainingData:
    train: List[VolumePair]
    validation: List[VolumePair] = field(default_factory=list)


def make_pair(
    inputs: Volume, target: Volume, patch_size: Sequence[int], subject_id: str = "", direction_index: int = 0
) -> VolumePair:
    """Normalize both volumes with the input's min-max parameters and pad to the patch size"""
    normalized = normalize(inputs)
    target = normalize(target, normalized.intensity_scale)
    return VolumePair(
        subject_id,
        direction_index,
        pad_to_patch(normalized.voxels.astype(np.float32, copy=False), patch_size),
        pad_to_patch(target.voxels.astype(np.float32, copy=False), patch_size),
    )


def study_pairs(
    interp: DwiStudy, hr: DwiStudy, patch_size: Sequence[int], subject_id: str, include_b0: bool = True
) -> List[VolumePair]:
    """One pair per diffusion direction, each an independent single-channel sample"""
    if interp.shape != hr.shape or len(interp.volumes) != len(hr.volumes):
        raise ShapeError(f"{subject_id}: interpolated and reference studies differ in shape")
    return [
        make_pair(x, y, patch_size, subject_id, index)
        for index, (x, y, b) in enumerate(zip(interp.volumes, hr.volumes, hr.bvals))
        if include_b0 or b > B0_THRESHOLD
    ]


def load_training_data(data_dir: Path, config: TrainConfig, manifest: Optional[SplitManifest] = None) -> TrainingData:
    """Read train/validation pairs from a prepared dataset directory"""
    data_dir = Path(data_dir)
    manifest = manifest or SplitManifest.load(data_dir / MANIFEST_NAME)
    if not manifest.train:
        raise DataError(f"split manifest under {data_dir} has no training subjects")

    def _load(subject_ids: Sequence[str]) -> List[VolumePair]:
        pairs = []
        for subject_id in subject_ids:
            paths = prepared_paths(data_dir, subject_id)
            pairs.extend(
                study_pairs(
                    load_dwi_study(paths.interp_path),
                    load_dwi_study(paths.hr_path),
                    config.patch_size,
                    subject_id,
                    config.include_b0,
                )
            )
        return pairs

    data = TrainingData(train=_load(manifest.train), validation=_load(manifest.validation))
    logger.info(f"Loaded {len(data.train)} training and {len(data.validation)} validation volumes from {data_dir}")
    return data


class PatchPairDataset(Dataset):
    """Input/target patch pairs at precomputed origins"""

    def __init__(self, pairs: Sequence[VolumePair], index: Sequence[Tuple[int, Tuple[int, int, int]]], size):
        self.pairs = pairs
        self.index = list(index)
        self.size = tuple(size)

    def __len__(self) -> int:
        return len(self.index)

    def __getitem__(self, item: int) -> Tuple[torch.Tensor, torch.Tensor]:
        pair_index, origin = self.index[item]
        pair = self.pairs[pair_index]
        x = np.ascontiguousarray(crop(pair.inputs, origin, self.size))
        y = np.ascontiguousarray(crop(pair.targets, origin, self.size))
        return torch.from_numpy(x)[None], torch.from_numpy(y)[None]


def patch_index(
    pairs: Sequence[VolumePair], size: Sequence[int], per_volume: int, rng: np.random.Generator, shuffle: bool
) -> List[Tuple[int, Tuple[int, int, int]]]:
    index = []
    for pair_index, pair in enumerate(pairs):
        for origin in sample_origins(pair.inputs.shape, size, per_volume, rng):
            index.append((pair_index, tuple(int(o) for o in origin)))
    if shuffle:
        index = [index[i] for i in rng.permutation(len(index))]
    return index


def make_loader(dataset: PatchPairDataset, config: TrainConfig) -> DataLoader:
    workers = 0 if config.deterministic else config.num_workers
    options = {"num_workers": workers}
    if workers > 0:
        # bounded prefetch queue per worker
        options["prefetch_factor"] = config.prefetch_factor
    return DataLoader(dataset, batch_size=config.batch_size, shuffle=False, **options)


# ============ Optimization ============

def l1_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over all elements"""
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    return F.l1_loss(pred, target, reduction="mean")


def build_optimizer(model: nn.Module, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS)


def train_step(
    model: nn.Module, optimizer: torch.optim.Optimizer, inputs: torch.Tensor, targets: torch.Tensor, where: str = ""
) -> float:
    """One forward/backward/Adam update; returns the batch loss"""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    loss = l1_loss(model(inputs), targets)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise NumericalError(f"non-finite training loss {value}{' at ' + where if where else ''}")
    loss.backward()
    optimizer.step()
    return value


@torch.no_grad()
def evaluate_loss(model: nn.Module, loader: DataLoader, device: torch.device) -> float:
    """Element-weighted mean L1 over every patch of the loader"""
    model.eval()
    total, count = 0.0, 0
    for inputs, targets in loader:
        inputs, targets = inputs.to(device), targets.to(device)
        total += float(l1_loss(model(inputs), targets)) * targets.numel()
        count += targets.numel()
    return total / count if count else float("nan")


# ============ Training loop ============

@dataclass
class TrainState:
    epoch: int = 0
    global_step: int = 0
    best_validation_loss: float = math.inf
    step_losses: List[float] = field(default_factory=list)
    epoch_losses: List[float] = field(default_factory=list)
    validation_losses: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Dict) -> "TrainState":
        return cls(**{key: values[key] for key in cls.__dataclass_fields__ if key in values})


def configure_determinism(config: TrainConfig, settings: Optional[Settings] = None) -> None:
    torch.manual_seed(config.seed)
    if config.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True, warn_only=True)
    elif settings is not None and settings.num_threads:
        torch.set_num_threads(settings.num_threads)


def resolve_device(settings: Optional[Settings] = None) -> torch.device:
    choice = settings.device if settings is not None else "auto"
    if choice == "auto":
        choice = "cuda" if torch.cuda.is_available() else "cpu"
    if choice == "cuda" and not torch.cuda.is_available():
        raise ConfigurationError("device 'cuda' requested but CUDA is not available")
    return torch.device(choice)


def append_metrics(path: Path, rows: Sequence[Tuple[int, int, str, float]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    is_new = not path.exists()
    with path.open("a", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        if is_new:
            writer.writerow(METRICS_COLUMNS)
        for epoch, step, split, value in rows:
            writer.writerow([epoch, step, split, repr(float(value))])


def train(
    model: nn.Module,
    data: TrainingData,
    config: TrainConfig,
    model_config: ModelConfig,
    resume_from: Optional[Path] = None,
    settings: Optional[Settings] = None,
) -> TrainState:
    """Run the epoch loop, writing last/best checkpoints and the metrics log under checkpoint_dir"""
    if not data.train:
        raise DataError("no training volumes")
    configure_determinism(config, settings)
    device = resolve_device(settings)
    model.to(device)
    optimizer = build_optimizer(model, config)
    state = TrainState()

    if resume_from is not None:
        checkpoint = load_checkpoint(resume_from, expected=model_config)
        restore_weights(model, checkpoint)
        if checkpoint.optimizer_state is not None:
            optimizer.load_state_dict(checkpoint.optimizer_state)
        state = TrainState.from_dict(checkpoint.train_state)
        logger.info(f"Resuming from {resume_from} after epoch {state.epoch} (step {state.global_step})")

    out_dir = Path(config.checkpoint_dir)
    metrics_path = out_dir / METRICS_LOG
    size = tuple(config.patch_size)

    validation_loader = None
    if data.validation:
        rng = np.random.default_rng([config.seed, VALIDATION_STREAM])
        index = patch_index(data.validation, size, config.validation_patches_per_volume, rng, shuffle=False)
        validation_loader = make_loader(PatchPairDataset(data.validation, index, size), config)

    for epoch in range(state.epoch + 1, config.epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        index = patch_index(data.train, size, config.patches_per_volume, rng, shuffle=True)
        loader = make_loader(PatchPairDataset(data.train, index, size), config)

        epoch_losses = []
        for batch, (inputs, targets) in enumerate(loader, start=1):
            loss = train_step(
                model, optimizer, inputs.to(device), targets.to(device), where=f"epoch {epoch}, batch {batch}"
            )
            state.global_step += 1
            state.step_losses.append(loss)
            epoch_losses.append(loss)

        train_l1 = float(np.mean(epoch_losses))
        state.epoch = epoch
        state.epoch_losses.append(train_l1)
        rows = [(epoch, state.global_step, "train", train_l1)]
        message = f"Epoch {epoch}/{config.epochs}: train L1 {train_l1:.6f}"

        is_best = False
        if validation_loader is not None and epoch % config.validate_every == 0:
            val_l1 = evaluate_loss(model, validation_loader, device)
            state.validation_losses.append(val_l1)
            rows.append((epoch, state.global_step, "validation", val_l1))
            message += f", validation L1 {val_l1:.6f}"
            if val_l1 < state.best_validation_loss:
                state.best_validation_loss = val_l1
                is_best = True
        elif validation_loader is None and train_l1 < state.best_validation_loss:
            # no validation split: select on training loss
            state.best_validation_loss = train_l1
            is_best = True

        logger.info(message)
        append_metrics(metrics_path, rows)
        save_checkpoint(out_dir / LAST_CHECKPOINT, model, model_config, optimizer, state.to_dict())
        if is_best:
            save_checkpoint(out_dir / BEST_CHECKPOINT, model, model_config, optimizer, state.to_dict())

    return state


# ============ Inference ============

@torch.no_grad()
def infer(
    model: nn.Module,
    volume: Volume,
    patch_size: Sequence[int],
    overlap: Sequence[int] = DEFAULT_OVERLAP,
    batch_size: int = 4,
    device: Optional[torch.device] = None,
) -> Volume:
    """Tile, run the network patch-wise, average overlaps and restore the input intensity scale"""
    device = device or next(model.parameters()).device
    size = tuple(int(s) for s in patch_size)
    normalized = normalize(volume)
    padded = pad_to_patch(normalized.voxels.astype(np.float32, copy=False), size)
    overlap = tuple(min(o, s - 1) for o, s in zip(overlap, size))
    origins = tile_origins(padded.shape, size, overlap)

    model.eval()
    outputs = []
    for start in range(0, len(origins), batch_size):
        chunk = origins[start : start + batch_size]
        batch = torch.stack([torch.from_numpy(np.ascontiguousarray(crop(padded, o, size)))[None] for o in chunk])
        pred = model(batch.to(device)).cpu().numpy()
        outputs.extend(
            (PatchSample(data=batch[i : i + 1], origin=origin), pred[i, 0]) for i, origin in enumerate(chunk)
        )

    result = aggregate_patches(outputs, volume.shape, reference=normalized)
    return denormalize(result)


def infer_study(model: nn.Module, study: DwiStudy, patch_size: Sequence[int], **options) -> DwiStudy:
    volumes = [infer(model, volume, patch_size, **options) for volume in study.volumes]
    return DwiStudy(volumes, study.bvals, study.bvecs)
