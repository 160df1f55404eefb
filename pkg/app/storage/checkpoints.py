"""Checkpoint container: format version, model configuration text, weights, optimizer and loop state."""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import torch
import torch.nn as nn

from app.core.errors import ConfigurationError, DataError
from app.core.schemas import ModelConfig
from app.core.settings import model_config_from_text, model_config_to_text
from app.models import build_model

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
LAST_CHECKPOINT = "last.pt"
BEST_CHECKPOINT = "best.pt"


@dataclass
class Checkpoint:
    model_config: ModelConfig
    state_dict: Dict[str, torch.Tensor]
    optimizer_state: Optional[Dict[str, Any]] = None
    train_state: Dict[str, Any] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def _float32_weights(model: nn.Module) -> Dict[str, torch.Tensor]:
    weights = {}
    for name, tensor in model.state_dict().items():
        tensor = tensor.detach().cpu()
        if tensor.is_floating_point():
            tensor = tensor.to(torch.float32)
        weights[name] = tensor.clone().contiguous()
    return weights


def save_checkpoint(
    path: Path,
    model: nn.Module,
    config: ModelConfig,
    optimizer: Optional[torch.optim.Optimizer] = None,
    train_state: Optional[Dict[str, Any]] = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": FORMAT_VERSION,
        "architecture": config.architecture,
        "model_config": model_config_to_text(config),
        "state_dict": _float32_weights(model),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "train_state": dict(train_state or {}),
    }
    # atomic replace
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    logger.debug(f"Saved checkpoint {path}")
    return path


def load_checkpoint(path: Path, expected: Optional[ModelConfig] = None) -> Checkpoint:
    """Read a checkpoint; with `expected` given, the stored configuration must match it"""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e

    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise ConfigurationError(f"{path}: unsupported checkpoint format version {version!r}")

    config = model_config_from_text(payload["model_config"])
    if config.architecture != payload.get("architecture"):
        raise ConfigurationError(f"{path}: architecture field disagrees with the stored configuration")
    if expected is not None and expected != config:
        diff = {
            key: (value, getattr(config, key))
            for key, value in expected.model_dump().items()
            if getattr(config, key) != value
        }
        raise ConfigurationError(f"{path}: checkpoint configuration differs (expected, stored): {diff}")

    return Checkpoint(
        model_config=config,
        state_dict=payload["state_dict"],
        optimizer_state=payload.get("optimizer"),
        train_state=payload.get("train_state") or {},
        format_version=version,
    )


def restore_weights(model: nn.Module, checkpoint: Checkpoint) -> nn.Module:
    try:
        model.load_state_dict(checkpoint.state_dict, strict=True)
    except RuntimeError as e:
        raise ConfigurationError(f"checkpoint weights do not fit the model: {e}") from e
    return model


def load_model(path: Path, expected: Optional[ModelConfig] = None) -> nn.Module:
    """Build the stored architecture and load its weights"""
    checkpoint = load_checkpoint(path, expected)
    model = restore_weights(build_model(checkpoint.model_config), checkpoint)
    logger.info(f"Loaded {checkpoint.model_config.architecture} model from {path}")
    return model
