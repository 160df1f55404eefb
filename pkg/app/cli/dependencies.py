"""Shared argument parsing and input resolution for the commands."""
import argparse
import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from app.core.errors import DataError, UsageError
from app.core.settings import RunConfig, Settings
from app.services.baselines import unet_baseline_config
from app.storage.volumes import find_nifti_files, subject_id_from_path

logger = logging.getLogger(__name__)


class CliArgumentParser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors become UsageError (exit code 1)"""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def int_triple(text: str) -> Tuple[int, int, int]:
    """argparse type for 'x,y,z'"""
    try:
        values = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated integers, got {text!r}")
    if len(values) != 3 or any(v < 0 for v in values):
        raise argparse.ArgumentTypeError(f"expected three non-negative integers, got {text!r}")
    return values


def positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def require_dir(path: Optional[Path], flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    path = Path(path)
    if not path.is_dir():
        raise DataError(f"{flag}: not a directory: {path}")
    return path


def require_file(path: Optional[Path], flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{flag}: file not found: {path}")
    return path


def data_dir(path: Optional[Path], settings: Settings, default: str) -> Path:
    """Explicit path, else <SHUFFLEUNET_DATA_DIR>/<default>"""
    return Path(path) if path is not None else settings.data_dir / default


def nifti_inputs(path: Path, flag: str) -> Dict[str, Path]:
    """Subject id -> NIfTI path for a single file or every NIfTI file in a directory"""
    path = Path(path)
    if path.is_file():
        return {subject_id_from_path(path): path}
    files = find_nifti_files(require_dir(path, flag))
    if not files:
        raise DataError(f"{flag}: no NIfTI files in {path}")
    return {subject_id_from_path(p): p for p in files}


def run_config(args: argparse.Namespace) -> RunConfig:
    """Configuration file (if any) with command-line overrides applied"""
    config = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {
        "train.epochs": getattr(args, "epochs", None),
        "train.batch_size": getattr(args, "batch_size", None),
        "train.learning_rate": getattr(args, "learning_rate", None),
        "train.seed": getattr(args, "seed", None),
        "train.checkpoint_dir": getattr(args, "checkpoint_dir", None),
        "train.patch_size": getattr(args, "patch_size", None),
    }
    config = config.with_overrides(overrides)
    architecture = getattr(args, "architecture", None)
    if architecture == "unet":
        config = config.model_copy(update={"model": unet_baseline_config(config.model)})
    elif architecture is not None:
        config = config.with_overrides({"model.architecture": architecture})
    return config


def print_lines(lines: List[str]) -> None:
    for line in lines:
        print(line)
