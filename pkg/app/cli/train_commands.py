"""train and infer."""
import argparse
import logging
from pathlib import Path

from app.cli.dependencies import data_dir, int_triple, nifti_inputs, positive_int, require_dir, require_file, run_config
from app.core.errors import UsageError
from app.core.settings import Settings
from app.models import build_model, count_parameters
from app.models.shuffle_unet import check_patch_size
from app.services.baselines import METHOD_NAMES, interpolate, is_learned
from app.services.data_pipeline import DEFAULT_OVERLAP, DEFAULT_PATCH_SIZE
from app.services.training_service import infer_study, load_training_data, resolve_device, train
from app.storage.checkpoints import load_model
from app.storage.volumes import DwiStudy, load_dwi_study, save_dwi_study

logger = logging.getLogger(__name__)

RUN_CONFIG_NAME = "run.conf"


def train_command(args: argparse.Namespace, settings: Settings) -> int:
    config = run_config(args)
    check_patch_size(config.train.patch_size, config.model)
    prepared = require_dir(data_dir(args.data, settings, "prepared"), "--data")
    if args.resume is not None:
        require_file(args.resume, "--resume")

    data = load_training_data(prepared, config.train)
    model = build_model(config.model)
    logger.info(f"{config.model.architecture}: {count_parameters(model):,} trainable parameters")

    checkpoint_dir = Path(config.train.checkpoint_dir)
    checkpoint_dir.mkdir(parents=True, exist_ok=True)
    (checkpoint_dir / RUN_CONFIG_NAME).write_text(config.to_text(), encoding="utf-8")

    state = train(model, data, config.train, config.model, resume_from=args.resume, settings=settings)
    print(
        f"trained {state.epoch} epochs ({state.global_step} steps); "
        f"best loss {state.best_validation_loss:.6f}; checkpoints in {checkpoint_dir}"
    )
    return 0


def infer_command(args: argparse.Namespace, settings: Settings) -> int:
    learned = is_learned(args.method)
    if learned and args.checkpoint is None:
        raise UsageError(f"--method {args.method} needs --checkpoint")
    if not learned and args.checkpoint is not None:
        raise UsageError(f"--method {args.method} does not take --checkpoint")
    if args.factor < 2:
        raise UsageError("--factor must be at least 2")
    inputs = nifti_inputs(args.input, "--input")

    model = None
    if learned:
        model = load_model(require_file(args.checkpoint, "--checkpoint"))
        if model.config.architecture != args.method:
            raise UsageError(f"checkpoint holds a {model.config.architecture} model, not {args.method}")
        check_patch_size(args.patch_size, model.config)
        model.to(resolve_device(settings))

    for subject_id, path in inputs.items():
        study = load_dwi_study(path)
        if learned:
            result = infer_study(model, study, args.patch_size, overlap=args.overlap, batch_size=args.batch_size)
        else:
            target = tuple(s * args.factor for s in study.shape)
            result = DwiStudy([interpolate(args.method, v, target) for v in study.volumes], study.bvals, study.bvecs)
        save_dwi_study(Path(args.output) / f"{subject_id}.nii.gz", result)
        logger.info(f"{args.method}: {subject_id} {study.shape} -> {result.shape}")

    print(f"wrote {len(inputs)} volumes with {args.method} to {args.output}")
    return 0


def register(subparsers) -> None:
    parser = subparsers.add_parser("train", help="train a network on a prepared dataset")
    parser.add_argument("--config", type=Path, help="run configuration (section.key = value)")
    parser.add_argument("--data", type=Path, help="prepared dataset directory")
    parser.add_argument("--resume", type=Path, help="checkpoint to continue from")
    parser.add_argument("--checkpoint-dir", type=Path)
    parser.add_argument("--architecture", choices=("shuffleunet", "unet"))
    parser.add_argument("--epochs", type=positive_int)
    parser.add_argument("--batch-size", type=positive_int)
    parser.add_argument("--learning-rate", type=float)
    parser.add_argument("--patch-size", type=int_triple)
    parser.add_argument("--seed", type=int)
    parser.set_defaults(func=train_command)

    parser = subparsers.add_parser("infer", help="super-resolve volumes")
    parser.add_argument("--input", type=Path, required=True, help="NIfTI file or directory")
    parser.add_argument("--output", type=Path, required=True, help="output directory")
    parser.add_argument("--method", choices=METHOD_NAMES, default="shuffleunet")
    parser.add_argument("--checkpoint", type=Path)
    parser.add_argument("--factor", type=int, default=2, help="upsampling factor for interpolation methods")
    parser.add_argument("--patch-size", type=int_triple, default=DEFAULT_PATCH_SIZE)
    parser.add_argument("--overlap", type=int_triple, default=DEFAULT_OVERLAP)
    parser.add_argument("--batch-size", type=positive_int, default=4)
    parser.set_defaults(func=infer_command)
