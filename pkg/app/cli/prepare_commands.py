"""synth and prepare: synthetic phantoms and the low-resolution training set."""
import argparse
import logging
from pathlib import Path

from app.cli.dependencies import data_dir, int_triple, positive_int, require_dir
from app.core.errors import UsageError
from app.core.settings import Settings
from app.services.data_pipeline import prepare_dataset
from app.services.phantoms import write_subjects

logger = logging.getLogger(__name__)


def synth(args: argparse.Namespace, settings: Settings) -> int:
    if any(s < 8 for s in args.shape):
        raise UsageError(f"--shape must be at least 8 per axis, got {args.shape}")
    if args.directions < 6:
        raise UsageError("--directions must be at least 6")
    output_dir = data_dir(args.output_dir, settings, "raw")
    paths = write_subjects(output_dir, args.subjects, args.shape, args.seed, args.directions)
    print(f"wrote {len(paths)} subjects to {output_dir}")
    return 0


def prepare(args: argparse.Namespace, settings: Settings) -> int:
    if args.factor < 2:
        raise UsageError("--factor must be at least 2")
    input_dir = require_dir(data_dir(args.input_dir, settings, "raw"), "--input-dir")
    output_dir = data_dir(args.output_dir, settings, "prepared")

    manifest = prepare_dataset(input_dir, output_dir, args.factor, args.seed, args.counts)
    print(
        f"prepared {len(manifest.all_subjects)} subjects in {output_dir} "
        f"({len(manifest.train)} train / {len(manifest.validation)} validation / {len(manifest.test)} test)"
    )
    return 0


def register(subparsers) -> None:
    parser = subparsers.add_parser("synth", help="write synthetic diffusion phantoms")
    parser.add_argument("--output-dir", type=Path)
    parser.add_argument("--subjects", type=positive_int, default=8)
    parser.add_argument("--shape", type=int_triple, default=(64, 64, 64), help="x,y,z voxels")
    parser.add_argument("--directions", type=positive_int, default=16)
    parser.add_argument("--seed", type=int, default=0)
    parser.set_defaults(func=synth)

    parser = subparsers.add_parser("prepare", help="simulate low resolution, sinc re-interpolate and split")
    parser.add_argument("--input-dir", type=Path)
    parser.add_argument("--output-dir", type=Path)
    parser.add_argument("--factor", type=int, default=2)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--counts", type=int_triple, help="train,validation,test subject counts")
    parser.set_defaults(func=prepare)
