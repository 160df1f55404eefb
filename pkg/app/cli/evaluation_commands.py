"""evaluate, derive, stats and report."""
import argparse
import logging
from pathlib import Path

from app.cli.dependencies import nifti_inputs, print_lines, require_dir, require_file
from app.core.errors import DataError, UsageError
from app.core.settings import Settings
from app.services.dti_service import compare_derived, derived_maps, fit_tensor, save_maps
from app.services.metrics_service import evaluate_studies, parse_metric_names, read_report, summarize, write_report
from app.services.report_service import build_report, summary_table
from app.services.stats_service import append_results, compare_methods, format_row, upsert_results
from app.storage.volumes import load_dwi_study, load_nifti

logger = logging.getLogger(__name__)

METRICS_REPORT = "metrics.csv"


def evaluate(args: argparse.Namespace, settings: Settings) -> int:
    metrics = parse_metric_names(args.metrics)
    predictions = nifti_inputs(require_dir(args.pred_dir, "--pred-dir"), "--pred-dir")
    references = nifti_inputs(require_dir(args.gt_dir, "--gt-dir"), "--gt-dir")
    missing = sorted(set(predictions) - set(references))
    if missing:
        raise DataError(f"no ground truth for {', '.join(missing)} in {args.gt_dir}")
    method = args.method or Path(args.pred_dir).name
    output = args.output or Path(args.pred_dir) / METRICS_REPORT

    rows = []
    for subject_id in sorted(predictions):
        rows.extend(
            evaluate_studies(
                load_nifti(references[subject_id]), load_nifti(predictions[subject_id]), subject_id, method, metrics
            )
        )
    write_report(output, rows, append=args.append)
    print_lines(summary_table(summarize(rows)).splitlines())
    logger.info(f"Wrote {len(rows)} metric rows to {output}")
    return 0


def derive(args: argparse.Namespace, settings: Settings) -> int:
    if (args.bvals is None) != (args.bvecs is None):
        raise UsageError("--bvals and --bvecs go together")
    if args.report is not None and args.reference_dir is None:
        raise UsageError("--report needs --reference-dir")
    inputs = nifti_inputs(require_dir(args.dwi_dir, "--dwi-dir"), "--dwi-dir")
    bvals = require_file(args.bvals, "--bvals") if args.bvals else None
    bvecs = require_file(args.bvecs, "--bvecs") if args.bvecs else None
    references = nifti_inputs(require_dir(args.reference_dir, "--reference-dir"), "--reference-dir") if args.reference_dir else {}
    missing = sorted(set(inputs) - set(references)) if references else []
    if missing:
        raise DataError(f"no reference study for {', '.join(missing)} in {args.reference_dir}")
    method = args.method or Path(args.dwi_dir).name

    rows = []
    for subject_id, path in sorted(inputs.items()):
        tensors = fit_tensor(load_dwi_study(path, bvals, bvecs))
        save_maps(args.output, subject_id, derived_maps(tensors))
        if references:
            reference = fit_tensor(load_dwi_study(references[subject_id], bvals, bvecs))
            rows.extend(compare_derived(reference, tensors, subject_id, method))
        logger.info(f"Derived maps for {subject_id}")

    if rows:
        report = args.report or Path(args.output) / METRICS_REPORT
        write_report(report, rows, append=args.append)
        print_lines(summary_table(summarize(rows)).splitlines())
    print(f"wrote derived maps for {len(inputs)} subjects to {args.output}")
    return 0


def stats(args: argparse.Namespace, settings: Settings) -> int:
    if args.replace and args.output is None:
        raise UsageError("--replace needs --output")
    rows_a = read_report(require_file(args.report_a, "--report-a"))
    rows_b = read_report(require_file(args.report_b, "--report-b"))
    results = compare_methods(rows_a, rows_b, args.metric, equal_var=not args.welch)
    for result in results:
        print(",".join(format_row(result)))
    if args.output is not None:
        if args.replace:
            upsert_results(args.output, results)
        else:
            append_results(args.output, results)
    return 0


def report(args: argparse.Namespace, settings: Settings) -> int:
    paths = [require_file(path, "--csv") for path in args.csv]
    rows = [row for path in paths for row in read_report(path)]
    written = build_report(rows, args.out)
    print_lines([str(path) for path in written])
    return 0


def register(subparsers) -> None:
    parser = subparsers.add_parser("evaluate", help="SSIM, RMSE and UQI against ground truth")
    parser.add_argument("--pred-dir", type=Path, required=True)
    parser.add_argument("--gt-dir", type=Path, required=True)
    parser.add_argument("--metrics", default="ssim,rmse,uqi")
    parser.add_argument("--method", help="method name in the report (default: prediction directory name)")
    parser.add_argument("--output", type=Path, help="report CSV (default: <pred-dir>/metrics.csv)")
    parser.add_argument("--append", action="store_true", help="append to an existing report")
    parser.set_defaults(func=evaluate)

    parser = subparsers.add_parser("derive", help="tensor fit and AD/FA/MD/E1..E6 maps")
    parser.add_argument("--dwi-dir", type=Path, required=True)
    parser.add_argument("--bvals", type=Path, help="b-values for every study (default: per-study sidecar)")
    parser.add_argument("--bvecs", type=Path)
    parser.add_argument("--output", type=Path, required=True)
    parser.add_argument("--reference-dir", type=Path, help="ground-truth studies to compare the maps against")
    parser.add_argument("--method")
    parser.add_argument("--report", type=Path, help="derived-metric CSV (default: <output>/metrics.csv)")
    parser.add_argument("--append", action="store_true")
    parser.set_defaults(func=derive)

    parser = subparsers.add_parser("stats", help="independent two-sample t-test between reports")
    parser.add_argument("--report-a", type=Path, required=True)
    parser.add_argument("--report-b", type=Path, required=True)
    parser.add_argument("--metric", default="uqi")
    parser.add_argument("--welch", action="store_true", help="unequal-variance test")
    parser.add_argument("--output", type=Path, help="t-test CSV; rows are appended")
    parser.add_argument("--replace", action="store_true", help="replace rows with the same (metric, method_a, method_b)")
    parser.set_defaults(func=stats)

    parser = subparsers.add_parser("report", help="bar charts and summary table")
    parser.add_argument("--csv", type=Path, nargs="+", required=True)
    parser.add_argument("--out", type=Path, required=True)
    parser.set_defaults(func=report)
