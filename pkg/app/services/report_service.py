"""Comparison figures (grouped bars, mean with std error bars) and the plain-text summary table."""
import logging
from pathlib import Path
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from app.core.errors import DataError  # noqa: E402
from app.core.schemas import MetricRow, MetricSummary  # noqa: E402
from app.services.baselines import METHOD_NAMES  # noqa: E402
from app.services.metrics_service import IMAGE_METRICS, summarize  # noqa: E402

logger = logging.getLogger(__name__)

IMAGE_FIGURE = "metrics.png"
DERIVED_FIGURE = "derived_metrics.png"
SUMMARY_TABLE = "summary.txt"


def method_order(methods: Sequence[str]) -> List[str]:
    """Known methods in registry order, then the rest alphabetically"""
    known = [m for m in METHOD_NAMES if m in methods]
    return known + sorted(set(methods) - set(known))


def _metric_order(metrics: Sequence[str]) -> List[str]:
    image = [m for m in IMAGE_METRICS if m in metrics]
    return image + sorted(set(metrics) - set(image))


def plot_grouped_bars(summaries: Sequence[MetricSummary], path: Path, title: str) -> Path:
    """One group per metric, one bar per method"""
    table: Dict[tuple, MetricSummary] = {(s.method, s.metric): s for s in summaries}
    methods = method_order([s.method for s in summaries])
    metrics = _metric_order(sorted({s.metric for s in summaries}))

    x = np.arange(len(metrics))
    width = 0.8 / max(len(methods), 1)
    fig, ax = plt.subplots(figsize=(max(6.0, 0.6 * len(metrics) * max(len(methods), 1)), 4.5))
    for i, method in enumerate(methods):
        means = [table[(method, m)].mean if (method, m) in table else np.nan for m in metrics]
        stds = [table[(method, m)].std if (method, m) in table else 0.0 for m in metrics]
        ax.bar(x + (i - (len(methods) - 1) / 2) * width, means, width, yerr=stds, capsize=3, label=method)
    ax.set_xticks(x)
    ax.set_xticklabels([m.upper() for m in metrics], rotation=45 if len(metrics) > 6 else 0, ha="right" if len(metrics) > 6 else "center")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    logger.info(f"Wrote {path}")
    return path


def summary_table(summaries: Sequence[MetricSummary]) -> str:
    """Rows per method, columns per metric, cells formatted mean±std"""
    table = {(s.method, s.metric): s.formatted for s in summaries}
    methods = method_order([s.method for s in summaries])
    metrics = _metric_order(sorted({s.metric for s in summaries}))
    header = ["method"] + metrics
    rows = [[method] + [table.get((method, m), "-") for m in metrics] for method in methods]
    widths = [max(len(str(row[i])) for row in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(str(cell).ljust(w) for cell, w in zip(row, widths)).rstrip() for row in [header] + rows]
    return "\n".join(lines) + "\n"


def build_report(rows: Sequence[MetricRow], out_dir: Path) -> List[Path]:
    if not rows:
        raise DataError("no metric rows to report")
    out_dir = Path(out_dir)
    summaries = summarize(rows)
    image = [s for s in summaries if s.metric in IMAGE_METRICS]
    derived = [s for s in summaries if s.metric not in IMAGE_METRICS]

    written = []
    if image:
        written.append(plot_grouped_bars(image, out_dir / IMAGE_FIGURE, "Image quality"))
    if derived:
        written.append(plot_grouped_bars(derived, out_dir / DERIVED_FIGURE, "Derived maps"))
    table_path = out_dir / SUMMARY_TABLE
    table_path.parent.mkdir(parents=True, exist_ok=True)
    table_path.write_text(summary_table(summaries), encoding="utf-8")
    written.append(table_path)
    return written
