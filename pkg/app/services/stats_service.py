"""Independent two-sample t-test between per-subject metric values of two methods."""
import csv
import logging
import math
from pathlib import Path
from typing import Iterable, List, Sequence

import numpy as np
from pydantic import ValidationError
from scipy import stats

from app.core.errors import DataError
from app.core.schemas import MetricRow, SampleSet, TTestResult

logger = logging.getLogger(__name__)

ALPHA = 0.05
TTEST_COLUMNS = ("metric", "method_a", "method_b", "t", "df", "p", "significant")


def ttest_independent(a: SampleSet, b: SampleSet, equal_var: bool = True, alpha: float = ALPHA) -> TTestResult:
    """Two-tailed t-test; pooled variance by default, Welch's correction with equal_var=False"""
    if a.metric != b.metric:
        raise DataError(f"cannot compare metric {a.metric!r} with {b.metric!r}")
    x, y = np.asarray(a.values, dtype=np.float64), np.asarray(b.values, dtype=np.float64)
    result = dict(metric=a.metric, method_a=a.method, method_b=b.method, equal_var=equal_var, alpha=alpha)

    # zero variance on both sides leaves the statistic undefined
    if np.ptp(x) == 0 and np.ptp(y) == 0:
        df = float(len(x) + len(y) - 2)
        diff = x[0] - y[0]
        if diff == 0:
            return TTestResult(t=0.0, p=1.0, df=df, significant=False, note="both samples constant and equal", **result)
        logger.warning(f"{a.metric}: {a.method} and {b.method} are constant with different means")
        return TTestResult(
            t=math.copysign(math.inf, diff), p=0.0, df=df, significant=True, degenerate=True,
            note="zero variance with unequal means", **result,
        )

    test = stats.ttest_ind(x, y, equal_var=equal_var)
    t, p = float(test.statistic), float(test.pvalue)
    return TTestResult(t=t, p=p, df=float(test.df), significant=p < alpha, **result)


def sample_sets(rows: Iterable[MetricRow], metric: str) -> List[SampleSet]:
    """Group report rows of one metric by method, values ordered by subject"""
    by_method = {}
    for row in rows:
        if row.metric == metric:
            by_method.setdefault(row.method, []).append((row.subject, row.value))
    sets = []
    for method, values in sorted(by_method.items()):
        try:
            sets.append(SampleSet(method=method, metric=metric, values=[value for _, value in sorted(values)]))
        except ValidationError as e:
            raise DataError(
                f"{method}: {metric} needs at least two finite per-subject values, got {len(values)}"
            ) from e
    return sets


def compare_methods(
    rows_a: Sequence[MetricRow], rows_b: Sequence[MetricRow], metric: str, equal_var: bool = True
) -> List[TTestResult]:
    """Every method of report A against every method of report B on one metric"""
    sets_a, sets_b = sample_sets(rows_a, metric), sample_sets(rows_b, metric)
    if not sets_a or not sets_b:
        raise DataError(f"metric {metric!r} missing from one of the reports")
    return [
        ttest_independent(sa, sb, equal_var=equal_var)
        for sa in sets_a
        for sb in sets_b
    ]


def format_row(result: TTestResult) -> List[str]:
    return [
        result.metric,
        result.method_a,
        result.method_b,
        repr(result.t),
        repr(result.df),
        repr(result.p),
        str(result.significant).lower(),
    ]


def upsert_results(path: Path, results: Sequence[TTestResult]) -> Path:
    """Write results keyed by (metric, method_a, method_b), replacing rows with the same key"""
    path = Path(path)
    existing = {}
    if path.exists():
        with path.open(newline="", encoding="utf-8") as handle:
            reader = csv.reader(handle)
            header = next(reader, None)
            if header is not None and tuple(header) != TTEST_COLUMNS:
                raise DataError(f"{path}: expected columns {', '.join(TTEST_COLUMNS)}")
            for record in reader:
                if record:
                    existing[tuple(record[:3])] = record
    for result in results:
        existing[(result.metric, result.method_a, result.method_b)] = format_row(result)

    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(TTEST_COLUMNS)
        for key in sorted(existing):
            writer.writerow(existing[key])
    return path


def append_results(path: Path, results: Sequence[TTestResult]) -> Path:
    """Append result rows, writing the header when the file is new"""
    path = Path(path)
    exists = path.exists() and path.stat().st_size > 0
    if exists:
        with path.open(newline="", encoding="utf-8") as handle:
            header = next(csv.reader(handle), None)
        if header is not None and tuple(header) != TTEST_COLUMNS:
            raise DataError(f"{path}: expected columns {', '.join(TTEST_COLUMNS)}")
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        if not exists:
            writer.writerow(TTEST_COLUMNS)
        for result in results:
            writer.writerow(format_row(result))
    return path
