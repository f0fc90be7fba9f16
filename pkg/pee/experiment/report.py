from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Sequence, Union

import numpy as np
import pandas as pd

from pee.exceptions import FormatError, SchemaMismatchError

FLOAT_FORMAT = "%.6f"

# Columns identifying a row; every other numeric column is a metric
KEY_COLUMNS = ("variant", "seed", "parameter", "value", "budgetMB", "groupA", "groupB")
LOWER_IS_BETTER = ("shrinkMicros", "rankMicros", "paramCount")
TIE_TOLERANCE = 1e-12

IMPROVED = "improved"
REGRESSED = "regressed"
TIED = "tied"


def write_csv(path: Union[str, Path], rows: List[Dict], columns: Sequence[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(rows, columns=list(columns))
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def read_report(path: Union[str, Path]) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"Report '{path}' does not exist.")
    return pd.read_csv(path)


def _sign(metric: str, delta: float) -> str:
    if np.isnan(delta) or abs(delta) <= TIE_TOLERANCE:
        return TIED
    better = delta < 0 if metric in LOWER_IS_BETTER else delta > 0
    return IMPROVED if better else REGRESSED


def compare_frames(first: pd.DataFrame, second: pd.DataFrame) -> pd.DataFrame:
    """Per-metric deltas ``second - first`` with a sign per row."""
    if list(first.columns) != list(second.columns):
        missing = sorted(set(first.columns) ^ set(second.columns))
        raise SchemaMismatchError(
            f"Reports have different columns: {missing or list(second.columns)}."
        )
    if len(first) != len(second):
        raise SchemaMismatchError(f"Reports have {len(first)} and {len(second)} rows.")

    keys = [c for c in first.columns if c in KEY_COLUMNS]
    if keys:
        a_keys = first[keys].astype(str).values.tolist()
        b_keys = second[keys].astype(str).values.tolist()
        if a_keys != b_keys:
            raise SchemaMismatchError(f"Reports differ in key columns {keys}.")
    metrics = [
        c
        for c in first.columns
        if c not in KEY_COLUMNS and pd.api.types.is_numeric_dtype(first[c])
    ]

    rows: List[Dict] = []
    for index in range(len(first)):
        key = {c: first.iloc[index][c] for c in keys}
        for metric in metrics:
            a = float(first.iloc[index][metric])
            b = float(second.iloc[index][metric])
            delta = b - a
            rows.append(
                {
                    **key,
                    "metric": metric,
                    "a": a,
                    "b": b,
                    "delta": delta,
                    "sign": _sign(metric, delta),
                }
            )
    return pd.DataFrame(rows, columns=keys + ["metric", "a", "b", "delta", "sign"])


def compare_runs(
    report_a: Union[str, Path], report_b: Union[str, Path]
) -> pd.DataFrame:
    """Compare two report CSVs of the same schema."""
    return compare_frames(read_report(report_a), read_report(report_b))


def summarize(comparison: pd.DataFrame) -> Dict[str, int]:
    """Count of improved, regressed and tied rows."""
    counts = comparison["sign"].value_counts() if len(comparison) else {}
    return {sign: int(counts.get(sign, 0)) for sign in (IMPROVED, REGRESSED, TIED)}
