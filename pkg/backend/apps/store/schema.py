import math
import logging
from collections import Counter
from itertools import combinations
from typing import Any, Optional

import numpy as np
import pandas as pd

from apps.stats.main import contingency_from_pairs, cramers_v
from apps.store.models import (
    ColumnEntry,
    Correlation,
    NumericSummary,
    SchemaCache,
    SemanticType,
    ValueCount,
)
from config import NOTABLE_CORRELATION, SRC_LOG_LEVELS, TOP_VALUE_COUNTS
from constants import ERROR_MESSAGES
from utils.errors import StoreError

log = logging.getLogger(__name__)
log.setLevel(SRC_LOG_LEVELS["STORE"])

NUMERIC_TYPES = ("int", "float")
ASSOCIATION_TYPES = ("bool", "category")


def is_null(value: Any) -> bool:
    return value is None or (isinstance(value, float) and math.isnan(value))


def json_value(value: Any) -> Any:
    """Plain Python scalar for JSON output (numpy scalars unwrapped, NaN -> None)."""
    if isinstance(value, np.generic):
        value = value.item()
    return None if is_null(value) else value


def infer_type(values: list[Any]) -> SemanticType:
    """Infer a semantic type from the non-null values of a column."""
    if not values:
        return "text"
    if all(isinstance(v, bool) for v in values):
        return "bool"
    if all(isinstance(v, int) and not isinstance(v, bool) for v in values):
        return "int"
    if all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in values):
        return "float"
    distinct = len({str(v) for v in values})
    return "category" if distinct <= TOP_VALUE_COUNTS else "text"


def _numeric_summary(values: list[Any]) -> NumericSummary:
    arr = np.asarray(values, dtype=float)
    q1, q2, q3 = np.percentile(arr, [25, 50, 75])
    return NumericSummary(
        min=float(arr.min()),
        max=float(arr.max()),
        mean=float(arr.mean()),
        stddev=float(arr.std(ddof=1)) if len(arr) > 1 else None,
        quartiles=(float(q1), float(q2), float(q3)),
    )


def _value_counts(values: list[Any], inferred_type: SemanticType) -> tuple[list[ValueCount], int]:
    if inferred_type in ("category", "text") and not all(isinstance(v, str) for v in values):
        values = [str(v) for v in values]
    counts = Counter(values)
    ordered = sorted(counts.items(), key=lambda item: (-item[1], str(item[0])))
    top = [ValueCount(value=value, count=count) for value, count in ordered[:TOP_VALUE_COUNTS]]
    other = sum(count for _, count in ordered[TOP_VALUE_COUNTS:])
    return top, other


def summarize_column(
    name: str, series: pd.Series, declared_type: Optional[SemanticType] = None
) -> tuple[ColumnEntry, list[Any]]:
    raw = [json_value(v) for v in series.tolist()]
    present = [v for v in raw if v is not None]
    inferred = declared_type or infer_type(present)
    if inferred in NUMERIC_TYPES and not all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in present
    ):
        inferred = infer_type(present)

    entry = ColumnEntry(
        name=name,
        inferred_type=inferred,
        null_rate=(len(raw) - len(present)) / len(raw) if raw else 0.0,
        distinct_count=len({(isinstance(v, bool), v) for v in present}),
    )
    if present and inferred in NUMERIC_TYPES:
        entry.numeric = _numeric_summary(present)
    elif present:
        entry.top_values, entry.other_count = _value_counts(present, inferred)
    return entry, raw


def _pearson(a: list[Any], b: list[Any]) -> Optional[float]:
    pairs = [(x, y) for x, y in zip(a, b) if x is not None and y is not None]
    if len(pairs) < 2:
        return None
    xs = np.asarray([p[0] for p in pairs], dtype=float)
    ys = np.asarray([p[1] for p in pairs], dtype=float)
    if xs.std() == 0 or ys.std() == 0:
        return None
    value = float(np.corrcoef(xs, ys)[0, 1])
    return None if math.isnan(value) else value


def _association(a: list[Any], b: list[Any]) -> Optional[float]:
    pairs = [(x, y) for x, y in zip(a, b) if x is not None and y is not None]
    if not pairs:
        return None
    table = contingency_from_pairs(pairs)
    if len(table.row_labels) < 2 or len(table.col_labels) < 2:
        return None
    return cramers_v(table)


def build_schema_cache(
    frame: pd.DataFrame,
    corpus_version: int,
    notable_threshold: float = NOTABLE_CORRELATION,
    declared_types: Optional[dict[str, SemanticType]] = None,
) -> SchemaCache:
    """
    Per-column statistics plus notable pairwise correlations.
    Pearson for numeric pairs and Cramér's V for bool/category pairs, over
    columns with at least two distinct values.
    """
    if len(frame.index) == 0:
        raise StoreError(ERROR_MESSAGES.EMPTY_CORPUS.value)

    declared_types = declared_types or {}
    entries: list[ColumnEntry] = []
    values: dict[str, list[Any]] = {}
    for name in frame.columns:
        entry, raw = summarize_column(name, frame[name], declared_types.get(name))
        entries.append(entry)
        values[name] = raw

    candidates = [e for e in entries if e.distinct_count >= 2]
    correlations: list[Correlation] = []
    for left, right in combinations(candidates, 2):
        if left.inferred_type in NUMERIC_TYPES and right.inferred_type in NUMERIC_TYPES:
            value = _pearson(values[left.name], values[right.name])
            if value is not None and abs(value) >= notable_threshold:
                correlations.append(
                    Correlation(col_a=left.name, col_b=right.name, measure="pearson", value=value)
                )
        elif left.inferred_type in ASSOCIATION_TYPES and right.inferred_type in ASSOCIATION_TYPES:
            value = _association(values[left.name], values[right.name])
            if value is not None and value >= notable_threshold:
                correlations.append(
                    Correlation(col_a=left.name, col_b=right.name, measure="cramers_v", value=value)
                )

    log.info(
        f"schema cache v{corpus_version}: {len(entries)} columns, {len(correlations)} notable correlations"
    )
    return SchemaCache(
        columns=entries,
        correlations=correlations,
        corpus_version=corpus_version,
        n_traces=len(frame.index),
    )


def render_schema(schema: SchemaCache) -> str:
    """Compact text form of the schema cache for agent prompts."""
    lines = [f"corpus: {schema.n_traces} traces, version {schema.corpus_version}"]
    for column in schema.columns:
        line = (
            f"- {column.name} ({column.inferred_type}, null {column.null_rate:.0%}, "
            f"{column.distinct_count} distinct)"
        )
        if column.numeric:
            n = column.numeric
            line += f" min {n.min:g} / mean {n.mean:.3g} / max {n.max:g}"
        elif column.top_values:
            shown = ", ".join(f"{v.value}: {v.count}" for v in column.top_values[:5])
            line += f" top: {shown}"
        lines.append(line)
    if schema.correlations:
        lines.append("notable correlations:")
        for c in schema.correlations:
            lines.append(f"- {c.col_a} ~ {c.col_b}: {c.measure} {c.value:.2f}")
    return "\n".join(lines)
