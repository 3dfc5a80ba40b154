import re
import json
import time
import logging
import threading
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Iterable, Optional

import pandas as pd
from pydantic import BaseModel, ValidationError

from apps.stats.main import chi_square, contingency_from_pairs, cramers_v, odds_ratio
from apps.store.models import (
    ChunkInfo,
    Cohort,
    ExtractionInfo,
    ExtractionTable,
    FieldDef,
    RawTrace,
    SchemaCache,
    Scalar,
    SemanticType,
    TraceEvent,
    TraceRecord,
    TraceView,
)
from apps.store.schema import build_schema_cache, infer_type, is_null, json_value
from config import CHUNK_THRESHOLD_TOKENS, NOTABLE_CORRELATION, SRC_LOG_LEVELS
from constants import ERROR_MESSAGES
from utils.errors import IngestionError, NotFoundError, StatisticsError, StoreError
from utils.misc import (
    TokenCounter,
    approximate_tokens,
    dumps_stable,
    flatten_metadata,
    read_jsonl,
    write_atomic,
    write_json_atomic,
)
from utils.task import first_line_preview

log = logging.getLogger(__name__)
log.setLevel(SRC_LOG_LEVELS["STORE"])

DERIVED_COLUMNS = ("token_count", "event_count")
NAME_PATTERN = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.\-]{0,127}$")
ID_FIELDS = {
    "short_id",
    "trace_id",
    "short_ids",
    "trace_ids",
    "affected_trace_ids",
    "representative_ids",
    "cohort_a_ids",
    "cohort_b_ids",
    "sampled_ids_a",
    "sampled_ids_b",
}


####################
# Corpus
####################


@dataclass(frozen=True)
class TraceCorpus:
    """Immutable published view of the store; writers replace it wholesale."""

    traces: tuple[TraceRecord, ...]
    id_map: dict[str, str]
    base_columns: pd.DataFrame
    extraction_tables: tuple[ExtractionTable, ...] = ()
    merged_tables: tuple[str, ...] = ()
    version: int = 1

    @property
    def by_short_id(self) -> dict[str, TraceRecord]:
        return {t.short_id: t for t in self.traces}

    def table(self, name: str) -> Optional[ExtractionTable]:
        return next((t for t in self.extraction_tables if t.name == name), None)

    @property
    def label_columns(self) -> list[str]:
        labels = []
        metadata_columns = [c for c in self.base_columns.columns if c not in DERIVED_COLUMNS]
        for column in metadata_columns:
            values = [v for v in self.base_columns[column].tolist() if not is_null(v)]
            if values and infer_type(values) == "bool":
                labels.append(column)
        return labels


def _short_ids(n: int) -> list[str]:
    width = len(str(n))
    return [f"t{i:0{width}d}" for i in range(1, n + 1)]


def ingest_corpus(
    records: Iterable[dict], counter: Optional[TokenCounter] = None
) -> TraceCorpus:
    """
    Validate raw trace objects and assign short ids "t1".."tN" (zero-padded to
    the width of N) in ingestion order.
    """
    parsed: list[tuple[RawTrace, list[TraceEvent]]] = []
    seen: set[str] = set()
    for index, record in enumerate(records):
        try:
            raw = RawTrace.model_validate(record)
        except ValidationError as e:
            raise IngestionError(ERROR_MESSAGES.INVALID_RECORD(index, e.errors()[0]["msg"]))
        if raw.id in seen:
            raise IngestionError(ERROR_MESSAGES.DUPLICATE_TRACE_ID(raw.id))
        seen.add(raw.id)

        if raw.events:
            events = [
                TraceEvent(index=i, role=e.role, kind=e.kind, content=e.content)
                for i, e in enumerate(raw.events)
            ]
        elif raw.content:
            events = [TraceEvent(index=0, role="assistant", kind="output", content=raw.content)]
        else:
            raise IngestionError(ERROR_MESSAGES.EMPTY_TRACE(index))
        parsed.append((raw, events))

    if not parsed:
        raise IngestionError(ERROR_MESSAGES.EMPTY_CORPUS.value)

    traces = []
    for short_id, (raw, events) in zip(_short_ids(len(parsed)), parsed):
        metadata = flatten_metadata(raw.metadata)
        for column in DERIVED_COLUMNS:
            if column in metadata:
                log.warning(f"{raw.id}: metadata column '{column}' shadowed by derived column")
                metadata.pop(column)
        trace = TraceRecord(
            original_id=raw.id,
            short_id=short_id,
            events=events,
            metadata=metadata,
            token_count=1,
        )
        trace.token_count = approximate_tokens(trace.content, counter)
        traces.append(trace)

    log.info(f"ingested {len(traces)} traces")
    return TraceCorpus(
        traces=tuple(traces),
        id_map={t.short_id: t.original_id for t in traces},
        base_columns=_base_frame(traces),
    )


def _base_frame(traces: Iterable[TraceRecord]) -> pd.DataFrame:
    traces = list(traces)
    columns: dict[str, None] = {}
    for trace in traces:
        for key in trace.metadata:
            columns.setdefault(key, None)
    index = pd.Index([t.short_id for t in traces], name="short_id")
    # object series keep ints with nulls as ints rather than float64 with NaN
    data = {
        key: pd.Series([t.metadata.get(key) for t in traces], index=index, dtype=object)
        for key in columns
    }
    data["token_count"] = pd.Series([t.token_count for t in traces], index=index, dtype=object)
    data["event_count"] = pd.Series([len(t.events) for t in traces], index=index, dtype=object)
    return pd.DataFrame(data, index=index)


def _join_tables(frame: pd.DataFrame, tables: Iterable[ExtractionTable]) -> pd.DataFrame:
    # fields colliding with a column already in the frame are qualified as "<table>.<field>"
    frame = frame.copy()
    existing = set(frame.columns)
    for table in tables:
        for field_def in table.field_defs:
            column = field_def.field
            if column in existing:
                column = f"{table.name}.{field_def.field}"
            frame[column] = pd.Series(
                [table.rows.get(sid, {}).get(field_def.field) for sid in frame.index],
                index=frame.index,
                dtype=object,
            )
    return frame


def _declared_types(corpus: TraceCorpus) -> dict[str, SemanticType]:
    declared: dict[str, SemanticType] = {}
    for table in corpus.extraction_tables:
        for field_def in table.field_defs:
            declared.setdefault(field_def.field, field_def.semantic_type)
            declared[f"{table.name}.{field_def.field}"] = field_def.semantic_type
    return declared


####################
# Chunking
####################


def _max_prefix(text: str, threshold: int, counter: Optional[TokenCounter]) -> int:
    if counter is None:
        return threshold * 4
    lo, hi = 1, len(text)
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if approximate_tokens(text[:mid], counter) <= threshold:
            lo = mid
        else:
            hi = mid - 1
    return lo


def split_into_chunks(
    segments: list[str], threshold: int, counter: Optional[TokenCounter] = None
) -> list[str]:
    """
    Pack segments greedily into chunks of at most `threshold` tokens, breaking
    only at segment boundaries unless a single segment exceeds the threshold.
    """
    chunks: list[str] = []
    current = ""
    for segment in segments:
        if approximate_tokens(current + segment, counter) <= threshold:
            current += segment
            continue
        if current:
            chunks.append(current)
            current = ""
        while approximate_tokens(segment, counter) > threshold:
            cut = _max_prefix(segment, threshold, counter)
            chunks.append(segment[:cut])
            segment = segment[cut:]
        current = segment
    if current:
        chunks.append(current)
    return chunks


####################
# Extraction writer
####################


def check_cell(value: Any, semantic_type: SemanticType) -> bool:
    if value is None:
        return True
    if semantic_type == "bool":
        return isinstance(value, bool)
    if semantic_type == "int":
        return isinstance(value, int) and not isinstance(value, bool)
    if semantic_type == "float":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    return isinstance(value, str)


def _check_rows(field_defs: list[FieldDef], rows: dict[str, dict[str, Scalar]]) -> None:
    types = {f.field: f.semantic_type for f in field_defs}
    for short_id, row in rows.items():
        for field, value in row.items():
            if field not in types:
                raise StoreError(ERROR_MESSAGES.INVALID_CELL(short_id, field, "not in field_defs"))
            if not check_cell(value, types[field]):
                raise StoreError(
                    ERROR_MESSAGES.INVALID_CELL(short_id, field, f"expected {types[field]}")
                )


class ExtractionWriter:
    """
    Resumable writer for one side table: rows are appended in batches
    (auto-save flushes), checkpoints record progress, finalize registers the table.
    """

    def __init__(
        self,
        store: "TraceStore",
        name: str,
        field_defs: list[FieldDef],
        provenance: str,
        rows: Optional[dict[str, dict[str, Scalar]]] = None,
        finalized: Optional[ExtractionTable] = None,
    ):
        self.store = store
        self.name = name
        self.field_defs = field_defs
        self.provenance = provenance
        self.rows: dict[str, dict[str, Scalar]] = dict(rows or {})
        self.resumed_count = len(self.rows)
        self.flush_count = 0
        self.checkpoint_count = 0
        self._finalized = finalized

    @property
    def completed_ids(self) -> set[str]:
        return set(self.rows)

    @property
    def is_finalized(self) -> bool:
        return self._finalized is not None

    def append(self, rows: dict[str, dict[str, Scalar]]) -> None:
        if not rows:
            return
        _check_rows(self.field_defs, rows)
        self.rows.update(rows)
        path = self.store.table_path(self.name)
        if path is not None:
            with open(path, "a", encoding="utf-8") as f:
                for short_id, row in rows.items():
                    f.write(json.dumps({"short_id": short_id, **row}, ensure_ascii=False) + "\n")
        self.flush_count += 1
        log.info(f"{self.name}: flushed {len(rows)} rows ({len(self.rows)} total)")

    def checkpoint(self) -> None:
        path = self.store.checkpoint_path(self.name)
        if path is not None:
            write_json_atomic(path, {"completed": len(self.rows), "finalized": False})
        self.checkpoint_count += 1
        log.info(f"{self.name}: checkpoint at {len(self.rows)} rows")

    def finalize(self) -> ExtractionTable:
        if self._finalized is not None:
            return self._finalized
        table = ExtractionTable(
            name=self.name,
            field_defs=self.field_defs,
            rows=self.rows,
            provenance=self.provenance,
            created_at=int(time.time()),
        )
        path = self.store.checkpoint_path(self.name)
        if path is not None:
            write_json_atomic(path, {"completed": len(self.rows), "finalized": True})
        self._finalized = self.store._register(table)
        return self._finalized


####################
# Store
####################


class TraceStore:
    """
    Trace corpus plus its on-disk side tables and cohorts.

    Reads go through the current immutable TraceCorpus snapshot; writers
    (save_column, save_affected_traces, consolidate, extraction finalize) are
    serialized under one lock and publish a new snapshot.
    """

    def __init__(
        self,
        corpus: TraceCorpus,
        store_dir: Optional[str | Path] = None,
        chunk_threshold: int = CHUNK_THRESHOLD_TOKENS,
        notable_threshold: float = NOTABLE_CORRELATION,
        counter: Optional[TokenCounter] = None,
        cohorts: Optional[dict[str, Cohort]] = None,
    ):
        self.store_dir = Path(store_dir) if store_dir else None
        self.chunk_threshold = chunk_threshold
        self.notable_threshold = notable_threshold
        self.counter = counter
        self._corpus = corpus
        self._cohorts: dict[str, Cohort] = dict(cohorts or {})
        self._lock = threading.RLock()
        self._chunks: dict[str, list[str]] = {}
        self._schema: Optional[SchemaCache] = None
        self._view = _join_tables(corpus.base_columns, self._unmerged(corpus))

    ####################
    # Construction / persistence
    ####################

    @classmethod
    def create(
        cls, records: Iterable[dict], store_dir: Optional[str | Path] = None, **kwargs
    ) -> "TraceStore":
        corpus = ingest_corpus(records, kwargs.get("counter"))
        store = cls(corpus, store_dir, **kwargs)
        if store.store_dir is not None:
            store.store_dir.mkdir(parents=True, exist_ok=True)
            write_atomic(
                store.store_dir / "traces.jsonl",
                "".join(
                    json.dumps(t.model_dump(), ensure_ascii=False) + "\n" for t in corpus.traces
                ),
            )
            store._write_manifest()
        return store

    @classmethod
    def open(cls, store_dir: str | Path, **kwargs) -> "TraceStore":
        store_dir = Path(store_dir)
        manifest_path = store_dir / "manifest.json"
        if not manifest_path.exists():
            raise NotFoundError(ERROR_MESSAGES.STORE_NOT_FOUND(str(store_dir)))
        manifest = json.loads(manifest_path.read_text())

        traces = tuple(
            TraceRecord.model_validate(obj) for _, obj in read_jsonl(store_dir / "traces.jsonl")
        )
        tables = tuple(_read_table(store_dir / "extractions" / f"{n}.jsonl") for n in manifest["tables"])
        merged = tuple(manifest.get("merged_tables", []))
        base = _join_tables(_base_frame(traces), [t for t in tables if t.name in merged])
        corpus = TraceCorpus(
            traces=traces,
            id_map={t.short_id: t.original_id for t in traces},
            base_columns=base,
            extraction_tables=tables,
            merged_tables=merged,
            version=manifest["version"],
        )

        cohorts = {}
        cohort_dir = store_dir / "cohorts"
        if cohort_dir.exists():
            for path in sorted(cohort_dir.glob("*.json")):
                cohort = Cohort.model_validate_json(path.read_text())
                cohorts[cohort.label] = cohort

        log.info(f"opened store {store_dir}: {len(traces)} traces, version {corpus.version}")
        return cls(corpus, store_dir, cohorts=cohorts, **kwargs)

    def _write_manifest(self) -> None:
        if self.store_dir is None:
            return
        corpus = self._corpus
        write_json_atomic(
            self.store_dir / "manifest.json",
            {
                "version": corpus.version,
                "n_traces": len(corpus.traces),
                "tables": [t.name for t in corpus.extraction_tables],
                "merged_tables": list(corpus.merged_tables),
            },
        )

    def table_path(self, name: str) -> Optional[Path]:
        return self.store_dir / "extractions" / f"{name}.jsonl" if self.store_dir else None

    def checkpoint_path(self, name: str) -> Optional[Path]:
        return self.store_dir / "extractions" / f"{name}.checkpoint.json" if self.store_dir else None

    ####################
    # Reads
    ####################

    @property
    def corpus(self) -> TraceCorpus:
        return self._corpus

    @property
    def version(self) -> int:
        return self._corpus.version

    @property
    def schema(self) -> SchemaCache:
        corpus = self._corpus
        schema = self._schema
        if schema is None or schema.corpus_version != corpus.version:
            schema = self.build_schema_cache(corpus)
            self._schema = schema
        return schema

    def build_schema_cache(self, corpus: Optional[TraceCorpus] = None) -> SchemaCache:
        corpus = corpus or self._corpus
        frame = _join_tables(corpus.base_columns, self._unmerged(corpus))
        return build_schema_cache(
            frame, corpus.version, self.notable_threshold, _declared_types(corpus)
        )

    def _trace(self, short_id: str) -> TraceRecord:
        trace = self._corpus.by_short_id.get(short_id)
        if trace is None:
            raise NotFoundError(ERROR_MESSAGES.TRACE_NOT_FOUND(short_id))
        return trace

    def content(self, short_id: str) -> str:
        return self._trace(short_id).content

    def chunks(self, short_id: str) -> list[str]:
        cached = self._chunks.get(short_id)
        if cached is not None:
            return cached
        trace = self._trace(short_id)
        chunks = split_into_chunks(trace.segments, self.chunk_threshold, self.counter)
        # first writer wins so concurrent callers share one list
        with self._lock:
            return self._chunks.setdefault(short_id, chunks)

    def is_oversized(self, short_id: str) -> bool:
        return self._trace(short_id).token_count > self.chunk_threshold

    def get_trace(self, short_id: str) -> TraceView:
        trace = self._trace(short_id)
        if trace.token_count <= self.chunk_threshold:
            return TraceView(
                short_id=short_id,
                token_count=trace.token_count,
                oversized=False,
                content=trace.content,
            )
        chunks = self.chunks(short_id)
        return TraceView(
            short_id=short_id,
            token_count=trace.token_count,
            oversized=True,
            chunk_count=len(chunks),
            chunks=[
                ChunkInfo(
                    index=i,
                    tokens=approximate_tokens(chunk, self.counter),
                    preview=first_line_preview(chunk),
                )
                for i, chunk in enumerate(chunks)
            ],
        )

    def get_trace_chunk(self, short_id: str, chunk_index: int) -> str:
        if not self.is_oversized(short_id):
            raise StoreError(ERROR_MESSAGES.NOT_CHUNKED(short_id))
        chunks = self.chunks(short_id)
        if not 0 <= chunk_index < len(chunks):
            raise StoreError(ERROR_MESSAGES.CHUNK_OUT_OF_RANGE(chunk_index, len(chunks)))
        return chunks[chunk_index]

    def get_extractions(self) -> list[ExtractionInfo]:
        return [table.info() for table in self._corpus.extraction_tables]

    def get_cohort(self, label: str) -> Cohort:
        cohort = self._cohorts.get(label)
        if cohort is None:
            raise NotFoundError(ERROR_MESSAGES.COHORT_NOT_FOUND(label))
        return cohort

    def list_cohorts(self) -> list[str]:
        return sorted(self._cohorts)

    @property
    def view(self) -> pd.DataFrame:
        """Cached column view as of the last reload_data."""
        return self._view

    def _unmerged(self, corpus: TraceCorpus) -> list[ExtractionTable]:
        return [t for t in corpus.extraction_tables if t.name not in corpus.merged_tables]

    def reload_data(self) -> pd.DataFrame:
        corpus = self._corpus
        self._view = _join_tables(corpus.base_columns, self._unmerged(corpus))
        return self._view

    def load_traces(
        self,
        columns: Optional[list[str]] = None,
        where: Optional[dict[str, Any]] = None,
        limit: int = 20,
        group_by: Optional[str] = None,
        crosstab: Optional[list[str]] = None,
    ) -> dict:
        """Select rows from the cached view and optionally group or cross-tabulate them."""
        frame = self._view
        referenced = list(columns or []) + list(where or {}) + ([group_by] if group_by else [])
        referenced += list(crosstab or [])
        unknown = [c for c in referenced if c not in frame.columns]
        if unknown:
            raise StoreError(ERROR_MESSAGES.UNKNOWN_COLUMNS(unknown))

        mask = pd.Series(True, index=frame.index)
        for column, expected in (where or {}).items():
            mask &= frame[column].map(lambda v: _same_value(json_value(v), expected))
        selected = frame[mask]
        result: dict[str, Any] = {
            "n_rows": int(len(selected.index)),
            "short_ids": list(selected.index),
        }

        if group_by:
            counts: dict[str, int] = {}
            for value in selected[group_by].tolist():
                key = json.dumps(json_value(value))
                counts[key] = counts.get(key, 0) + 1
            result["group_by"] = group_by
            result["counts"] = dict(sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])))
        elif crosstab:
            result["crosstab"] = _crosstab(selected, crosstab)
        else:
            shown = columns or list(frame.columns)
            result["rows"] = [
                {"short_id": sid, **{c: json_value(selected.at[sid, c]) for c in shown}}
                for sid in list(selected.index)[: max(0, limit)]
            ]
        return result

    ####################
    # Writes
    ####################

    def check_ids(self, short_ids: Iterable[str]) -> None:
        known = self._corpus.id_map
        unknown = sorted({sid for sid in short_ids if sid not in known})
        if unknown:
            raise StoreError(ERROR_MESSAGES.UNKNOWN_SHORT_IDS(unknown))

    def _check_name(self, name: str) -> None:
        if not NAME_PATTERN.match(name or "") or name.endswith(".checkpoint"):
            raise StoreError(ERROR_MESSAGES.INVALID_TABLE_NAME(name))

    def _register(self, table: ExtractionTable) -> ExtractionTable:
        with self._lock:
            corpus = self._corpus
            if corpus.table(table.name) is not None:
                raise StoreError(ERROR_MESSAGES.TABLE_NAME_TAKEN(table.name))
            self._corpus = replace(corpus, extraction_tables=corpus.extraction_tables + (table,))
            self._write_manifest()
        log.info(f"registered extraction table {table.name} ({len(table.rows)} rows)")
        return table

    def save_column(self, name: str, values: dict[str, Scalar]) -> ExtractionTable:
        """Persist a computed column as a side table; visible after reload_data."""
        self._check_name(name)
        with self._lock:
            path = self.table_path(name)
            if self._corpus.table(name) is not None or (path is not None and path.exists()):
                raise StoreError(ERROR_MESSAGES.TABLE_NAME_TAKEN(name))
            self.check_ids(values)

            present = [v for v in values.values() if v is not None]
            field_defs = [FieldDef(field=name, semantic_type=infer_type(present), description="")]
            rows = {sid: {name: value} for sid, value in values.items()}
            _check_rows(field_defs, rows)
            table = ExtractionTable(
                name=name,
                field_defs=field_defs,
                rows=rows,
                provenance="computed_column",
                created_at=int(time.time()),
            )
            if path is not None:
                write_atomic(path, _table_text(table))
            return self._register(table)

    def begin_extraction(
        self, name: str, field_defs: list[FieldDef], provenance: str = "llm_extraction"
    ) -> ExtractionWriter:
        self._check_name(name)
        with self._lock:
            existing = self._corpus.table(name)
            if existing is not None:
                if existing.field_defs != field_defs:
                    raise StoreError(ERROR_MESSAGES.TABLE_SCHEMA_MISMATCH(name))
                return ExtractionWriter(
                    self, name, field_defs, provenance, existing.rows, finalized=existing
                )

            path = self.table_path(name)
            if path is not None and path.exists():
                partial = _read_table(path)
                if partial.field_defs != field_defs:
                    raise StoreError(ERROR_MESSAGES.TABLE_SCHEMA_MISMATCH(name))
                log.info(f"{name}: resuming extraction with {len(partial.rows)} completed rows")
                return ExtractionWriter(self, name, field_defs, provenance, partial.rows)

            if path is not None:
                header = ExtractionTable(
                    name=name,
                    field_defs=field_defs,
                    provenance=provenance,
                    created_at=int(time.time()),
                )
                write_atomic(path, _table_text(header))
            return ExtractionWriter(self, name, field_defs, provenance)

    def save_affected_traces(
        self, label: str, short_ids: list[str], source_finding: Optional[str] = None
    ) -> Cohort:
        self._check_name(label)
        if not short_ids:
            raise StoreError(ERROR_MESSAGES.EMPTY_COHORT.value)
        self.check_ids(short_ids)
        cohort = Cohort(
            label=label,
            short_ids=list(dict.fromkeys(short_ids)),
            source_finding=source_finding,
            created_at=int(time.time()),
        )
        with self._lock:
            if label in self._cohorts:
                log.info(f"cohort {label} replaced")
            self._cohorts[label] = cohort
            if self.store_dir is not None:
                write_atomic(
                    self.store_dir / "cohorts" / f"{label}.json", cohort.model_dump_json(indent=2)
                )
        return cohort

    def consolidate(self) -> TraceCorpus:
        """Merge pending side tables into the base columns, bump the version, rebuild the schema."""
        with self._lock:
            corpus = self._corpus
            pending = self._unmerged(corpus)
            updated = replace(
                corpus,
                base_columns=_join_tables(corpus.base_columns, pending),
                merged_tables=corpus.merged_tables + tuple(t.name for t in pending),
                version=corpus.version + 1,
            )
            self._schema = self.build_schema_cache(updated)
            self._corpus = updated
            self._write_manifest()
            self.reload_data()
        log.info(f"consolidated {len(pending)} tables, corpus version {updated.version}")
        return updated

    ####################
    # Id mapping
    ####################

    def remap_trace_ids(self, obj: Any) -> Any:
        return remap_trace_ids(obj, self._corpus.id_map)

    def resolve_original_id(self, original_id: str) -> Optional[str]:
        for short_id, original in self._corpus.id_map.items():
            if original == original_id:
                return short_id
        return None


def _same_value(value: Any, expected: Any) -> bool:
    if isinstance(value, bool) or isinstance(expected, bool):
        return type(value) is type(expected) and value == expected
    return value == expected


def _crosstab(frame: pd.DataFrame, columns: list[str]) -> dict:
    if len(columns) != 2:
        raise StoreError(ERROR_MESSAGES.UNKNOWN_COLUMNS(columns))
    row_col, col_col = columns
    pairs = [
        (json_value(r), json_value(c))
        for r, c in zip(frame[row_col].tolist(), frame[col_col].tolist())
        if not is_null(r) and not is_null(c)
    ]
    table = contingency_from_pairs(pairs)
    result: dict[str, Any] = {"rows": row_col, "cols": col_col, **table.model_dump()}
    try:
        result["chi_square"] = chi_square(table).model_dump()
        result["cramers_v"] = cramers_v(table)
        if len(table.row_labels) == 2 and len(table.col_labels) == 2:
            result["odds_ratio"] = odds_ratio(table)
    except StatisticsError as e:
        result["statistics_error"] = e.detail
    return result


def _table_text(table: ExtractionTable) -> str:
    header = {"__table__": table.model_dump(exclude={"rows"})}
    lines = [json.dumps(header, ensure_ascii=False)]
    lines += [
        json.dumps({"short_id": sid, **row}, ensure_ascii=False) for sid, row in table.rows.items()
    ]
    return "\n".join(lines) + "\n"


def _read_table(path: Path) -> ExtractionTable:
    header: Optional[dict] = None
    rows: dict[str, dict[str, Scalar]] = {}
    for _, obj in read_jsonl(path):
        if "__table__" in obj:
            header = obj["__table__"]
            continue
        short_id = obj.pop("short_id")
        rows[short_id] = obj
    if header is None:
        raise StoreError(ERROR_MESSAGES.INVALID_TABLE_NAME(path.stem))
    return ExtractionTable(**{**header, "rows": rows})


def remap_trace_ids(obj: Any, id_map: dict[str, str]) -> Any:
    """
    Structural copy of obj with every id field (short_id, trace_id,
    affected_trace_ids, ...) mapped short -> original. Unmapped ids raise.
    """
    missing: list[str] = []

    def _map(value: Any) -> Any:
        if isinstance(value, str):
            if value not in id_map:
                missing.append(value)
                return value
            return id_map[value]
        if isinstance(value, list):
            return [_map(v) for v in value]
        return value

    def _walk(value: Any) -> Any:
        if isinstance(value, dict):
            return {
                key: _map(item) if key in ID_FIELDS else _walk(item) for key, item in value.items()
            }
        if isinstance(value, list):
            return [_walk(item) for item in value]
        return value

    if isinstance(obj, BaseModel):
        remapped = obj.__class__.model_validate(_walk(obj.model_dump()))
    else:
        remapped = _walk(obj)
    if missing:
        raise StoreError(ERROR_MESSAGES.UNMAPPED_IDS(sorted(set(missing))))
    return remapped
