"""
LLM-driven analysis primitives: structured extraction, per-trace and group
summaries, and token-budgeted cohort comparison.
"""

import json
import random
import asyncio
import logging
import threading
from typing import Any, Optional

from pydantic import ValidationError

from apps.llm.main import LLMGateway
from apps.store.main import TraceStore, check_cell
from apps.store.models import FieldDef, Scalar, SemanticType
from apps.tools.models import (
    ComparisonRequest,
    ComparisonResult,
    Difference,
    ExtractionSpec,
    ExtractOutcome,
    SegmentComparison,
)
from config import SRC_LOG_LEVELS, RunConfig
from constants import ERROR_MESSAGES
from utils.errors import LLMError, ToolError
from utils.misc import approximate_tokens
from utils.task import render_prompt

log = logging.getLogger(__name__)
log.setLevel(SRC_LOG_LEVELS["TOOLS"])


def error_field(table_name: str) -> str:
    return f"{table_name}__error"


####################
# Extraction
####################


def _coerce(value: Any, semantic_type: SemanticType) -> Scalar:
    if semantic_type == "int" and isinstance(value, float) and value.is_integer():
        value = int(value)
    if semantic_type in ("category", "text") and isinstance(value, (int, float, bool)):
        value = json.dumps(value)
    return value if check_cell(value, semantic_type) else None


def merge_chunk_rows(
    field_defs: list[FieldDef], chunk_rows: list[dict[str, Any]]
) -> dict[str, Scalar]:
    """Later chunks win per field; bool fields OR across chunks."""
    merged: dict[str, Scalar] = {f.field: None for f in field_defs}
    for row in chunk_rows:
        for field_def in field_defs:
            value = _coerce(row.get(field_def.field), field_def.semantic_type)
            if value is None:
                continue
            if field_def.semantic_type == "bool":
                merged[field_def.field] = bool(merged[field_def.field]) or value
            else:
                merged[field_def.field] = value
    return merged


def _extraction_prompts(
    store: TraceStore, spec: ExtractionSpec, short_id: str
) -> list[str]:
    chunks = store.chunks(short_id) if store.is_oversized(short_id) else [store.content(short_id)]
    fields = json.dumps([f.model_dump() for f in spec.fields], ensure_ascii=False, indent=1)
    return [
        render_prompt(
            "extraction",
            TABLE_NAME=spec.table_name,
            SHORT_ID=short_id,
            CHUNK=f"chunk {i + 1} of {len(chunks)}" if len(chunks) > 1 else "full trace",
            FIELDS=fields,
            CONTENT=chunk,
        )
        for i, chunk in enumerate(chunks)
    ]


async def extract(
    spec: ExtractionSpec | dict,
    gateway: LLMGateway,
    store: TraceStore,
    config: Optional[RunConfig] = None,
) -> ExtractOutcome:
    """
    Run one extraction call per (trace, chunk) and write the merged rows to a
    side table, flushing every autosave_threshold traces and checkpointing
    every checkpoint_interval. Re-running resumes from the flushed rows.
    """
    config = config or gateway.config
    try:
        spec = ExtractionSpec.model_validate(spec)
    except ValidationError as e:
        raise ToolError(ERROR_MESSAGES.EXTRACTION_SPEC(e.errors()[0]["msg"]))
    names = [f.field for f in spec.fields]
    if len(set(names)) != len(names):
        raise ToolError(ERROR_MESSAGES.EXTRACTION_SPEC("duplicate field names"))
    store.check_ids(spec.target_short_ids)

    marker = error_field(spec.table_name)
    field_defs = spec.fields + [
        FieldDef(field=marker, semantic_type="text", description="extraction failure detail")
    ]
    writer = store.begin_extraction(spec.table_name, field_defs)
    if writer.is_finalized:
        table = store.corpus.table(spec.table_name)
        missing = [sid for sid in dict.fromkeys(spec.target_short_ids) if sid not in table.rows]
        if missing:
            raise ToolError(ERROR_MESSAGES.TABLE_FINALIZED(spec.table_name, missing))
        failed = sorted(sid for sid, row in table.rows.items() if row.get(marker))
        log.info(f"{spec.table_name}: already extracted, returning existing table")
        return ExtractOutcome(
            table=table.info(), failed_short_ids=failed, resumed_count=writer.resumed_count
        )

    # rows that failed earlier are retried; completed rows are kept as they are
    targets = [
        sid
        for sid in dict.fromkeys(spec.target_short_ids)
        if sid not in writer.rows or writer.rows[sid].get(marker)
    ]
    kept = sum(1 for row in writer.rows.values() if not row.get(marker))
    failed: list[str] = []
    succeeded = 0
    completed = writer.resumed_count
    next_checkpoint = (completed // config.checkpoint_interval + 1) * config.checkpoint_interval

    for start in range(0, len(targets), config.autosave_threshold):
        window = targets[start : start + config.autosave_threshold]
        prompt_lists = [_extraction_prompts(store, spec, sid) for sid in window]
        flat = [prompt for prompts in prompt_lists for prompt in prompts]
        results = await gateway.complete_batch(
            "extraction", flat, config.extraction_concurrency, "json"
        )

        rows: dict[str, dict[str, Scalar]] = {}
        offset = 0
        for sid, prompts in zip(window, prompt_lists):
            chunk_results = results[offset : offset + len(prompts)]
            offset += len(prompts)
            errors = [r for r in chunk_results if isinstance(r, LLMError)]
            parsed = [r.parsed_json for r in chunk_results if not isinstance(r, LLMError)]
            if not errors and not all(isinstance(p, dict) for p in parsed):
                errors = [ToolError("extraction response was not a JSON object")]
            if errors:
                failed.append(sid)
                rows[sid] = {**{f.field: None for f in spec.fields}, marker: errors[0].detail}
                log.warning(f"{spec.table_name}: extraction failed for {sid}: {errors[0].detail}")
            else:
                succeeded += 1
                rows[sid] = {**merge_chunk_rows(spec.fields, parsed), marker: None}

        writer.append(rows)
        completed += len(window)
        if completed >= next_checkpoint:
            writer.checkpoint()
            next_checkpoint += config.checkpoint_interval

    if targets and succeeded == 0 and kept == 0:
        raise ToolError(ERROR_MESSAGES.EXTRACTION_FAILED(spec.table_name))

    table = writer.finalize()
    return ExtractOutcome(
        table=table.info(),
        failed_short_ids=failed,
        flush_count=writer.flush_count,
        checkpoint_count=writer.checkpoint_count,
        resumed_count=writer.resumed_count,
    )


####################
# Summaries
####################


class SummaryCache:
    """Trace summaries keyed by (short_id, corpus version)."""

    def __init__(self):
        self._items: dict[tuple[str, int], str] = {}
        self._lock = threading.Lock()

    def get(self, short_id: str, version: int) -> Optional[str]:
        with self._lock:
            return self._items.get((short_id, version))

    def put(self, short_id: str, version: int, summary: str) -> None:
        with self._lock:
            self._items[(short_id, version)] = summary

    def __len__(self) -> int:
        return len(self._items)


async def summarize_trace(
    short_id: str, gateway: LLMGateway, store: TraceStore, cache: SummaryCache
) -> str:
    """One call for a short trace; oversized traces get one call per chunk plus a synthesis call."""
    version = store.version
    cached = cache.get(short_id, version)
    if cached is not None:
        return cached

    if not store.is_oversized(short_id):
        completion = await gateway.complete(
            "summarization",
            render_prompt("summarize_trace", SHORT_ID=short_id, CONTENT=store.content(short_id)),
        )
        summary = completion.text.strip()
    else:
        chunks = store.chunks(short_id)
        prompts = [
            render_prompt(
                "summarize_trace",
                SHORT_ID=f"{short_id} (chunk {i + 1} of {len(chunks)})",
                CONTENT=chunk,
            )
            for i, chunk in enumerate(chunks)
        ]
        results = await gateway.complete_batch("summarization", prompts)
        for result in results:
            if isinstance(result, LLMError):
                raise result
        partials = "\n\n".join(
            f"[chunk {i + 1}] {r.text.strip()}" for i, r in enumerate(results)
        )
        completion = await gateway.complete(
            "summarization",
            render_prompt("summarize_chunks", SHORT_ID=short_id, SUMMARIES=partials),
        )
        summary = completion.text.strip()

    cache.put(short_id, version, summary)
    return summary


async def summarize_group(
    short_ids: list[str], gateway: LLMGateway, store: TraceStore, cache: SummaryCache
) -> str:
    short_ids = list(dict.fromkeys(short_ids))
    if not short_ids:
        raise ToolError(ERROR_MESSAGES.EMPTY_GROUP_SUMMARY.value)
    store.check_ids(short_ids)

    summaries = await asyncio.gather(
        *[summarize_trace(sid, gateway, store, cache) for sid in short_ids]
    )
    listing = "\n".join(f"- {sid}: {summary}" for sid, summary in zip(short_ids, summaries))
    completion = await gateway.complete(
        "summarization",
        render_prompt("summarize_group", N=len(short_ids), SUMMARIES=listing),
    )
    return completion.text.strip()


####################
# Cohort comparison
####################


async def _budgeted_sample(
    ids: list[str],
    rng: random.Random,
    budget: int,
    gateway: LLMGateway,
    store: TraceStore,
    cache: SummaryCache,
) -> list[tuple[str, str]]:
    order = rng.sample(ids, len(ids))
    sampled: list[tuple[str, str]] = []
    used = 0
    for sid in order:
        summary = await summarize_trace(sid, gateway, store, cache)
        cost = approximate_tokens(summary)
        if used + cost > budget:
            break
        sampled.append((sid, summary))
        used += cost
    return sampled


async def compare_segments(
    request: ComparisonRequest | dict,
    gateway: LLMGateway,
    store: TraceStore,
    cache: SummaryCache,
    token_budget: int,
    seed: int = 0,
) -> SegmentComparison:
    """
    Sample each cohort (seeded) while its summaries fit in half the token
    budget, then ask for structured differences in a single call.
    """
    request = ComparisonRequest.model_validate(request)
    cohort_a = list(dict.fromkeys(request.cohort_a_ids))
    cohort_b = list(dict.fromkeys(request.cohort_b_ids))
    if not cohort_a:
        raise ToolError(ERROR_MESSAGES.EMPTY_SEGMENT("A"))
    if not cohort_b:
        raise ToolError(ERROR_MESSAGES.EMPTY_SEGMENT("B"))
    store.check_ids(cohort_a + cohort_b)

    half = token_budget // 2
    rng = random.Random(seed)
    sample_a = await _budgeted_sample(cohort_a, rng, half, gateway, store, cache)
    sample_b = await _budgeted_sample(cohort_b, rng, half, gateway, store, cache)
    if not sample_a or not sample_b:
        raise ToolError(ERROR_MESSAGES.BUDGET_TOO_SMALL(token_budget))

    overlap = sorted(set(cohort_a) & set(cohort_b))
    if overlap:
        log.info(f"compare_segments: {len(overlap)} traces appear in both cohorts")

    completion = await gateway.complete(
        "cohort_compare",
        render_prompt(
            "compare_segments",
            QUESTION=request.question,
            N_A=len(sample_a),
            N_B=len(sample_b),
            COHORT_A="\n".join(f"- {sid}: {s}" for sid, s in sample_a),
            COHORT_B="\n".join(f"- {sid}: {s}" for sid, s in sample_b),
        ),
        expected_format="json",
    )
    parsed = completion.parsed_json if isinstance(completion.parsed_json, dict) else {}
    differences = []
    for item in parsed.get("differences") or []:
        try:
            differences.append(Difference.model_validate(item))
        except ValidationError:
            log.warning(f"compare_segments: dropping malformed difference {item!r}")

    return SegmentComparison(
        cohort_a_ids=cohort_a,
        cohort_b_ids=cohort_b,
        question=request.question,
        result=ComparisonResult(
            narrative=str(parsed.get("narrative", completion.text)),
            differences=differences,
            sampled_ids_a=[sid for sid, _ in sample_a],
            sampled_ids_b=[sid for sid, _ in sample_b],
        ),
        overlap_ids=overlap,
    )
