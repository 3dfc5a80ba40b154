import re
import json
import inspect
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Literal, Optional, get_type_hints

from pydantic import BaseModel, TypeAdapter, ValidationError

from apps.llm.main import LLMGateway
from apps.search.main import TraceIndex, search_traces
from apps.store.main import TraceStore
from apps.store.models import FieldDef, Scalar
from apps.tools import analysis
from apps.tools.models import ExtractionSpec, ToolFailure, ToolResult
from config import SRC_LOG_LEVELS, RunConfig
from constants import ERROR_MESSAGES
from utils.errors import InsightsError, ToolError, ToolForbiddenError
from utils.misc import approximate_tokens
from utils.tools import get_tools_specs

log = logging.getLogger(__name__)
log.setLevel(SRC_LOG_LEVELS["TOOLS"])

SLOT_REF = re.compile(r"^\$(r\d+)(?:\.([A-Za-z0-9_]+))?$")
ALL_ROLES = frozenset({"orchestrator", "scout", "investigator"})

####################
# Availability
####################

TOOL_AVAILABILITY: dict[str, frozenset[str]] = {
    # trace inspection
    "load_traces": ALL_ROLES,
    "get_trace": ALL_ROLES,
    "get_trace_chunk": ALL_ROLES,
    "get_schema": ALL_ROLES,
    "search_traces": ALL_ROLES,
    "get_extractions": ALL_ROLES,
    # llm-driven analysis
    "extract": frozenset({"scout", "investigator"}),
    "summarize_trace": ALL_ROLES,
    "summarize_group": ALL_ROLES,
    "compare_segments": frozenset({"investigator"}),
    # data management
    "save_column": ALL_ROLES,
    "save_affected_traces": frozenset({"investigator"}),
    "reload_data": ALL_ROLES,
    "consolidate": ALL_ROLES,
}

# the untyped generic subagent carries the investigator's toolkit
ROLE_ALIASES = {"subagent": "investigator"}


def availability_role(role: str) -> str:
    return ROLE_ALIASES.get(role, role)


def is_available(name: str, role: str) -> bool:
    return availability_role(role) in TOOL_AVAILABILITY.get(name, frozenset())


####################
# Session
####################


@dataclass
class ToolSession:
    """
    One agent's tool state. Results are kept in numbered slots (r1, r2, ...)
    that later arguments can reference as "$r1" or "$r1.short_id".
    """

    store: TraceStore
    index: TraceIndex
    gateway: LLMGateway
    role: str
    config: RunConfig = field(default_factory=RunConfig)
    summaries: analysis.SummaryCache = field(default_factory=analysis.SummaryCache)
    agent_id: str = ""
    seed: int = 0
    slots: dict[str, Any] = field(default_factory=dict)
    saved_cohorts: dict[str, list[str]] = field(default_factory=dict)
    compare_calls: int = 0

    def next_slot(self) -> str:
        return f"r{len(self.slots) + 1}"

    def resolve(self, value: Any) -> Any:
        if isinstance(value, str):
            match = SLOT_REF.match(value)
            if not match:
                return value
            slot, key = match.groups()
            if slot not in self.slots:
                raise ToolError(ERROR_MESSAGES.UNKNOWN_SLOT(value))
            stored = self.slots[slot]
            if key is None:
                return stored
            if isinstance(stored, dict) and key in stored:
                return stored[key]
            if isinstance(stored, list) and all(isinstance(i, dict) and key in i for i in stored):
                return [item[key] for item in stored]
            raise ToolError(ERROR_MESSAGES.UNKNOWN_SLOT(value))
        if isinstance(value, list):
            return [self.resolve(v) for v in value]
        if isinstance(value, dict):
            return {k: self.resolve(v) for k, v in value.items()}
        return value


####################
# Tools
####################


class AnalysisTools:
    """Handlers for the analysis primitives, bound to one session."""

    def __init__(self, session: ToolSession):
        self._session = session

    @property
    def _store(self) -> TraceStore:
        return self._session.store

    def load_traces(
        self,
        columns: Optional[list[str]] = None,
        where: Optional[dict[str, Scalar]] = None,
        limit: int = 20,
        group_by: Optional[str] = None,
        crosstab: Optional[list[str]] = None,
    ) -> dict:
        """
        Load the corpus columns plus extractions; filter, group or cross-tabulate them.
        :param columns: columns to show; all when omitted
        :param where: equality filters, column -> value
        :param limit: maximum rows shown (all matching short_ids are always returned)
        :param group_by: count rows per value of this column
        :param crosstab: two columns to cross-tabulate with chi-square, Cramér's V and odds ratio
        """
        return self._store.load_traces(columns, where, limit, group_by, crosstab)

    def get_trace(self, short_id: str) -> Any:
        """
        Return the full content of one trace, or its chunk outline if it is oversized.
        :param short_id: trace id, e.g. t07
        """
        return self._store.get_trace(short_id)

    def get_trace_chunk(self, short_id: str, chunk_index: int) -> dict:
        """
        Return one chunk of an oversized trace.
        :param short_id: trace id
        :param chunk_index: zero-based chunk index from the get_trace outline
        """
        content = self._store.get_trace_chunk(short_id, chunk_index)
        return {"short_id": short_id, "chunk_index": chunk_index, "content": content}

    def get_schema(self) -> Any:
        """
        Per-column types, null rates, distributions and notable correlations.
        """
        return self._store.schema

    def search_traces(
        self,
        query: str,
        top_k: int = 20,
        mode: Literal["hybrid", "lexical", "semantic"] = "hybrid",
    ) -> Any:
        """
        Hybrid keyword and semantic retrieval over trace content.
        :param query: free-text query
        :param top_k: maximum number of hits
        :param mode: hybrid, lexical or semantic
        """
        return search_traces(self._session.index, query, top_k, mode)

    def get_extractions(self) -> Any:
        """
        List persisted extraction tables with their field definitions.
        """
        return self._store.get_extractions()

    async def extract(
        self, table_name: str, fields: list[FieldDef], target_short_ids: list[str]
    ) -> Any:
        """
        Structured feature extraction across traces with chunking, batching and checkpointing.
        :param table_name: name of the side table to write
        :param fields: 1 to 12 field definitions {field, semantic_type, description}
        :param target_short_ids: traces to extract from
        """
        spec = ExtractionSpec(table_name=table_name, fields=fields, target_short_ids=target_short_ids)
        return await analysis.extract(spec, self._session.gateway, self._store, self._session.config)

    async def summarize_trace(self, short_id: str) -> dict:
        """
        Cached LLM summary of one trace; long traces are summarized chunk by chunk.
        :param short_id: trace id
        """
        summary = await analysis.summarize_trace(
            short_id, self._session.gateway, self._store, self._session.summaries
        )
        return {"short_id": short_id, "summary": summary}

    async def summarize_group(self, short_ids: list[str]) -> dict:
        """
        One LLM summary characterizing a group of traces.
        :param short_ids: traces in the group
        """
        summary = await analysis.summarize_group(
            short_ids, self._session.gateway, self._store, self._session.summaries
        )
        return {"n_traces": len(set(short_ids)), "summary": summary}

    async def compare_segments(
        self,
        cohort_a_ids: list[str],
        cohort_b_ids: list[str],
        question: str,
        token_budget: Optional[int] = None,
    ) -> Any:
        """
        Deep A/B comparison between two cohorts under a token budget.
        :param cohort_a_ids: traces in cohort A
        :param cohort_b_ids: traces in cohort B
        :param question: what to compare
        :param token_budget: total summary budget shared by both sides
        """
        session = self._session
        seed = session.seed + session.compare_calls
        session.compare_calls += 1
        return await analysis.compare_segments(
            {"cohort_a_ids": cohort_a_ids, "cohort_b_ids": cohort_b_ids, "question": question},
            session.gateway,
            self._store,
            session.summaries,
            token_budget or session.config.compare_token_budget,
            seed,
        )

    def save_column(self, name: str, values: dict[str, Scalar]) -> Any:
        """
        Persist a computed column (short_id -> value) as a side table.
        :param name: column and table name
        :param values: mapping from short_id to a scalar value
        """
        return self._store.save_column(name, values).info()

    def save_affected_traces(self, label: str, short_ids: list[str]) -> Any:
        """
        Persist the trace ids supporting a finding as a named cohort.
        :param label: cohort label, referenced by the finding submission
        :param short_ids: the defensible cohort of affected traces
        """
        cohort = self._store.save_affected_traces(label, short_ids, self._session.agent_id or None)
        self._session.saved_cohorts[label] = cohort.short_ids
        return cohort

    def reload_data(self) -> dict:
        """
        Refresh the cached column view after new extractions land.
        """
        view = self._store.reload_data()
        return {"n_rows": int(len(view.index)), "columns": list(view.columns)}

    def consolidate(self) -> dict:
        """
        Merge extraction tables into the base columns and refresh the schema cache.
        """
        corpus = self._store.consolidate()
        return {"version": corpus.version, "merged_tables": list(corpus.merged_tables)}


####################
# Registry
####################


class ToolEntry(BaseModel):
    name: str
    description: str
    param_schema: dict
    availability: frozenset[str]


def build_registry() -> dict[str, ToolEntry]:
    specs = get_tools_specs(AnalysisTools)
    registry = {}
    for spec in specs:
        parameters = dict(spec["parameters"])
        parameters["properties"] = {
            k: v for k, v in parameters["properties"].items() if k != "self"
        }
        parameters["required"] = [k for k in parameters["required"] if k != "self"]
        registry[spec["name"]] = ToolEntry(
            name=spec["name"],
            description=spec["description"],
            param_schema=parameters,
            availability=TOOL_AVAILABILITY[spec["name"]],
        )
    return registry


TOOL_REGISTRY = build_registry()


def tool_catalog(role: str) -> str:
    """Tool list shown in an agent prompt."""
    lines = []
    for name in TOOL_AVAILABILITY:
        if not is_available(name, role):
            continue
        entry = TOOL_REGISTRY[name]
        params = ", ".join(
            f"{p}{'' if p in entry.param_schema['required'] else '?'}"
            for p in entry.param_schema["properties"]
        )
        lines.append(f"- {name}({params}): {entry.description}")
    return "\n".join(lines)


def jsonable(value: Any) -> Any:
    if isinstance(value, BaseModel):
        return value.model_dump(mode="json")
    if isinstance(value, list):
        return [jsonable(v) for v in value]
    if isinstance(value, dict):
        return {k: jsonable(v) for k, v in value.items()}
    return value


def _bind_args(handler: Callable, name: str, args: dict) -> dict:
    parameters = inspect.signature(handler).parameters
    hints = get_type_hints(handler)
    unknown = sorted(set(args) - set(parameters))
    if unknown:
        raise ToolError(ERROR_MESSAGES.INVALID_TOOL_ARGS(name, f"unknown arguments {unknown}"))

    bound = {}
    for param_name, param in parameters.items():
        if param_name not in args:
            if param.default is param.empty:
                raise ToolError(ERROR_MESSAGES.INVALID_TOOL_ARGS(name, f"missing '{param_name}'"))
            continue
        try:
            bound[param_name] = TypeAdapter(hints.get(param_name, Any)).validate_python(
                args[param_name]
            )
        except ValidationError as e:
            raise ToolError(
                ERROR_MESSAGES.INVALID_TOOL_ARGS(name, f"{param_name}: {e.errors()[0]['msg']}")
            )
    return bound


def _truncate(result: Any, limit_tokens: int, slot: str) -> Any:
    text = json.dumps(result, ensure_ascii=False)
    total = approximate_tokens(text)
    if total <= limit_tokens:
        return result
    return {
        "truncated": True,
        "preview": text[: limit_tokens * 4],
        "marker": f"[truncated: {limit_tokens} of {total} tokens shown; full result in ${slot}]",
    }


async def invoke_tool(session: ToolSession, name: str, args: Optional[dict] = None) -> ToolResult:
    """
    Dispatch one tool call for the session's role. Raises ToolError for unknown
    or forbidden tools and bad arguments; handler errors pass through.
    """
    if name not in TOOL_REGISTRY:
        raise ToolError(ERROR_MESSAGES.UNKNOWN_TOOL(name))
    if not is_available(name, session.role):
        raise ToolForbiddenError(ERROR_MESSAGES.TOOL_FORBIDDEN(name, session.role))
    if args is not None and not isinstance(args, dict):
        raise ToolError(ERROR_MESSAGES.INVALID_TOOL_ARGS(name, "args must be an object"))

    handler = getattr(AnalysisTools(session), name)
    bound = _bind_args(handler, name, session.resolve(args or {}))
    result = handler(**bound)
    if inspect.isawaitable(result):
        result = await result
    result = jsonable(result)

    slot = session.next_slot()
    session.slots[slot] = result
    log.debug(f"{session.agent_id or session.role}: {name} -> ${slot}")
    return ToolResult(
        tool=name,
        slot=slot,
        ok=True,
        result=_truncate(result, session.config.context_injection_tokens, slot),
    )


async def call_tool(session: ToolSession, name: str, args: Optional[dict] = None) -> ToolResult:
    """invoke_tool with every InsightsError folded into an error result for the agent."""
    try:
        return await invoke_tool(session, name, args)
    except InsightsError as e:
        log.info(f"{session.agent_id or session.role}: {name} failed: {e.detail}")
        return ToolResult(tool=name, ok=False, error=ToolFailure(kind=e.kind, detail=e.detail))


def render_tool_result(result: ToolResult) -> str:
    return json.dumps({"tool_result": result.model_dump(exclude_none=True)}, ensure_ascii=False)
