from enum import Enum


class MESSAGES(str, Enum):
    DEFAULT = lambda msg="": f"{msg if msg else ''}"
    INGESTED = lambda n=0, path="": f"Ingested {n} traces into {path}"
    REPORT_WRITTEN = lambda path="": f"Report written to {path}"
    NO_FINDINGS = "No confirmed findings were produced for this query."
    SYNTHESIS_PLACEHOLDER = (
        "Synthesis unavailable: the narrative could not be generated. "
        "Findings below are listed as validated."
    )
    FORCED_SYNTHESIS = "Orchestrator turn limit reached; report synthesized from accumulated findings."


class ERROR_MESSAGES(str, Enum):
    def __str__(self) -> str:
        return super().__str__()

    DEFAULT = lambda err="": f"Something went wrong :/\n{err if err else ''}"

    # config
    FILE_NOT_FOUND = lambda path="": f"File not found: {path}"
    INVALID_JSON_FILE = lambda path="", err="": f"Invalid JSON in {path}: {err}"
    INVALID_CONFIG = lambda err="": f"Invalid configuration: {err}"
    INVALID_ENV_JSON = lambda var="": f"Environment variable {var} must hold JSON"
    UNKNOWN_ROLES = lambda roles=(): f"Unknown model roles: {', '.join(roles)}"

    # store
    STORE_NOT_FOUND = lambda path="": f"No trace store found at {path}"
    EMPTY_CORPUS = "The corpus is empty. Ingest at least one trace first."
    DUPLICATE_TRACE_ID = lambda trace_id="": f"Duplicate trace id '{trace_id}'"
    MISSING_TRACE_ID = lambda index=0: f"Record {index} has no 'id'"
    EMPTY_TRACE = lambda index=0: f"Record {index} has no events and no content"
    INVALID_RECORD = lambda index=0, err="": f"Record {index} is invalid: {err}"
    TRACE_NOT_FOUND = lambda short_id="": f"Trace '{short_id}' was not found"
    UNKNOWN_SHORT_IDS = lambda ids=(): f"Unknown trace ids: {', '.join(ids)}"
    UNMAPPED_IDS = lambda ids=(): f"Trace ids without a mapping: {', '.join(ids)}"
    CHUNK_OUT_OF_RANGE = (
        lambda index=0, count=0: f"Chunk index {index} out of range; valid range is 0..{count - 1}"
    )
    NOT_CHUNKED = (
        lambda short_id="": f"Trace '{short_id}' is not chunked; use get_trace to read it in full"
    )
    TABLE_NAME_TAKEN = lambda name="": f"Extraction table '{name}' already exists"
    TABLE_FINALIZED = lambda name="", missing=[]: (
        f"Extraction table '{name}' is already finalized and has no rows for {missing}; "
        "extract them into a new table"
    )
    TABLE_SCHEMA_MISMATCH = (
        lambda name="": f"Extraction table '{name}' exists with different field definitions"
    )
    INVALID_TABLE_NAME = lambda name="": f"Invalid table or cohort name '{name}'"
    INVALID_CELL = (
        lambda short_id="", field="", err="": f"Row '{short_id}' field '{field}': {err}"
    )
    EMPTY_COHORT = "A cohort must contain at least one trace id"
    COHORT_NOT_FOUND = lambda label="": f"Cohort '{label}' was not found"
    UNKNOWN_COLUMNS = lambda cols=(): f"Unknown columns: {', '.join(cols)}"

    # search
    EMPTY_QUERY = "The search query is empty."
    INVALID_TOP_K = lambda top_k=0: f"top_k must be positive, got {top_k}"
    INVALID_SEARCH_MODE = lambda mode="": f"Unknown search mode '{mode}'"
    EMBEDDING_FAILED = lambda short_id="", err="": f"Embedding failed for trace '{short_id}': {err}"
    EMBEDDING_DIMENSION = (
        lambda expected=0, got=0: f"Embedder returned dimension {got}, expected {expected}"
    )

    # stats
    TABLE_SHAPE = lambda shape="": f"Contingency table must be at least 2x2, got {shape}"
    NOT_2X2 = lambda shape="": f"Odds ratio needs a 2x2 table, got {shape}"
    NEGATIVE_COUNTS = "Contingency counts must be non-negative integers"
    ZERO_MARGINAL = "Contingency table has an all-zero row or column"
    WELCH_PRECONDITION = lambda err="": f"Welch test precondition failed: {err}"
    EMPTY_GROUP = "Both groups must be nonempty"
    NON_FINITE = lambda name="": f"{name} did not converge to a finite value"
    UNKNOWN_TEST = lambda test="": f"Unknown statistical test '{test}'"
    MISSING_FIELD = lambda field="": f"Payload is missing field {field}"

    # llm
    ROLE_NOT_ROUTED = lambda role="": f"No model route for role '{role}'"
    EMPTY_PROMPT = "The prompt is empty."
    LLM_TIMEOUT = lambda role="", seconds=0: f"Model call for role '{role}' timed out after {seconds}s"
    LLM_BACKEND = lambda role="", err="": f"Model backend failed for role '{role}': {err}"
    LLM_PARSE = lambda role="": f"Model response for role '{role}' contained no valid JSON"
    INVALID_MAX_PARALLEL = lambda n=0: f"max_parallel must be at least 1, got {n}"
    INVALID_MOCK_SCRIPT = lambda err="": f"Invalid mock script: {err}"

    # tools
    UNKNOWN_TOOL = lambda name="": f"Unknown tool '{name}'"
    TOOL_FORBIDDEN = lambda name="", role="": f"Tool '{name}' is not available to {role}"
    INVALID_TOOL_ARGS = lambda name="", err="": f"Invalid arguments for '{name}': {err}"
    UNKNOWN_SLOT = lambda ref="": f"Unknown result slot '{ref}'"
    EXTRACTION_SPEC = lambda err="": f"Invalid extraction spec: {err}"
    EXTRACTION_FAILED = lambda name="": f"Extraction '{name}' failed for every target trace"
    EMPTY_GROUP_SUMMARY = "summarize_group needs at least one trace id"
    EMPTY_SEGMENT = lambda side="": f"Cohort {side} is empty"
    BUDGET_TOO_SMALL = (
        lambda budget=0: f"Token budget {budget} cannot fit one trace summary per side"
    )

    # agents
    ILLEGAL_ACTION = lambda action="", mode="": f"Action '{action}' is not allowed in mode '{mode}'"
    UNKNOWN_ACTION = lambda action="": f"Unknown orchestrator action '{action}'"
    ANALYSIS_ABORTED = lambda err="": f"Analysis aborted: {err}"

    # eval
    JUDGE_INVALID = lambda err="": f"Judge output failed validation: {err}"
    NO_REPORTS = "At least one report is required"
    NO_CLUSTERS = "At least one cluster is required"
    TOO_FEW_SYSTEMS = "A tournament needs at least two systems"
    SYSTEM_NOT_IN_ROUNDS = lambda system="": f"System '{system}' does not appear in any round"
    INVALID_REPORT_REF = (
        lambda ref="": f"Invalid report reference '{ref}', expected SYSTEM:FOLD:PATH"
    )

    # loop
    ADAPTER_UNHEALTHY = lambda name="", err="": f"Adapter '{name}' failed its health probe: {err}"
    ADAPTER_FAILED = lambda step="", round=0, err="": f"Step '{step}' failed in round {round}: {err}"
    SCORE_OUT_OF_RANGE = lambda name="", value=0.0: f"{name} must lie in [0, 1], got {value}"
