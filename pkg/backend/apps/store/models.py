from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field

####################
# Trace Schema
####################

EventRole = Literal["system", "user", "assistant", "tool", "environment"]
EventKind = Literal["message", "reasoning", "tool_call", "tool_result", "output"]
SemanticType = Literal["bool", "int", "float", "category", "text"]
Scalar = str | int | float | bool | None


class TraceEvent(BaseModel):
    model_config = ConfigDict(from_attributes=True)

    index: int
    role: EventRole
    kind: EventKind
    content: str


class RawEvent(BaseModel):
    role: EventRole = "assistant"
    kind: EventKind = "message"
    content: str


class RawTrace(BaseModel):
    """One JSONL input line, either with events or with a single content string."""

    id: str = Field(min_length=1)
    events: Optional[list[RawEvent]] = None
    content: Optional[str] = None
    metadata: dict[str, Any] = {}


class TraceRecord(BaseModel):
    model_config = ConfigDict(from_attributes=True)

    original_id: str
    short_id: str
    events: list[TraceEvent]
    metadata: dict[str, Scalar] = {}
    token_count: int

    @property
    def segments(self) -> list[str]:
        # event contents joined by newlines; the concatenation is the full trace text
        last = len(self.events) - 1
        return [e.content + ("\n" if i < last else "") for i, e in enumerate(self.events)]

    @property
    def content(self) -> str:
        return "\n".join(e.content for e in self.events)


####################
# Extraction Schema
####################


class FieldDef(BaseModel):
    field: str = Field(min_length=1)
    semantic_type: SemanticType
    description: str = ""


class ExtractionTable(BaseModel):
    name: str
    field_defs: list[FieldDef]
    rows: dict[str, dict[str, Scalar]] = {}
    provenance: Literal["llm_extraction", "computed_column"]
    created_at: int

    def info(self) -> "ExtractionInfo":
        return ExtractionInfo(
            name=self.name,
            field_defs=self.field_defs,
            row_count=len(self.rows),
            provenance=self.provenance,
        )


class ExtractionInfo(BaseModel):
    name: str
    field_defs: list[FieldDef]
    row_count: int
    provenance: Literal["llm_extraction", "computed_column"]


class Cohort(BaseModel):
    label: str
    short_ids: list[str]
    source_finding: Optional[str] = None
    created_at: int


####################
# Views
####################


class ChunkInfo(BaseModel):
    index: int
    tokens: int
    preview: str


class TraceView(BaseModel):
    short_id: str
    token_count: int
    oversized: bool
    content: Optional[str] = None
    chunk_count: Optional[int] = None
    chunks: Optional[list[ChunkInfo]] = None


####################
# Schema Cache
####################


class NumericSummary(BaseModel):
    min: float
    max: float
    mean: float
    stddev: Optional[float]
    quartiles: tuple[float, float, float]


class ValueCount(BaseModel):
    value: Scalar
    count: int


class ColumnEntry(BaseModel):
    name: str
    inferred_type: SemanticType
    null_rate: float = Field(ge=0, le=1)
    distinct_count: int
    numeric: Optional[NumericSummary] = None
    top_values: Optional[list[ValueCount]] = None
    other_count: int = 0


class Correlation(BaseModel):
    col_a: str
    col_b: str
    measure: Literal["pearson", "cramers_v"]
    value: float


class SchemaCache(BaseModel):
    columns: list[ColumnEntry]
    correlations: list[Correlation]
    corpus_version: int
    n_traces: int

    def column(self, name: str) -> Optional[ColumnEntry]:
        return next((c for c in self.columns if c.name == name), None)
