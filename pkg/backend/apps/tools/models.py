from typing import Any, Literal, Optional

from pydantic import BaseModel, Field

from apps.store.models import ExtractionInfo, FieldDef

AgentRole = Literal["orchestrator", "scout", "investigator", "subagent"]


####################
# Extraction
####################


class ExtractionSpec(BaseModel):
    table_name: str = Field(min_length=1)
    fields: list[FieldDef] = Field(min_length=1, max_length=12)
    target_short_ids: list[str] = Field(min_length=1)


class ExtractOutcome(BaseModel):
    table: ExtractionInfo
    failed_short_ids: list[str] = []
    flush_count: int = 0
    checkpoint_count: int = 0
    resumed_count: int = 0


####################
# Cohort comparison
####################


class ComparisonRequest(BaseModel):
    cohort_a_ids: list[str]
    cohort_b_ids: list[str]
    question: str


class Difference(BaseModel):
    dimension: str
    a_value: Any = None
    b_value: Any = None


class ComparisonResult(BaseModel):
    narrative: str
    differences: list[Difference] = []
    sampled_ids_a: list[str]
    sampled_ids_b: list[str]


class SegmentComparison(BaseModel):
    cohort_a_ids: list[str]
    cohort_b_ids: list[str]
    question: str
    result: ComparisonResult
    overlap_ids: list[str] = []


####################
# Tool protocol
####################


class ToolFailure(BaseModel):
    kind: str
    detail: str


class ToolResult(BaseModel):
    """Payload injected back into the agent context as {"tool_result": ...}."""

    tool: str
    slot: Optional[str] = None
    ok: bool
    result: Optional[Any] = None
    error: Optional[ToolFailure] = None
