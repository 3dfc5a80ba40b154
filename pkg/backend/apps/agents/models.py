from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from config import (
    INVESTIGATOR_BATCH,
    MAX_ORCHESTRATOR_TURNS,
    MAX_SUBAGENT_TURNS,
    SCOUT_BATCH,
    AnalysisMode,
)

FindingStatus = Literal["confirmed", "refuted", "inconclusive"]
Confidence = Literal["high", "medium", "low"]


def confidence_for(denominator: int) -> Confidence:
    """high above 100 compared traces, medium for 20-100, low below 20."""
    if denominator > 100:
        return "high"
    if denominator >= 20:
        return "medium"
    return "low"


####################
# Request
####################


class AnalysisLimits(BaseModel):
    max_orchestrator_turns: int = Field(default=MAX_ORCHESTRATOR_TURNS, ge=1)
    max_subagent_turns: int = Field(default=MAX_SUBAGENT_TURNS, ge=1)
    scout_batch: int = Field(default=SCOUT_BATCH, ge=1)
    investigator_batch: int = Field(default=INVESTIGATOR_BATCH, ge=1)


class AnalysisRequest(BaseModel):
    query: str = Field(min_length=1)
    mode: AnalysisMode = "full"
    seed: int = 0
    limits: AnalysisLimits = AnalysisLimits()


####################
# Hypotheses / Findings
####################


class EvidenceItem(BaseModel):
    short_id: str
    quote: str = Field(min_length=1)
    explanation: str = ""


class EstimatedPrevalence(BaseModel):
    """Either a fraction or a count with its denominator."""

    fraction: Optional[float] = Field(default=None, ge=0, le=1)
    numerator: Optional[int] = Field(default=None, ge=0)
    denominator: Optional[int] = Field(default=None, ge=1)

    @property
    def value(self) -> float:
        if self.fraction is not None:
            return self.fraction
        if self.numerator is not None and self.denominator:
            return self.numerator / self.denominator
        return 0.0


class Hypothesis(BaseModel):
    id: str = ""
    name: str = Field(min_length=1)
    description: str = ""
    evidence: list[EvidenceItem] = Field(min_length=1)
    estimated_prevalence: EstimatedPrevalence = EstimatedPrevalence()
    suggestions: list[str] = []
    source: str = ""

    @field_validator("estimated_prevalence", mode="before")
    @classmethod
    def coerce_prevalence(cls, value):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return {"fraction": value}
        return value

    @field_validator("suggestions")
    @classmethod
    def cap_suggestions(cls, value: list[str]) -> list[str]:
        return value[:3]


class Prevalence(BaseModel):
    numerator: int = Field(ge=0)
    denominator: int = Field(ge=1)

    @model_validator(mode="after")
    def check_order(self) -> "Prevalence":
        if self.numerator > self.denominator:
            raise ValueError("numerator exceeds denominator")
        return self

    @property
    def fraction(self) -> float:
        return self.numerator / self.denominator


class FindingSubmission(BaseModel):
    """What an investigator (or an inline orchestrator finding) submits."""

    model_config = ConfigDict(extra="ignore")

    name: Optional[str] = None
    status: FindingStatus
    summary: str = Field(min_length=1)
    prevalence: Prevalence
    evidence: list[EvidenceItem] = []
    additional_observations: str = ""
    suggested_action: Optional[str] = None
    cohort_label: Optional[str] = None
    affected_trace_ids: Optional[list[str]] = None


class Finding(BaseModel):
    id: str
    hypothesis_id: Optional[str] = None
    name: str
    status: FindingStatus
    summary: str
    prevalence: Prevalence
    evidence: list[EvidenceItem]
    additional_observations: str = ""
    suggested_action: Optional[str] = None
    confidence: Confidence
    cohort_label: str
    affected_trace_ids: list[str]
    source: str = ""
    merged_from: list[str] = []


class AuditEntry(BaseModel):
    agent_id: str
    kind: Literal["hypothesis", "finding"]
    outcome: Literal["accepted", "rejected", "dropped", "refuted", "inconclusive"]
    name: str = ""
    reason: str = ""


####################
# Report
####################


class ReportEvidence(BaseModel):
    trace_id: str
    quote: str
    explanation: str = ""


class ReportPrevalence(BaseModel):
    num: int
    den: int


class ReportFinding(BaseModel):
    id: str
    name: str
    status: FindingStatus
    prevalence: ReportPrevalence
    summary: str
    evidence: list[ReportEvidence]
    affected_trace_ids: list[str]
    suggested_action: Optional[str] = None
    confidence: Confidence
    additional_observations: str = ""
    merged_from: list[str] = []


class CorpusDescriptor(BaseModel):
    n_traces: int
    label_columns: list[str] = []


class RunStats(BaseModel):
    mode: AnalysisMode = "full"
    rounds: int = 0
    scouts_dispatched: int = 0
    investigators_dispatched: int = 0
    hypotheses: int = 0
    cost_usd: float = 0.0
    forced_synthesis: bool = False
    synthesis_failed: bool = False


class InsightReport(BaseModel):
    query: str
    corpus: CorpusDescriptor
    findings: list[ReportFinding]
    synthesis: str
    run_stats: RunStats
    notice: Optional[str] = None


class GroundingViolation(BaseModel):
    finding: str
    kind: Literal["quote_not_found", "unknown_trace", "prevalence"]
    trace_id: Optional[str] = None
    detail: str
