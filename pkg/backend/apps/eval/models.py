from typing import Literal, Optional

from pydantic import BaseModel, Field

from apps.agents.models import InsightReport

Winner = Literal["A", "B", "tie"]
JudgeConfidence = Literal["low", "med", "high"]


class SystemReport(BaseModel):
    """One report under evaluation: which system produced it, on which fold."""

    system: str
    fold: str
    report: InsightReport

    @property
    def key(self) -> str:
        return f"{self.system}:{self.fold}"


class FindingRef(BaseModel):
    system: str
    fold: str
    index: int = Field(ge=0)

    @property
    def key(self) -> str:
        return f"{self.system}:{self.fold}:{self.index}"


class GoldCluster(BaseModel):
    canonical_name: str = Field(min_length=1, max_length=80)
    description: str = ""
    representative_ids: list[str] = Field(default=[], max_length=5)
    member_findings: list[FindingRef] = []
    # cited ids of every member finding plus the representatives
    member_trace_ids: list[str] = []


class RoundSlot(BaseModel):
    system_a: str
    fold_a: str
    system_b: str
    fold_b: str


class PairwiseRound(RoundSlot):
    winner: Winner
    confidence: JudgeConfidence = "med"
    rationale: str = ""

    @property
    def winning_system(self) -> Optional[str]:
        if self.winner == "A":
            return self.system_a
        if self.winner == "B":
            return self.system_b
        return None


class RubricScore(BaseModel):
    system: str
    fold: str
    cluster: int = Field(ge=0)
    detection: int = Field(ge=0, le=3)
    mechanism: int = Field(ge=0, le=3)
    evidence: int = Field(ge=0, le=3)
    specificity: int = Field(ge=0, le=3)
    actionability: int = Field(ge=0, le=3)
    rationale: str = ""


class CoverageRow(BaseModel):
    system: str
    fold: str
    covered: int
    clusters: int
    coverage: float


class WinRateRow(BaseModel):
    rank: int
    system: str
    wins: int
    ties: int
    rounds: int
    win_rate: float


class RubricRow(BaseModel):
    system: str
    detection_rate: float
    detection: float
    mechanism: float
    evidence: float
    specificity: float
    actionability: float
    composite: float


class EvalResult(BaseModel):
    """What each `eval` step writes; `eval summarize` folds any number of these."""

    benchmark: str
    kind: Literal["cluster", "coverage", "pairwise", "rubric"]
    clusters: list[GoldCluster] = []
    coverage: list[CoverageRow] = []
    rounds: list[PairwiseRound] = []
    scores: list[RubricScore] = []
