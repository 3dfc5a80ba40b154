from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field

LoopMode = Literal["with_report", "pure_patcher"]
LoopStatus = Literal["running", "finished", "failed"]
TerminationReason = Literal["max_rounds", "patience", "max_rounds+patience"]
Step = Literal["health", "run", "analyze", "patch", "evaluate"]


class LoopConfig(BaseModel):
    epsilon: float = Field(default=0.01, gt=0)
    patience: int = Field(default=2, ge=1)
    max_rounds: int = Field(default=5, ge=1)
    mode: LoopMode = "with_report"


class AdapterSpec(BaseModel):
    command: list[str] = Field(min_length=1)
    timeout: float = Field(default=3600, gt=0)


class LoopFile(BaseModel):
    """The `loop` command's config file."""

    model_config = ConfigDict(extra="forbid")

    loop: LoopConfig = LoopConfig()
    scaffold: str
    history_path: str = "loop.json"
    runner: AdapterSpec
    analyzer: Optional[AdapterSpec] = None
    patcher: AdapterSpec
    evaluator: AdapterSpec


class AdapterRequest(BaseModel):
    step: Step
    round: int = 0
    inputs: dict = {}


class AdapterResponse(BaseModel):
    ok: bool
    outputs: dict = {}
    error: Optional[str] = None


class RoundRecord(BaseModel):
    round: int = Field(ge=0)
    scaffold_ref: str
    traces_ref: Optional[str] = None
    report_ref: Optional[str] = None
    val_score: float = Field(ge=0, le=1)
    test_score: Optional[float] = Field(default=None, ge=0, le=1)


class LoopHistory(BaseModel):
    config: LoopConfig
    scaffold: str
    records: list[RoundRecord] = []
    status: LoopStatus = "running"
    terminated_reason: Optional[TerminationReason] = None
    failure: Optional[str] = None
    best_val_round: Optional[int] = None
    best_test_round: Optional[int] = None

    @property
    def val_scores(self) -> list[float]:
        return [r.val_score for r in self.records]
