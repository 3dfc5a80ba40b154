from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

Role = Literal[
    "orchestrator",
    "scout",
    "investigator",
    "cohort_compare",
    "extraction",
    "summarization",
    "judge",
    "patcher",
    "subagent",
]
ExpectedFormat = Literal["free_text", "json"]
CallOutcome = Literal["ok", "timeout", "parse_error", "backend_error"]


####################
# Routing / Accounting
####################


class ModelRoute(BaseModel):
    model_config = ConfigDict(protected_namespaces=())

    role: str
    model_name: str
    max_output_tokens: int = Field(ge=1)
    temperature: float = Field(ge=0)


class CallRecord(BaseModel):
    role: str
    model: str
    input_tokens: int = Field(ge=0)
    output_tokens: int = Field(ge=0)
    wall_ms: int = Field(ge=0)
    outcome: CallOutcome
    cost_usd: float = Field(ge=0)


class Completion(BaseModel):
    text: str
    parsed_json: Optional[Any] = None
    call_record: CallRecord


class BackendReply(BaseModel):
    text: str
    input_tokens: int = Field(ge=0)
    output_tokens: int = Field(ge=0)


class UsageTotals(BaseModel):
    calls: int = 0
    failed_calls: int = 0
    input_tokens: int = 0
    output_tokens: int = 0
    cost_usd: float = 0.0


class UsageReport(BaseModel):
    per_role: dict[str, UsageTotals]
    per_model: dict[str, UsageTotals]
    total_calls: int
    total_input_tokens: int
    total_output_tokens: int
    total_cost_usd: float


####################
# Mock Script
####################


class MockRule(BaseModel):
    """
    First matching rule wins. `match` is a substring (or a list of substrings
    that must all occur) of the prompt; `responses` replays in order with the
    last one repeating.
    """

    model_config = ConfigDict(extra="forbid")

    role: Optional[str] = None
    match: Optional[str | list[str]] = None
    response: Optional[Any] = None
    responses: Optional[list[Any]] = None
    outcome: Literal["ok", "timeout", "backend_error"] = "ok"

    @model_validator(mode="after")
    def check_payload(self) -> "MockRule":
        if self.outcome == "ok" and self.response is None and not self.responses:
            raise ValueError("an ok rule needs 'response' or 'responses'")
        return self

    def matches(self, role: str, prompt: str) -> bool:
        if self.role is not None and self.role != role:
            return False
        if self.match is None:
            return True
        needles = [self.match] if isinstance(self.match, str) else self.match
        return all(needle in prompt for needle in needles)


class MockScript(BaseModel):
    model_config = ConfigDict(extra="forbid")

    rules: list[MockRule] = []
    default_response: Any = ""
