import json
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Generic, Literal, Optional, TypeVar

from pydantic import ValidationError

from apps.agents.models import (
    AuditEntry,
    EvidenceItem,
    Finding,
    FindingSubmission,
    Hypothesis,
    confidence_for,
)
from apps.store.main import TraceStore
from apps.tools.main import ToolSession, call_tool, render_tool_result
from config import MIN_CONFIRMED_EVIDENCE, SRC_LOG_LEVELS
from utils.errors import LLMError, NotFoundError

log = logging.getLogger(__name__)
log.setLevel(SRC_LOG_LEVELS["AGENTS"])

T = TypeVar("T")


@dataclass
class Intake(Generic[T]):
    """Result of checking a submission: accepted value, or a reason to send back."""

    value: Optional[T] = None
    reason: Optional[str] = None
    audit: list[AuditEntry] = field(default_factory=list)


def quote_verified(store: TraceStore, item: EvidenceItem) -> bool:
    try:
        return item.quote in store.content(item.short_id)
    except NotFoundError:
        return False


####################
# Turn loop
####################


async def run_subagent(
    session: ToolSession,
    agent_id: str,
    base_prompt: str,
    max_turns: int,
    intake: Callable[[Any], Intake[T]],
    kind: Literal["hypothesis", "finding"] = "finding",
) -> Intake[T]:
    """
    Drive one subagent: each turn is either a tool call, answered with a
    tool_result, or a submission. A rejected submission is sent back once for
    repair. After max_turns the agent gets one final turn to submit.
    """
    gateway = session.gateway
    transcript: list[str] = []
    repaired = False
    audit: list[AuditEntry] = []

    for turn in range(1, max_turns + 2):
        final = turn > max_turns
        footer = f"[{session.role} turn={turn}{' final' if final else ''}]"
        if final:
            footer = "Turn limit reached. Respond with your submission now.\n" + footer
        prompt = "\n\n".join([base_prompt, *transcript, footer])
        try:
            completion = await gateway.complete(session.role, prompt, expected_format="json")
        except LLMError as e:
            log.warning(f"{agent_id}: stopped after gateway failure ({e.kind}): {e.detail}")
            return Intake(reason=e.detail, audit=audit)

        output = completion.parsed_json
        transcript.append(f"YOU: {json.dumps(output, ensure_ascii=False)}")

        if isinstance(output, dict) and "tool" in output and not final:
            result = await call_tool(session, str(output["tool"]), output.get("args") or {})
            transcript.append(render_tool_result(result))
            continue

        if isinstance(output, dict) and "submit" in output:
            result = intake(output["submit"])
            audit.extend(result.audit)
            if result.reason is None:
                result.audit = audit
                return result
            if repaired or final:
                log.info(f"{agent_id}: submission rejected after repair: {result.reason}")
                audit.append(
                    AuditEntry(agent_id=agent_id, kind=kind, outcome="rejected", reason=result.reason)
                )
                return Intake(reason=result.reason, audit=audit)
            repaired = True
            transcript.append(
                json.dumps({"submission_rejected": result.reason}, ensure_ascii=False)
            )
            continue

        transcript.append(
            json.dumps(
                {"error": 'expected {"tool": ..., "args": {...}} or {"submit": ...}'},
                ensure_ascii=False,
            )
        )

    return Intake(reason="no submission", audit=audit)


####################
# Scouts
####################


def intake_hypotheses(payload: Any, store: TraceStore, agent_id: str) -> Intake[list[Hypothesis]]:
    """
    Validate a scout submission. Evidence with a quote that is not in the cited
    trace is dropped, then hypotheses left without evidence are dropped.
    """
    items = payload.get("hypotheses") if isinstance(payload, dict) else payload
    if not isinstance(items, list) or not items:
        return Intake(reason="submit a non-empty JSON list of hypotheses")

    parsed: list[Hypothesis] = []
    errors: list[str] = []
    for item in items:
        try:
            parsed.append(Hypothesis.model_validate({**item, "id": "", "source": agent_id}))
        except (ValidationError, TypeError) as e:
            errors.append(str(e).splitlines()[0])
    if not parsed:
        return Intake(reason=f"no hypothesis matched the required shape: {'; '.join(errors)}")

    accepted: list[Hypothesis] = []
    audit: list[AuditEntry] = []
    for hypothesis in parsed:
        verified = [e for e in hypothesis.evidence if quote_verified(store, e)]
        dropped = len(hypothesis.evidence) - len(verified)
        if not verified:
            audit.append(
                AuditEntry(
                    agent_id=agent_id,
                    kind="hypothesis",
                    outcome="dropped",
                    name=hypothesis.name,
                    reason="no evidence quote found in its cited trace",
                )
            )
            log.info(f"{agent_id}: dropped hypothesis '{hypothesis.name}' (no verified evidence)")
            continue
        if dropped:
            log.info(f"{agent_id}: '{hypothesis.name}' lost {dropped} unverified evidence items")
        accepted.append(hypothesis.model_copy(update={"evidence": verified}))
        audit.append(
            AuditEntry(
                agent_id=agent_id,
                kind="hypothesis",
                outcome="accepted",
                name=hypothesis.name,
                reason=f"{dropped} evidence items dropped" if dropped else "",
            )
        )
    return Intake(value=accepted, audit=audit)


####################
# Investigators
####################


def intake_finding(
    payload: Any,
    store: TraceStore,
    session: Optional[ToolSession],
    agent_id: str,
    hypothesis: Optional[Hypothesis] = None,
) -> Intake[Finding]:
    """
    Validate a finding. Rejected when the cohort was not saved in this session,
    when a confirmed finding has fewer than the minimum evidence items, when a
    quote is not in its trace, or when the prevalence does not fit the corpus.
    """
    if not isinstance(payload, dict):
        return Intake(reason="submit one JSON object")
    try:
        submission = FindingSubmission.model_validate(payload)
    except ValidationError as e:
        return Intake(reason=f"submission shape invalid: {str(e).splitlines()[0]}")

    if session is not None:
        label = submission.cohort_label
        if not label or label not in session.saved_cohorts:
            return Intake(reason="save the affected cohort with save_affected_traces and cite its label as cohort_label")
        affected = session.saved_cohorts[label]
    else:
        label = submission.cohort_label or ""
        affected = list(submission.affected_trace_ids or [])

    if submission.status == "confirmed" and len(submission.evidence) < MIN_CONFIRMED_EVIDENCE:
        return Intake(
            reason=f"a confirmed finding needs at least {MIN_CONFIRMED_EVIDENCE} evidence items, got {len(submission.evidence)}"
        )
    unverified = [e for e in submission.evidence if not quote_verified(store, e)]
    if unverified:
        cited = ", ".join(sorted({e.short_id for e in unverified}))
        return Intake(reason=f"evidence quotes not found verbatim in traces: {cited}")

    prevalence = submission.prevalence
    n_traces = len(store.corpus.traces)
    if prevalence.denominator > n_traces:
        return Intake(reason=f"prevalence denominator exceeds the corpus size {n_traces}")
    if affected and prevalence.numerator > len(affected):
        return Intake(reason=f"prevalence numerator exceeds the saved cohort size {len(affected)}")

    name = submission.name or (hypothesis.name if hypothesis else "") or label or "finding"
    finding = Finding(
        id="",
        hypothesis_id=hypothesis.id if hypothesis else None,
        name=name,
        status=submission.status,
        summary=submission.summary,
        prevalence=prevalence,
        evidence=submission.evidence,
        additional_observations=submission.additional_observations,
        suggested_action=submission.suggested_action,
        confidence=confidence_for(prevalence.denominator),
        cohort_label=label,
        affected_trace_ids=affected,
        source=agent_id,
    )
    outcome = "accepted" if finding.status == "confirmed" else finding.status
    return Intake(
        value=finding,
        audit=[AuditEntry(agent_id=agent_id, kind="finding", outcome=outcome, name=name)],
    )
