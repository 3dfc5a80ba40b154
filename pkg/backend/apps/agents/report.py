import json
import logging
from typing import Optional

from apps.agents.models import (
    CorpusDescriptor,
    EvidenceItem,
    Finding,
    GroundingViolation,
    InsightReport,
    Prevalence,
    ReportEvidence,
    ReportFinding,
    ReportPrevalence,
    RunStats,
    confidence_for,
)
from apps.llm.main import LLMGateway
from apps.store.main import TraceStore
from config import SRC_LOG_LEVELS
from constants import MESSAGES
from utils.errors import LLMError
from utils.misc import jaccard
from utils.task import render_prompt

log = logging.getLogger(__name__)
log.setLevel(SRC_LOG_LEVELS["AGENTS"])

DUPLICATE_JACCARD = 0.5


####################
# De-duplication
####################


def _pairs(value, known: set[str]) -> list[tuple[str, str]]:
    pairs = []
    for pair in value if isinstance(value, list) else []:
        if (
            isinstance(pair, list)
            and len(pair) == 2
            and all(isinstance(p, str) and p in known for p in pair)
            and pair[0] != pair[1]
        ):
            pairs.append((pair[0], pair[1]))
    return pairs


def merge_findings(
    findings: list[Finding],
    duplicates: list[tuple[str, str]],
    possible_duplicates: list[tuple[str, str]] = (),
) -> list[Finding]:
    """
    Merge explicitly paired findings, and proposed pairs whose affected cohorts
    overlap with Jaccard >= 0.5. A merged finding keeps the earliest member's
    text and takes the union of cohorts and evidence.
    """
    by_id = {f.id: f for f in findings}
    parent = {f.id: f.id for f in findings}

    def find(x: str) -> str:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    order = {f.id: i for i, f in enumerate(findings)}

    def union(a: str, b: str) -> None:
        ra, rb = find(a), find(b)
        if ra != rb:
            keep, drop = sorted((ra, rb), key=order.get)
            parent[drop] = keep

    for a, b in duplicates:
        union(a, b)
    for a, b in possible_duplicates:
        overlap = jaccard(by_id[a].affected_trace_ids, by_id[b].affected_trace_ids)
        if overlap >= DUPLICATE_JACCARD:
            union(a, b)
        else:
            log.info(f"kept {a} and {b} apart (cohort jaccard {overlap:.2f})")

    groups: dict[str, list[Finding]] = {}
    for finding in findings:
        groups.setdefault(find(finding.id), []).append(finding)

    merged = []
    for root, members in groups.items():
        if len(members) == 1:
            merged.append(members[0])
            continue
        primary = members[0]
        affected = list(dict.fromkeys(sid for m in members for sid in m.affected_trace_ids))
        evidence: dict[tuple[str, str], EvidenceItem] = {}
        for member in members:
            for item in member.evidence:
                evidence.setdefault((item.short_id, item.quote), item)
        denominator = max(m.prevalence.denominator for m in members)
        numerator = min(len(affected), denominator)
        observations = [m.additional_observations for m in members if m.additional_observations]
        merged.append(
            primary.model_copy(
                update={
                    "prevalence": Prevalence(numerator=numerator, denominator=denominator),
                    "evidence": list(evidence.values()),
                    "affected_trace_ids": affected,
                    "additional_observations": "\n".join(observations),
                    "confidence": confidence_for(denominator),
                    "merged_from": [m.id for m in members],
                }
            )
        )
        log.info(f"merged findings {[m.id for m in members]} into {root}")
    return merged


####################
# Synthesis
####################


def _finding_listing(findings: list[Finding]) -> str:
    return "\n".join(
        json.dumps(
            {
                "id": f.id,
                "name": f.name,
                "status": f.status,
                "summary": f.summary,
                "prevalence": f"{f.prevalence.numerator}/{f.prevalence.denominator}",
                "cohort_size": len(f.affected_trace_ids),
                "suggested_action": f.suggested_action,
            },
            ensure_ascii=False,
        )
        for f in findings
    )


def _report_finding(finding: Finding) -> dict:
    return ReportFinding(
        id=finding.id,
        name=finding.name,
        status=finding.status,
        prevalence=ReportPrevalence(
            num=finding.prevalence.numerator, den=finding.prevalence.denominator
        ),
        summary=finding.summary,
        evidence=[
            ReportEvidence(trace_id=e.short_id, quote=e.quote, explanation=e.explanation)
            for e in finding.evidence
        ],
        affected_trace_ids=finding.affected_trace_ids,
        suggested_action=finding.suggested_action,
        confidence=finding.confidence,
        additional_observations=finding.additional_observations,
        merged_from=finding.merged_from,
    ).model_dump()


async def synthesize_report(
    findings: list[Finding],
    query: str,
    gateway: LLMGateway,
    store: TraceStore,
    run_stats: Optional[RunStats] = None,
    other_findings: Optional[list[Finding]] = None,
) -> InsightReport:
    """
    One call writes the narrative and proposes duplicate pairs; every
    structural field is assembled here, and ids are remapped to original ids last.
    """
    run_stats = (run_stats or RunStats()).model_copy()
    other_findings = other_findings or []
    notice = None
    synthesis = MESSAGES.NO_FINDINGS.value

    if findings:
        known = {f.id for f in findings}
        duplicates: list[tuple[str, str]] = []
        possible: list[tuple[str, str]] = []
        try:
            completion = await gateway.complete(
                "orchestrator",
                render_prompt("synthesis", QUERY=query, FINDINGS=_finding_listing(findings)),
                expected_format="json",
            )
            parsed = completion.parsed_json
            if not isinstance(parsed, dict) or not isinstance(parsed.get("synthesis"), str):
                raise ValueError("synthesis output is not an object with a 'synthesis' string")
            synthesis = parsed["synthesis"]
            duplicates = _pairs(parsed.get("duplicates"), known)
            possible = _pairs(parsed.get("possible_duplicates"), known)
        except (LLMError, ValueError) as e:
            log.warning(f"synthesis failed, using placeholder narrative: {e}")
            synthesis = MESSAGES.SYNTHESIS_PLACEHOLDER.value
            run_stats.synthesis_failed = True
        findings = merge_findings(findings, duplicates, possible)
        for finding in findings:
            if finding.merged_from:
                # the store cohort must match the unioned affected ids
                store.save_affected_traces(finding.cohort_label, finding.affected_trace_ids, finding.id)
    else:
        notice = MESSAGES.NO_FINDINGS.value

    if run_stats.forced_synthesis:
        notice = MESSAGES.FORCED_SYNTHESIS.value

    run_stats.cost_usd = gateway.usage_report().total_cost_usd
    corpus = store.corpus
    report = {
        "query": query,
        "corpus": CorpusDescriptor(
            n_traces=len(corpus.traces), label_columns=corpus.label_columns
        ).model_dump(),
        "findings": [_report_finding(f) for f in [*findings, *other_findings]],
        "synthesis": synthesis,
        "run_stats": run_stats.model_dump(),
        "notice": notice,
    }
    return InsightReport.model_validate(store.remap_trace_ids(report))


####################
# Grounding
####################


def validate_grounding(report: InsightReport, store: TraceStore) -> list[GroundingViolation]:
    """Every quote in its cited trace, every id known, every prevalence consistent."""
    originals = {original: short for short, original in store.corpus.id_map.items()}
    n_traces = len(store.corpus.traces)
    violations: list[GroundingViolation] = []

    for finding in report.findings:
        for item in finding.evidence:
            short_id = originals.get(item.trace_id)
            if short_id is None:
                violations.append(
                    GroundingViolation(
                        finding=finding.id,
                        kind="unknown_trace",
                        trace_id=item.trace_id,
                        detail="evidence cites an unknown trace",
                    )
                )
            elif item.quote not in store.content(short_id):
                violations.append(
                    GroundingViolation(
                        finding=finding.id,
                        kind="quote_not_found",
                        trace_id=item.trace_id,
                        detail=item.quote,
                    )
                )
        for trace_id in finding.affected_trace_ids:
            if trace_id not in originals:
                violations.append(
                    GroundingViolation(
                        finding=finding.id,
                        kind="unknown_trace",
                        trace_id=trace_id,
                        detail="affected trace id is unknown",
                    )
                )

        prevalence = finding.prevalence
        if prevalence.den > n_traces:
            violations.append(
                GroundingViolation(
                    finding=finding.id,
                    kind="prevalence",
                    detail=f"denominator {prevalence.den} exceeds corpus size {n_traces}",
                )
            )
        if prevalence.num > len(finding.affected_trace_ids):
            violations.append(
                GroundingViolation(
                    finding=finding.id,
                    kind="prevalence",
                    detail=f"numerator {prevalence.num} exceeds cohort size {len(finding.affected_trace_ids)}",
                )
            )
    return violations
