import asyncio
import json

import pytest

from apps.agents.main import AnalysisEngine, canonical_question, prioritize
from apps.agents.models import (
    AnalysisLimits,
    AnalysisRequest,
    EvidenceItem,
    Finding,
    Hypothesis,
    Prevalence,
    confidence_for,
)
from apps.agents.report import merge_findings, synthesize_report, validate_grounding
from apps.agents.subagents import intake_finding, intake_hypotheses
from apps.tools.main import ToolSession
from constants import MESSAGES
from test.util.synthetic import (
    MARKER,
    N_FAILING,
    N_TRACES,
    e2e_rules,
    evidence,
    failing_short_ids,
    make_gateway,
    make_session_parts,
    make_store,
)
from utils.errors import AnalysisAbortedError

QUERY = "Why do runs fail?"
SYNTHESIS_RULE = {
    "role": "orchestrator",
    "match": "[synthesis]",
    "response": {"synthesis": "One failure mode dominates.", "duplicates": [], "possible_duplicates": []},
}


def _engine(rules, mode="full", store=None, **limits):
    store, index = make_session_parts(store)
    gateway = make_gateway(rules)
    request = AnalysisRequest(query=QUERY, mode=mode, limits=AnalysisLimits(**limits))
    return AnalysisEngine(request, gateway, store, index)


def _hypothesis(id, name, n_evidence=1, prevalence=0.1):
    return Hypothesis(
        id=id,
        name=name,
        evidence=[EvidenceItem(short_id="t01", quote=MARKER)] * n_evidence,
        estimated_prevalence=prevalence,
    )


def _finding(id, affected, status="confirmed", numerator=None):
    return Finding(
        id=id,
        name=f"finding {id}",
        status=status,
        summary="summary",
        prevalence=Prevalence(numerator=numerator or len(affected), denominator=N_TRACES),
        evidence=[EvidenceItem(short_id=sid, quote=MARKER) for sid in affected[:2]],
        confidence=confidence_for(N_TRACES),
        cohort_label=f"cohort-{id}",
        affected_trace_ids=affected,
    )


def _inline(affected, quote=MARKER, **extra):
    return {
        "name": "Context overflow",
        "status": "confirmed",
        "summary": "Runs abort on a full context window.",
        "prevalence": {"numerator": len(affected), "denominator": N_TRACES},
        "evidence": [
            {"short_id": sid, "quote": quote, "explanation": ""} for sid in failing_short_ids()[:8]
        ],
        "affected_trace_ids": affected,
        **extra,
    }


####################
# Prioritization
####################


def test_prioritize_fallback_order():
    hypotheses = [
        _hypothesis("h1", "beta", n_evidence=1, prevalence=0.9),
        _hypothesis("h2", "alpha", n_evidence=3, prevalence=0.1),
        _hypothesis("h3", "gamma", n_evidence=3, prevalence=0.5),
        _hypothesis("h4", "aardvark", n_evidence=3, prevalence=0.5),
    ]
    assert [h.id for h in prioritize(hypotheses, 3)] == ["h4", "h3", "h2"]
    assert [h.id for h in prioritize(hypotheses, 5, investigated={"h4", "h3"})] == ["h2", "h1"]


def test_prioritize_follows_a_valid_ranking():
    hypotheses = [_hypothesis(f"h{i}", f"n{i}") for i in range(1, 5)]
    assert [h.id for h in prioritize(hypotheses, 2, ranking=["h3", "h3", "h9", "h1", "h2"])] == ["h3", "h1"]
    assert [h.id for h in prioritize(hypotheses, 2, investigated={"h3"}, ranking=["h3"])] == ["h1", "h2"]
    assert [h.id for h in prioritize(hypotheses, 2, ranking=[7, None])] == ["h1", "h2"]


def test_confidence_bands():
    assert confidence_for(101) == "high"
    assert confidence_for(100) == "medium"
    assert confidence_for(20) == "medium"
    assert confidence_for(19) == "low"


def test_canonical_question_names_the_benchmark():
    assert "tau-bench" in canonical_question("tau-bench")


####################
# Intake
####################


def test_scout_intake_drops_unverified_evidence():
    store = make_store()
    payload = {
        "hypotheses": [
            {"name": "overflow", "evidence": evidence(["t01"]) + [{"short_id": "t01", "quote": "invented"}]},
            {"name": "ghost", "evidence": [{"short_id": "t01", "quote": "never said"}]},
            {"name": "broken"},
        ]
    }
    result = intake_hypotheses(payload, store, "scout-1")
    assert [h.name for h in result.value] == ["overflow"]
    assert len(result.value[0].evidence) == 1
    assert result.value[0].source == "scout-1"
    assert [(a.name, a.outcome) for a in result.audit] == [("overflow", "accepted"), ("ghost", "dropped")]

    assert intake_hypotheses({"hypotheses": []}, store, "scout-1").reason
    assert intake_hypotheses([{"name": "no evidence"}], store, "scout-1").reason


def _investigator_session():
    store, index = make_session_parts()
    session = ToolSession(store=store, index=index, gateway=make_gateway(), role="investigator")
    session.saved_cohorts["overflow"] = failing_short_ids()
    return session


@pytest.mark.parametrize(
    "change, reason",
    [
        ({"cohort_label": "unsaved"}, "save_affected_traces"),
        ({"evidence": evidence(failing_short_ids()[:7])}, "at least 8 evidence"),
        ({"evidence": evidence(failing_short_ids()[:7]) + [{"short_id": "t02", "quote": "made up"}]}, "not found verbatim"),
        ({"evidence": evidence(failing_short_ids()[:7]) + [{"short_id": "t99", "quote": MARKER}]}, "not found verbatim"),
        ({"prevalence": {"numerator": 25, "denominator": 61}}, "corpus size"),
        ({"prevalence": {"numerator": 26, "denominator": 60}}, "saved cohort"),
        ({"prevalence": {"numerator": 30, "denominator": 20}}, "shape invalid"),
    ],
)
def test_finding_intake_rejections(change, reason):
    session = _investigator_session()
    payload = {
        "status": "confirmed",
        "summary": "Runs overflow.",
        "prevalence": {"numerator": 25, "denominator": 60},
        "evidence": evidence(failing_short_ids()[:8]),
        "cohort_label": "overflow",
        **change,
    }
    result = intake_finding(payload, session.store, session, "investigator-1")
    assert result.value is None
    assert reason in result.reason


def test_finding_intake_accepts_grounded_submission():
    session = _investigator_session()
    hypothesis = _hypothesis("h2", "overflow hypothesis")
    payload = {
        "status": "inconclusive",
        "summary": "Some runs overflow.",
        "prevalence": {"numerator": 5, "denominator": 12},
        "evidence": evidence(failing_short_ids()[:2]),
        "cohort_label": "overflow",
    }
    result = intake_finding(payload, session.store, session, "investigator-1", hypothesis)
    finding = result.value
    assert finding.name == "overflow hypothesis"
    assert finding.hypothesis_id == "h2"
    assert finding.confidence == "low"
    assert finding.affected_trace_ids == failing_short_ids()
    assert result.audit[0].outcome == "inconclusive"


####################
# Engine
####################


def test_scripted_run_produces_grounded_report():
    engine = _engine(e2e_rules())
    report = asyncio.run(engine.run())

    assert report.query == QUERY
    assert report.corpus.n_traces == N_TRACES
    assert report.corpus.label_columns == ["success"]
    assert report.synthesis == "Runs mostly fail by overflowing the context window (f1)."
    assert report.notice is None

    assert len(report.findings) == 1
    finding = report.findings[0]
    assert finding.id == "f1"
    assert finding.status == "confirmed"
    assert (finding.prevalence.num, finding.prevalence.den) == (N_FAILING, N_TRACES)
    assert finding.confidence == "medium"
    assert len(finding.evidence) >= 8
    expected = sorted(f"trace-{int(sid[1:]):03d}" for sid in failing_short_ids())
    assert sorted(finding.affected_trace_ids) == expected
    assert all(e.trace_id.startswith("trace-") for e in finding.evidence)

    stats = report.run_stats
    assert (stats.rounds, stats.scouts_dispatched, stats.investigators_dispatched, stats.hypotheses) == (3, 1, 1, 1)
    assert stats.cost_usd > 0
    assert not stats.forced_synthesis

    assert validate_grounding(report, engine.store) == []
    assert [(a.agent_id, a.kind, a.outcome) for a in engine.audit] == [
        ("scout-1", "hypothesis", "accepted"),
        ("investigator-2", "finding", "accepted"),
    ]
    assert engine.store.get_cohort("context-overflow").source_finding == "investigator-2"
    assert engine.store.version == 2


def test_generic_subagents_use_untyped_role():
    rules = []
    for rule in e2e_rules():
        if rule["role"] == "scout":
            rule = {**rule, "role": "subagent", "match": "Look at these traces"}
        elif rule["role"] == "investigator":
            rule = {**rule, "role": "subagent"}
            if "match" in rule:
                rule["match"] = rule["match"].replace("investigator", "subagent")
        rules.append(rule)

    engine = _engine(rules, mode="generic_subagents")
    report = asyncio.run(engine.run())
    assert report.run_stats.mode == "generic_subagents"
    assert len(report.findings) == 1
    assert [a.agent_id for a in engine.audit] == ["subagent-1", "subagent-2"]


def test_orchestrator_only_rejects_dispatch_and_keeps_inline_findings():
    failing = failing_short_ids()
    rules = [
        SYNTHESIS_RULE,
        {
            "role": "orchestrator",
            "match": "[orchestrator turn=1 ",
            "response": {"action": "dispatch_scouts", "directives": ["look around"]},
        },
        {
            "role": "orchestrator",
            "match": ["[orchestrator turn=2 ", "is not allowed in mode 'orchestrator_only'"],
            "response": {
                "action": "submit_report",
                "findings": [
                    _inline(failing),
                    _inline([], name="no cohort"),
                    _inline(failing, quote="invented quote"),
                ],
            },
        },
        {"role": "orchestrator", "response": {"action": "submit_report"}},
    ]
    engine = _engine(rules, mode="orchestrator_only")
    report = asyncio.run(engine.run())

    assert engine.stats.scouts_dispatched == 0
    assert len(report.findings) == 1
    assert report.findings[0].id == "f1"
    assert len(report.findings[0].affected_trace_ids) == N_FAILING
    assert engine.store.get_cohort("orchestrator-f1").source_finding == "orchestrator-inline-1"
    outcomes = [(a.agent_id, a.outcome) for a in engine.audit]
    assert outcomes == [
        ("orchestrator-inline-1", "accepted"),
        ("orchestrator-inline-2", "rejected"),
        ("orchestrator-inline-3", "rejected"),
    ]
    assert report.synthesis == "One failure mode dominates."


def test_backend_timeout_aborts_with_partial_findings():
    rules = [
        rule for rule in e2e_rules() if rule["role"] == "scout" or rule.get("match") == "[orchestrator turn=1 "
    ]
    rules.append({"role": "orchestrator", "outcome": "timeout"})
    engine = _engine(rules)
    with pytest.raises(AnalysisAbortedError) as exc_info:
        asyncio.run(engine.run())

    partial = exc_info.value.partial
    assert partial["findings"] == []
    assert len(partial["hypotheses"]) == 1
    assert partial["hypotheses"][0]["evidence"][0]["short_id"] == "trace-001"
    assert exc_info.value.detail.startswith("Analysis aborted")


def test_turn_limit_forces_synthesis():
    engine = _engine([{"role": "orchestrator", "response": {"tool": "get_schema"}}], max_orchestrator_turns=2)
    report = asyncio.run(engine.run())
    assert report.run_stats.forced_synthesis
    assert report.run_stats.rounds == 2
    assert report.notice == MESSAGES.FORCED_SYNTHESIS.value
    assert report.findings == []
    assert report.synthesis == MESSAGES.NO_FINDINGS.value


def test_orchestrator_slots_persist_across_turns():
    engine = _engine([{"role": "summarization", "response": "short summary"}])
    transcript = []
    search = {"tool": "search_traces", "args": {"query": MARKER, "top_k": 3, "mode": "lexical"}}
    group = {"tool": "summarize_group", "args": {"short_ids": "$r1.short_id"}}
    asyncio.run(engine._decide(search, transcript))
    asyncio.run(engine._decide(group, transcript))

    first, second = (json.loads(line)["tool_result"] for line in transcript)
    assert first["ok"] and first["slot"] == "r1"
    assert second["ok"], second
    assert second["slot"] == "r2"
    assert second["result"] == "short summary"


@pytest.mark.parametrize(
    "responses",
    [
        ["no json here", "still none", {"action": "submit_report"}],
        [{"action": "dance"}, {"action": "submit_report"}],
        [{"action": "dispatch_investigators"}, {"action": "submit_report"}],
        [["not", "an", "object"], {"action": "submit_report"}],
    ],
)
def test_bad_orchestrator_turns_are_reported_back(responses):
    engine = _engine([{"role": "orchestrator", "responses": responses}])
    report = asyncio.run(engine.run())
    assert report.run_stats.rounds == 2
    assert report.notice == MESSAGES.NO_FINDINGS.value


def test_scout_samples_are_seeded():
    engine = _engine([])
    engine.config = engine.config.model_copy(update={"scout_sample_size": 50})
    first = engine.sample_for(1)
    assert len(first) == 50
    assert first == sorted(first)
    assert engine.sample_for(1) == first
    assert engine.sample_for(2) != first


####################
# Report
####################


def test_merge_findings_by_pair_and_overlap():
    a = _finding("f1", ["t01", "t02", "t03", "t04"])
    # cohort jaccard 3/5 with f1; f3 and f4 only share 1/5
    b = _finding("f2", ["t02", "t03", "t04", "t05"])
    c = _finding("f3", ["t10", "t11"])
    d = _finding("f4", ["t10", "t20", "t21", "t22"])

    merged = merge_findings([a, b, c, d], duplicates=[], possible_duplicates=[("f1", "f2"), ("f3", "f4")])
    ids = [f.id for f in merged]
    assert ids == ["f1", "f3", "f4"]
    first = merged[0]
    assert first.merged_from == ["f1", "f2"]
    assert first.affected_trace_ids == ["t01", "t02", "t03", "t04", "t05"]
    assert first.prevalence.numerator == 5
    assert first.name == "finding f1"

    forced = merge_findings([a, b, c, d], duplicates=[("f4", "f3")])
    assert [f.id for f in forced] == ["f1", "f2", "f3"]
    assert forced[2].merged_from == ["f3", "f4"]


def test_failed_synthesis_keeps_findings_with_placeholder():
    store, _ = make_session_parts()
    gateway = make_gateway([{"role": "orchestrator", "response": "no json"}])
    report = asyncio.run(synthesize_report([_finding("f1", ["t01", "t02"])], QUERY, gateway, store))
    assert report.synthesis == MESSAGES.SYNTHESIS_PLACEHOLDER.value
    assert report.run_stats.synthesis_failed
    assert report.findings[0].affected_trace_ids == ["trace-001", "trace-002"]


def test_merged_finding_rewrites_its_cohort():
    store, _ = make_session_parts()
    rule = {**SYNTHESIS_RULE, "response": {**SYNTHESIS_RULE["response"], "duplicates": [["f1", "f2"]]}}
    findings = [_finding("f1", ["t01", "t02"]), _finding("f2", ["t02", "t03"])]
    store.save_affected_traces("cohort-f1", ["t01", "t02"], "f1")
    report = asyncio.run(synthesize_report(findings, QUERY, make_gateway([rule]), store))

    assert report.findings[0].affected_trace_ids == ["trace-001", "trace-002", "trace-003"]
    assert store.get_cohort("cohort-f1").short_ids == ["t01", "t02", "t03"]
    assert store.get_cohort("cohort-f1").source_finding == "f1"


def test_grounding_flags_each_kind_of_violation():
    store, _ = make_session_parts()
    gateway = make_gateway([SYNTHESIS_RULE])
    report = asyncio.run(synthesize_report([_finding("f1", ["t01", "t02"])], QUERY, gateway, store))
    assert validate_grounding(report, store) == []

    report.findings[0].evidence[0].quote = "this was never in the trace"
    violations = validate_grounding(report, store)
    assert [(v.kind, v.trace_id) for v in violations] == [("quote_not_found", "trace-001")]

    report.findings[0].affected_trace_ids.append("trace-999")
    report.findings[0].prevalence.num = 10
    kinds = [v.kind for v in validate_grounding(report, store)]
    assert kinds == ["quote_not_found", "unknown_trace", "prevalence"]
