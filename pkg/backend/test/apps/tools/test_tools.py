import asyncio

import pytest

from apps.store.models import FieldDef
from apps.tools import analysis
from apps.tools.main import (
    TOOL_AVAILABILITY,
    TOOL_REGISTRY,
    ToolSession,
    call_tool,
    invoke_tool,
    is_available,
    render_tool_result,
    tool_catalog,
)
from apps.search.main import build_index
from test.util.synthetic import (
    N_FAILING,
    failing_short_ids,
    make_gateway,
    make_session_parts,
    make_store,
    synthetic_records,
)
from utils.errors import ToolError, ToolForbiddenError

ORCHESTRATOR_DENIED = {"extract", "compare_segments", "save_affected_traces"}
SCOUT_DENIED = {"compare_segments", "save_affected_traces"}
EXTRACTION_FIELDS = [{"field": "aborted", "semantic_type": "bool", "description": "run aborted"}]
SUMMARY_RULE = {"role": "summarization", "response": "short summary"}


def _session(role="investigator", store=None, rules=None, **config):
    store, index = make_session_parts(store)
    gateway = make_gateway(rules or [SUMMARY_RULE], **config)
    return ToolSession(store=store, index=index, gateway=gateway, role=role, config=gateway.config)


def _calls(gateway, role):
    return sum(1 for r in gateway.records if r.role == role)


####################
# Availability
####################


def test_availability_matrix():
    assert set(TOOL_REGISTRY) == set(TOOL_AVAILABILITY)
    for name in TOOL_AVAILABILITY:
        assert is_available(name, "investigator")
        assert is_available(name, "subagent") == is_available(name, "investigator")
        assert is_available(name, "orchestrator") == (name not in ORCHESTRATOR_DENIED)
        assert is_available(name, "scout") == (name not in SCOUT_DENIED)
    assert not is_available("get_trace", "judge")


def test_catalog_lists_only_available_tools():
    catalog = tool_catalog("orchestrator")
    assert "- search_traces(query, top_k?, mode?)" in catalog
    assert "compare_segments" not in catalog
    assert "save_affected_traces(label, short_ids)" in tool_catalog("investigator")


def test_forbidden_tool_is_rejected():
    session = _session(role="scout")
    with pytest.raises(ToolForbiddenError):
        asyncio.run(invoke_tool(session, "save_affected_traces", {"label": "x", "short_ids": ["t01"]}))

    result = asyncio.run(call_tool(session, "save_affected_traces", {"label": "x", "short_ids": ["t01"]}))
    assert not result.ok
    assert result.error.kind == "tool_forbidden"
    assert session.slots == {}
    assert session.store.list_cohorts() == []


@pytest.mark.parametrize(
    "name, args",
    [
        ("teleport", {}),
        ("get_trace", {}),
        ("get_trace", {"short_id": "t01", "verbose": True}),
        ("search_traces", {"query": "x", "top_k": "many"}),
        ("get_trace", "t01"),
    ],
)
def test_bad_tool_calls(name, args):
    with pytest.raises(ToolError):
        asyncio.run(invoke_tool(_session(), name, args))


####################
# Slots
####################


def test_results_land_in_slots_and_resolve_by_reference():
    session = _session()
    search = asyncio.run(
        call_tool(session, "search_traces", {"query": "context window exceeded", "top_k": 60, "mode": "lexical"})
    )
    assert search.ok
    assert search.slot == "r1"

    failed = asyncio.run(call_tool(session, "get_trace", {"short_id": "t99"}))
    assert not failed.ok
    assert failed.error.kind == "not_found"
    assert session.next_slot() == "r2"

    saved = asyncio.run(
        call_tool(session, "save_affected_traces", {"label": "overflow", "short_ids": "$r1.short_id"})
    )
    assert saved.ok
    assert saved.slot == "r2"
    assert sorted(session.store.get_cohort("overflow").short_ids) == failing_short_ids()
    assert sorted(session.saved_cohorts["overflow"]) == failing_short_ids()

    whole = session.resolve("$r2")
    assert whole["label"] == "overflow"
    assert session.resolve(["$r2.label", "plain"]) == ["overflow", "plain"]
    with pytest.raises(ToolError):
        session.resolve("$r9")
    with pytest.raises(ToolError):
        session.resolve("$r1.nope")


def test_large_results_are_truncated_in_context_but_kept_in_slot():
    session = _session(context_injection_tokens=50)
    result = asyncio.run(call_tool(session, "load_traces", {"limit": 60}))
    assert result.result["truncated"] is True
    assert "$r1" in result.result["marker"]
    assert len(session.slots["r1"]["rows"]) == 60
    assert '"tool_result"' in render_tool_result(result)


def test_data_management_tools():
    session = _session(role="orchestrator")
    values = {sid: True for sid in failing_short_ids()}
    asyncio.run(invoke_tool(session, "save_column", {"name": "overflowed", "values": values}))
    reloaded = asyncio.run(invoke_tool(session, "reload_data"))
    assert "overflowed" in reloaded.result["columns"]
    consolidated = asyncio.run(invoke_tool(session, "consolidate"))
    assert consolidated.result == {"version": 2, "merged_tables": ["overflowed"]}
    schema = asyncio.run(invoke_tool(session, "get_schema"))
    assert schema.result["corpus_version"] == 2


####################
# Extraction
####################


def test_extraction_flushes_in_autosave_windows():
    store = make_store(synthetic_records(n=600))
    gateway = make_gateway(
        [{"role": "extraction", "response": {"aborted": False}}],
        autosave_threshold=250,
        checkpoint_interval=500,
    )
    targets = [t.short_id for t in store.corpus.traces]
    outcome = asyncio.run(
        analysis.extract(
            {"table_name": "aborts", "fields": EXTRACTION_FIELDS, "target_short_ids": targets},
            gateway,
            store,
        )
    )
    assert outcome.flush_count == 3
    assert outcome.checkpoint_count == 1
    assert outcome.table.row_count == 600
    assert outcome.failed_short_ids == []
    assert _calls(gateway, "extraction") == 600


def test_extraction_resumes_after_interruption(tmp_path):
    store = make_store(store_dir=tmp_path / "store")
    fields = [FieldDef.model_validate(f) for f in EXTRACTION_FIELDS]
    marker = FieldDef(field=analysis.error_field("aborts"), semantic_type="text", description="extraction failure detail")
    writer = store.begin_extraction("aborts", fields + [marker])
    writer.append({f"t{i:02d}": {"aborted": True, "aborts__error": None} for i in range(1, 21)})

    gateway = make_gateway([{"role": "extraction", "response": {"aborted": False}}])
    targets = [t.short_id for t in store.corpus.traces]
    spec = {"table_name": "aborts", "fields": EXTRACTION_FIELDS, "target_short_ids": targets}
    outcome = asyncio.run(analysis.extract(spec, gateway, store))
    assert outcome.resumed_count == 20
    assert _calls(gateway, "extraction") == 40
    table = store.corpus.table("aborts")
    assert table.rows["t01"]["aborted"] is True
    assert table.rows["t60"]["aborted"] is False

    again = asyncio.run(analysis.extract(spec, gateway, store))
    assert again.table.row_count == 60
    assert _calls(gateway, "extraction") == 40


def test_extraction_records_per_trace_failures():
    store = make_store()
    gateway = make_gateway(
        [
            {"role": "extraction", "match": "Trace t02 (", "outcome": "backend_error"},
            {"role": "extraction", "response": {"aborted": True}},
        ]
    )
    spec = {"table_name": "aborts", "fields": EXTRACTION_FIELDS, "target_short_ids": ["t01", "t02"]}
    outcome = asyncio.run(analysis.extract(spec, gateway, store))
    assert outcome.failed_short_ids == ["t02"]
    row = store.corpus.table("aborts").rows["t02"]
    assert row["aborted"] is None
    assert row["aborts__error"]

    # a finalized table is not extended with new targets
    wider = {**spec, "target_short_ids": ["t01", "t03"]}
    calls = _calls(gateway, "extraction")
    with pytest.raises(ToolError) as exc_info:
        asyncio.run(analysis.extract(wider, gateway, store))
    assert "t03" in exc_info.value.detail
    assert "t03" not in store.corpus.table("aborts").rows
    assert _calls(gateway, "extraction") == calls

    with pytest.raises(ToolError):
        asyncio.run(
            analysis.extract({"table_name": "x", "fields": [], "target_short_ids": ["t01"]}, gateway, store)
        )


def test_chunk_rows_merge():
    fields = [
        FieldDef(field="aborted", semantic_type="bool"),
        FieldDef(field="steps", semantic_type="int"),
        FieldDef(field="mode", semantic_type="category"),
    ]
    merged = analysis.merge_chunk_rows(
        fields,
        [{"aborted": True, "steps": 3.0, "mode": 1}, {"aborted": False, "steps": "many", "mode": "loop"}],
    )
    assert merged == {"aborted": True, "steps": 3, "mode": "loop"}


####################
# Summaries and comparison
####################


def test_summaries_are_cached_per_corpus_version():
    session = _session()
    asyncio.run(invoke_tool(session, "summarize_trace", {"short_id": "t01"}))
    asyncio.run(invoke_tool(session, "summarize_trace", {"short_id": "t01"}))
    assert _calls(session.gateway, "summarization") == 1

    group = asyncio.run(invoke_tool(session, "summarize_group", {"short_ids": ["t01", "t02", "t03", "t02"]}))
    assert group.result["n_traces"] == 3
    # two new trace summaries plus the group call
    assert _calls(session.gateway, "summarization") == 4

    session.store.consolidate()
    asyncio.run(invoke_tool(session, "summarize_trace", {"short_id": "t01"}))
    assert _calls(session.gateway, "summarization") == 5


def test_oversized_trace_is_summarized_per_chunk():
    records = [{"id": "long", "events": [{"content": "y" * 200} for _ in range(10)]}]
    store = make_store(records, chunk_threshold=100)
    session = _session(store=store)
    asyncio.run(invoke_tool(session, "summarize_trace", {"short_id": "t1"}))
    assert _calls(session.gateway, "summarization") == len(store.chunks("t1")) + 1


def test_compare_segments_samples_within_budget():
    rules = [
        SUMMARY_RULE,
        {
            "role": "cohort_compare",
            "response": {
                "narrative": "Failing runs hit the context limit.",
                "differences": [
                    {"dimension": "ending", "a_value": "error", "b_value": "answer"},
                    "not a difference",
                ],
            },
        },
    ]
    session = _session(rules=rules)
    failing = failing_short_ids()
    passing = [t.short_id for t in session.store.corpus.traces if t.short_id not in failing]
    result = asyncio.run(
        invoke_tool(
            session,
            "compare_segments",
            {"cohort_a_ids": failing, "cohort_b_ids": passing, "question": "why do runs fail?", "token_budget": 20},
        )
    ).result
    comparison = result["result"]
    assert comparison["narrative"] == "Failing runs hit the context limit."
    assert comparison["differences"] == [{"dimension": "ending", "a_value": "error", "b_value": "answer"}]
    # "short summary" costs 4 tokens, so each half of the budget holds two
    assert len(comparison["sampled_ids_a"]) == 2
    assert set(comparison["sampled_ids_a"]) <= set(failing)
    assert set(comparison["sampled_ids_b"]) <= set(passing)
    assert result["overlap_ids"] == []
    assert len(failing) == N_FAILING

    with pytest.raises(ToolError):
        asyncio.run(
            invoke_tool(
                session,
                "compare_segments",
                {"cohort_a_ids": failing, "cohort_b_ids": passing, "question": "q", "token_budget": 4},
            )
        )
    with pytest.raises(ToolError):
        asyncio.run(
            invoke_tool(session, "compare_segments", {"cohort_a_ids": [], "cohort_b_ids": passing, "question": "q"})
        )


def test_index_argument_is_shared_with_search():
    store = make_store()
    index = build_index(store)
    session = ToolSession(store=store, index=index, gateway=make_gateway(), role="scout")
    result = asyncio.run(invoke_tool(session, "search_traces", {"query": "window", "mode": "lexical", "top_k": 3}))
    assert len(result.result) == 3
