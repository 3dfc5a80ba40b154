import random
from concurrent.futures import ThreadPoolExecutor

import pytest

from apps.store.main import TraceStore, ingest_corpus, remap_trace_ids, split_into_chunks
from apps.store.models import FieldDef
from test.util.synthetic import (
    MARKER,
    N_FAILING,
    N_TRACES,
    make_store,
    random_records,
    synthetic_records,
)
from utils.errors import IngestionError, NotFoundError, StoreError
from utils.misc import approximate_tokens

PROPERTY_CASES = 200
LABEL_FIELDS = [
    FieldDef(field="failure_mode", semantic_type="category", description="how the run ended"),
    FieldDef(field="retries", semantic_type="int"),
]


####################
# Ingestion
####################


def test_short_ids_are_padded_to_corpus_width():
    store = make_store()
    ids = [t.short_id for t in store.corpus.traces]
    assert ids[0] == "t01"
    assert ids[-1] == "t60"
    assert len(set(ids)) == N_TRACES

    small = make_store(synthetic_records(n=9))
    assert [t.short_id for t in small.corpus.traces][-1] == "t9"
    wide = make_store(synthetic_records(n=100))
    assert wide.corpus.traces[0].short_id == "t001"


def test_id_map_round_trip():
    store = make_store()
    for trace in store.corpus.traces:
        assert store.corpus.id_map[trace.short_id] == trace.original_id
        assert store.resolve_original_id(trace.original_id) == trace.short_id
    assert store.resolve_original_id("missing") is None


def test_remap_replaces_nested_id_fields():
    id_map = {"t1": "trace-a", "t2": "trace-b"}
    remapped = remap_trace_ids(
        {"findings": [{"evidence": [{"short_id": "t2", "quote": "t1"}], "affected_trace_ids": ["t1"]}]},
        id_map,
    )
    finding = remapped["findings"][0]
    assert finding["evidence"][0] == {"short_id": "trace-b", "quote": "t1"}
    assert finding["affected_trace_ids"] == ["trace-a"]

    with pytest.raises(StoreError):
        remap_trace_ids({"short_id": "t9"}, id_map)


@pytest.mark.parametrize(
    "records",
    [
        [],
        [{"id": "a", "events": []}],
        [{"id": "a", "content": "x"}, {"id": "a", "content": "y"}],
        [{"events": [{"content": "x"}]}],
        [{"id": "a", "events": [{"role": "robot", "content": "x"}]}],
    ],
)
def test_invalid_corpora_are_rejected(records):
    with pytest.raises(IngestionError):
        ingest_corpus(records)


def test_content_only_records_and_flattened_metadata():
    corpus = ingest_corpus(
        [{"id": "a", "content": "hello", "metadata": {"env": {"os": "linux"}, "tags": [1, 2]}}]
    )
    trace = corpus.traces[0]
    assert trace.content == "hello"
    assert trace.events[0].kind == "output"
    assert trace.metadata == {"env.os": "linux", "tags": "[1,2]"}


def test_token_approximation():
    assert approximate_tokens("") == 1
    assert approximate_tokens("x" * 8) == 2
    assert approximate_tokens("x" * 200_001) == 50_001
    assert approximate_tokens("anything", counter=lambda text: 0) == 1


def test_labeled_corpus_counts():
    records = [
        {"id": f"run-{i}", "content": f"attempt {i}", "metadata": {"correct": i < 125, "task": {"category": "cell"}}}
        for i in range(296)
    ]
    store = make_store(records)
    counts = {v.value: v.count for v in store.schema.column("correct").top_values}
    assert counts == {True: 125, False: 171}
    assert store.corpus.label_columns == ["correct"]
    assert store.view["task.category"].unique().tolist() == ["cell"]


####################
# Chunking
####################


def test_oversized_trace_chunks_reassemble():
    records = [
        {
            "id": "long",
            "events": [{"content": f"step {i}: " + "x" * 50} for i in range(40)],
        }
    ]
    store = make_store(records, chunk_threshold=100)
    view = store.get_trace("t1")
    assert view.oversized
    assert view.content is None
    assert view.chunk_count == len(store.chunks("t1")) > 1
    assert "".join(store.get_trace_chunk("t1", i) for i in range(view.chunk_count)) == store.content("t1")

    with pytest.raises(StoreError):
        store.get_trace_chunk("t1", view.chunk_count)


def test_concurrent_chunk_requests_share_one_split():
    records = [{"id": f"long-{i}", "content": "word " * 400} for i in range(4)]
    store = make_store(records, chunk_threshold=50)
    with ThreadPoolExecutor(max_workers=8) as pool:
        results = list(pool.map(store.chunks, [f"t{i % 4 + 1}" for i in range(64)]))
    for i, chunks in enumerate(results):
        assert chunks is store.chunks(f"t{i % 4 + 1}")
        assert "".join(chunks) == store.content(f"t{i % 4 + 1}")


def test_small_trace_is_returned_whole():
    store = make_store()
    view = store.get_trace("t01")
    assert not view.oversized
    assert MARKER in view.content
    with pytest.raises(StoreError):
        store.get_trace_chunk("t01", 0)
    with pytest.raises(NotFoundError):
        store.get_trace("t99")


def test_single_segment_larger_than_threshold_is_split():
    chunks = split_into_chunks(["a" * 90, "b" * 10], threshold=10)
    assert "".join(chunks) == "a" * 90 + "b" * 10
    assert all(len(chunk) <= 40 for chunk in chunks)


####################
# Schema cache
####################


def test_schema_columns_and_correlations():
    schema = make_store().schema
    assert schema.n_traces == N_TRACES
    assert schema.corpus_version == 1

    success = schema.column("success")
    assert success.inferred_type == "bool"
    assert success.null_rate == 0
    counts = {v.value: v.count for v in success.top_values}
    assert counts == {False: N_FAILING, True: N_TRACES - N_FAILING}

    assert schema.column("model").inferred_type == "category"
    turns = schema.column("turns")
    assert turns.inferred_type == "int"
    assert turns.numeric.min == 4
    assert turns.numeric.max == 10
    assert schema.column("event_count").distinct_count == 1
    assert all(abs(c.value) >= 0.3 for c in schema.correlations)


@pytest.mark.parametrize("seed", range(PROPERTY_CASES))
def test_store_invariants_on_random_corpora(seed):
    rng = random.Random(seed)
    records = random_records(rng)
    store = make_store(records, chunk_threshold=rng.randint(2, 40))
    n = len(records)

    ids = [t.short_id for t in store.corpus.traces]
    width = len(str(n))
    assert ids == [f"t{i:0{width}d}" for i in range(1, n + 1)]
    assert sorted(store.corpus.id_map.values()) == sorted(r["id"] for r in records)

    for trace, record in zip(store.corpus.traces, records):
        assert trace.content == "\n".join(e["content"] for e in record["events"])
        assert "".join(store.chunks(trace.short_id)) == trace.content

    schema = store.schema
    assert schema.n_traces == n
    for column in schema.columns:
        assert 0 <= column.null_rate <= 1
        present = n - round(column.null_rate * n)
        if column.inferred_type in ("int", "float"):
            if present:
                assert column.numeric.min <= column.numeric.mean <= column.numeric.max
        elif present:
            assert sum(v.count for v in column.top_values) + column.other_count == present


####################
# Queries and writes
####################


def test_load_traces_filters_and_groups():
    store = make_store()
    failing = store.load_traces(where={"success": False}, columns=["turns"], limit=3)
    assert failing["n_rows"] == N_FAILING
    assert len(failing["rows"]) == 3
    assert set(failing["rows"][0]) == {"short_id", "turns"}

    grouped = store.load_traces(group_by="model")
    assert sum(grouped["counts"].values()) == N_TRACES

    with pytest.raises(StoreError):
        store.load_traces(columns=["nope"])


def test_load_traces_crosstab_reports_association():
    store = make_store()
    result = store.load_traces(crosstab=["success", "model"])
    assert result["n_rows"] == N_TRACES
    table = result["crosstab"]
    assert table["row_labels"] == ["False", "True"]
    assert sum(sum(row) for row in table["counts"]) == N_TRACES
    assert 0 <= table["cramers_v"] <= 1
    assert "odds_ratio" not in table


def test_save_column_is_visible_after_reload():
    store = make_store()
    values = {t.short_id: t.token_count > 20 for t in store.corpus.traces}
    store.save_column("long_trace", values)
    assert "long_trace" not in store.view.columns
    assert "long_trace" in store.reload_data().columns

    with pytest.raises(StoreError):
        store.save_column("long_trace", values)
    with pytest.raises(StoreError):
        store.save_column("bad name!", values)
    with pytest.raises(StoreError):
        store.save_column("unknown_ids", {"t99": True})


def test_consolidate_preserves_columns_and_bumps_version():
    store = make_store()
    before = store.view.copy()
    store.save_column("flag", {"t01": True, "t02": False})
    corpus = store.consolidate()

    assert corpus.version == 2
    assert "flag" in corpus.merged_tables
    assert store.schema.corpus_version == 2
    assert store.schema.column("flag").null_rate == pytest.approx(58 / 60)
    for column in before.columns:
        assert store.view[column].tolist() == before[column].tolist()


def test_cohorts_overwrite_and_validate():
    store = make_store()
    store.save_affected_traces("overflow", ["t01", "t02", "t01"], source_finding="f1")
    assert store.get_cohort("overflow").short_ids == ["t01", "t02"]
    store.save_affected_traces("overflow", ["t03"])
    assert store.get_cohort("overflow").short_ids == ["t03"]
    assert store.list_cohorts() == ["overflow"]

    with pytest.raises(StoreError):
        store.save_affected_traces("empty", [])
    with pytest.raises(StoreError):
        store.save_affected_traces("ghost", ["t99"])
    with pytest.raises(NotFoundError):
        store.get_cohort("missing")


def test_store_reopens_from_disk(tmp_path):
    store = make_store(store_dir=tmp_path / "store")
    store.save_column("flag", {"t01": True})
    store.save_affected_traces("overflow", ["t01", "t13"])
    store.consolidate()

    reopened = TraceStore.open(tmp_path / "store")
    assert reopened.version == 2
    assert [t.model_dump() for t in reopened.corpus.traces] == [
        t.model_dump() for t in store.corpus.traces
    ]
    assert reopened.get_cohort("overflow").short_ids == ["t01", "t13"]
    assert reopened.view.at["t01", "flag"] is True

    with pytest.raises(NotFoundError):
        TraceStore.open(tmp_path / "missing")


def test_extraction_writer_resumes_partial_table(tmp_path):
    store = make_store(store_dir=tmp_path / "store")
    writer = store.begin_extraction("labels", LABEL_FIELDS)
    writer.append({"t01": {"failure_mode": "overflow", "retries": 2}})
    writer.append({"t02": {"failure_mode": None, "retries": 0}})
    assert writer.flush_count == 2

    reopened = TraceStore.open(tmp_path / "store")
    resumed = reopened.begin_extraction("labels", LABEL_FIELDS)
    assert resumed.resumed_count == 2
    assert resumed.completed_ids == {"t01", "t02"}
    resumed.append({"t03": {"failure_mode": "timeout", "retries": 1}})
    table = resumed.finalize()
    assert len(table.rows) == 3
    assert reopened.get_extractions()[0].row_count == 3

    again = reopened.begin_extraction("labels", LABEL_FIELDS)
    assert again.is_finalized

    with pytest.raises(StoreError):
        reopened.begin_extraction("labels", LABEL_FIELDS[:1])
    with pytest.raises(StoreError):
        reopened.begin_extraction("other", LABEL_FIELDS).append({"t01": {"retries": "two"}})
