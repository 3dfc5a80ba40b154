import random
from pathlib import Path
from typing import Any, Optional

from apps.llm.main import LLMGateway, MockBackend
from apps.llm.models import MockRule, MockScript
from apps.search.main import build_index
from apps.store.main import TraceStore
from config import RunConfig

MARKER = "ERROR: context window exceeded"
N_TRACES = 60
N_FAILING = 25

TASKS = [
    "book a flight from Lisbon to Oslo",
    "summarize the quarterly sales spreadsheet",
    "fix the failing unit test in parser.py",
    "find the cheapest hotel near the station",
    "rename every image in the uploads folder",
]


def short_id(i: int, n: int = N_TRACES) -> str:
    return f"t{i:0{len(str(n))}d}"


def is_failing(i: int) -> bool:
    """Five of every twelve traces fail: 25 of 60."""
    return (i - 1) % 12 < 5


def failing_short_ids(n: int = N_TRACES) -> list[str]:
    return [short_id(i, n) for i in range(1, n + 1) if is_failing(i)]


def synthetic_records(n: int = N_TRACES, planted: bool = True) -> list[dict]:
    """
    Traces with user, assistant and tool events. With planted=True the failing
    traces carry MARKER in their last tool result; no other trace mentions it.
    """
    records = []
    for i in range(1, n + 1):
        task = TASKS[i % len(TASKS)]
        failing = planted and is_failing(i)
        events = [
            {"role": "user", "kind": "message", "content": f"Please {task}."},
            {"role": "assistant", "kind": "reasoning", "content": f"Plan step {i % 4 + 1}: inspect inputs."},
            {"role": "assistant", "kind": "tool_call", "content": f'run_tool("step", {i})'},
        ]
        if failing:
            events.append({"role": "tool", "kind": "tool_result", "content": f"{MARKER} at step {i}"})
            events.append({"role": "assistant", "kind": "output", "content": "I could not finish."})
        else:
            events.append({"role": "tool", "kind": "tool_result", "content": f"ok: {i} items"})
            events.append({"role": "assistant", "kind": "output", "content": "Done."})
        records.append(
            {
                "id": f"trace-{i:03d}",
                "events": events,
                "metadata": {
                    "success": not failing,
                    "turns": 4 + i % 7,
                    "model": ["alpha", "beta", "gamma"][i % 3],
                },
            }
        )
    return records


def random_records(rng: random.Random, n: Optional[int] = None) -> list[dict]:
    """Small randomized corpora for property checks."""
    n = n or rng.randint(1, 25)
    words = ["alpha", "beta", "gamma", "delta", "tool", "error", "retry", "done", "x"]
    records = []
    for i in range(n):
        events = [
            {
                "role": rng.choice(["user", "assistant", "tool"]),
                "kind": "message",
                "content": " ".join(rng.choice(words) for _ in range(rng.randint(1, 30))),
            }
            for _ in range(rng.randint(1, 6))
        ]
        metadata: dict[str, Any] = {}
        if rng.random() < 0.8:
            metadata["ok"] = rng.random() < 0.5
        if rng.random() < 0.8:
            metadata["score"] = rng.choice([None, rng.randint(0, 9)])
        if rng.random() < 0.5:
            metadata["tag"] = rng.choice(["a", "b", "c", None])
        records.append({"id": f"r{i}-{rng.randint(0, 10**6)}", "events": events, "metadata": metadata})
    return records


def make_store(
    records: Optional[list[dict]] = None, store_dir: Optional[str | Path] = None, **kwargs
) -> TraceStore:
    return TraceStore.create(records if records is not None else synthetic_records(), store_dir, **kwargs)


def make_gateway(
    rules: Optional[list[dict]] = None, default_response: Any = "", **config: Any
) -> LLMGateway:
    """Gateway over a scripted backend; retries do not sleep."""
    script = MockScript(
        rules=[MockRule.model_validate(rule) for rule in rules or []],
        default_response=default_response,
    )
    return LLMGateway(MockBackend(script), RunConfig(llm_retry_wait=0, **config))


def make_session_parts(store: Optional[TraceStore] = None):
    store = store or make_store()
    return store, build_index(store)


####################
# Scripted analysis run
####################


def evidence(ids: list[str]) -> list[dict]:
    return [
        {"short_id": sid, "quote": MARKER, "explanation": "the run aborts on context overflow"}
        for sid in ids
    ]


def e2e_rules() -> list[dict]:
    """
    One scout round, one investigator round, then submission. The investigator
    finds the affected traces by lexical search and saves them from the slot.
    """
    failing = failing_short_ids()
    hypothesis = {
        "name": "Context window overflow",
        "description": "Runs abort once the context window fills up.",
        "evidence": evidence(failing[:3]),
        "estimated_prevalence": 0.4,
        "suggestions": ["compare turn counts of failing and passing runs"],
    }
    finding = {
        "name": "Context window overflow aborts runs",
        "status": "confirmed",
        "summary": "25 of 60 runs stop with a context window error before finishing.",
        "prevalence": {"numerator": 25, "denominator": 60},
        "evidence": evidence(failing[:10]),
        "cohort_label": "context-overflow",
        "additional_observations": "All affected runs end without an answer.",
        "suggested_action": "Summarize tool results before they are appended to the context.",
    }
    return [
        {
            "role": "orchestrator",
            "match": "[synthesis]",
            "response": {
                "synthesis": "Runs mostly fail by overflowing the context window (f1).",
                "duplicates": [],
                "possible_duplicates": [],
            },
        },
        {
            "role": "orchestrator",
            "match": "[orchestrator turn=1 ",
            "response": {"action": "dispatch_scouts", "directives": ["look for aborted runs"]},
        },
        {
            "role": "orchestrator",
            "match": "[orchestrator turn=2 ",
            "response": {"action": "dispatch_investigators", "hypothesis_ids": ["h1"]},
        },
        {
            "role": "orchestrator",
            "match": "[orchestrator turn=",
            "response": {"action": "submit_report"},
        },
        {
            "role": "scout",
            "response": {"submit": {"hypotheses": [hypothesis]}},
        },
        {
            "role": "investigator",
            "match": "[investigator turn=1]",
            "response": {
                "tool": "search_traces",
                "args": {"query": "context window exceeded", "top_k": 60, "mode": "lexical"},
            },
        },
        {
            "role": "investigator",
            "match": "[investigator turn=2]",
            "response": {
                "tool": "save_affected_traces",
                "args": {"label": "context-overflow", "short_ids": "$r1.short_id"},
            },
        },
        {
            "role": "investigator",
            "response": {"submit": finding},
        },
    ]


def e2e_mock_script() -> dict:
    return {"rules": e2e_rules(), "default_response": ""}
