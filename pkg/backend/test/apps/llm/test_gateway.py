import math
import random
import asyncio

import pytest

from apps.llm.main import BackendFailure, LLMGateway, load_mock_script
from apps.llm.models import BackendReply
from config import MODEL_LARGE, MODEL_SMALL, RunConfig, load_run_config
from test.util.synthetic import make_gateway
from utils.errors import ConfigError, LLMBackendError, LLMError, LLMParseError, LLMTimeoutError

NUM_LEDGER_CALLS = 1000


class FlakyBackend:
    """Fails the first `failures` calls, then echoes the prompt."""

    def __init__(self, failures: int):
        self.failures = failures
        self.calls = 0

    async def generate(self, role, model, prompt, max_output_tokens, temperature) -> BackendReply:
        self.calls += 1
        if self.calls <= self.failures:
            raise BackendFailure("503 upstream")
        return BackendReply(text=prompt, input_tokens=10, output_tokens=5)


class SlowBackend:
    async def generate(self, role, model, prompt, max_output_tokens, temperature) -> BackendReply:
        await asyncio.sleep(1)
        return BackendReply(text="late", input_tokens=1, output_tokens=1)


class JitterBackend:
    """Echoes the prompt after a random delay so completion order differs from input order."""

    def __init__(self, seed: int = 0):
        self.rng = random.Random(seed)

    async def generate(self, role, model, prompt, max_output_tokens, temperature) -> BackendReply:
        await asyncio.sleep(self.rng.random() / 1000)
        return BackendReply(text=prompt, input_tokens=len(prompt), output_tokens=3)


def test_cost_uses_per_million_prices():
    gateway = make_gateway()
    assert gateway.cost(MODEL_LARGE, 1_000_000, 0) == pytest.approx(15.0)
    assert gateway.cost(MODEL_LARGE, 1_000_000, 1_000_000) == pytest.approx(90.0)
    assert gateway.cost(MODEL_SMALL, 1_000_000, 1_000_000) == pytest.approx(6.0)
    assert gateway.cost("unpriced", 10, 10) == 0.0


def test_roles_route_to_expected_models():
    gateway = make_gateway(role_models={"judge": "judge-model"})
    assert gateway.routes["orchestrator"].model_name == MODEL_LARGE
    assert gateway.routes["extraction"].model_name == MODEL_SMALL
    assert gateway.routes["summarization"].model_name == MODEL_SMALL
    assert gateway.routes["judge"].model_name == "judge-model"

    with pytest.raises(ValueError):
        RunConfig(role_models={"painter": "x"})


def test_free_text_completion_is_recorded():
    gateway = make_gateway([{"role": "scout", "response": "hello there"}])
    completion = asyncio.run(gateway.complete("scout", "say hi"))
    assert completion.text == "hello there"
    assert completion.parsed_json is None
    record = completion.call_record
    assert record.outcome == "ok"
    assert record.model == MODEL_LARGE
    assert record.input_tokens == 2
    assert gateway.records == [record]


def test_backend_failures_are_retried():
    gateway = LLMGateway(FlakyBackend(failures=2), RunConfig(llm_retry_wait=0))
    completion = asyncio.run(gateway.complete("judge", "ping"))
    assert completion.text == "ping"
    assert [r.outcome for r in gateway.records] == ["backend_error", "backend_error", "ok"]


def test_persistent_backend_failure_raises_after_retries():
    gateway = make_gateway([{"role": "judge", "outcome": "backend_error"}], llm_retry_attempts=3)
    with pytest.raises(LLMBackendError):
        asyncio.run(gateway.complete("judge", "ping"))
    assert [r.outcome for r in gateway.records] == ["backend_error"] * 3


def test_timeouts_are_not_retried():
    gateway = make_gateway([{"outcome": "timeout"}])
    with pytest.raises(LLMTimeoutError):
        asyncio.run(gateway.complete("scout", "ping"))
    assert [r.outcome for r in gateway.records] == ["timeout"]

    slow = LLMGateway(SlowBackend(), RunConfig(llm_retry_wait=0, call_timeout=0.05))
    with pytest.raises(LLMTimeoutError):
        asyncio.run(slow.complete("scout", "ping"))


def test_unparseable_json_gets_one_repair_attempt():
    gateway = make_gateway(
        [{"role": "investigator", "responses": ["sure, here you go", 'Result: {"ok": 1} done']}]
    )
    completion = asyncio.run(gateway.complete("investigator", "go", expected_format="json"))
    assert completion.parsed_json == {"ok": 1}
    assert [r.outcome for r in gateway.records] == ["parse_error", "ok"]

    broken = make_gateway([{"response": "never json"}])
    with pytest.raises(LLMParseError):
        asyncio.run(broken.complete("investigator", "go", expected_format="json"))
    assert [r.outcome for r in broken.records] == ["parse_error", "parse_error"]


def test_invalid_requests():
    gateway = make_gateway()
    with pytest.raises(LLMError):
        asyncio.run(gateway.complete("painter", "hi"))
    with pytest.raises(LLMError):
        asyncio.run(gateway.complete("scout", "   "))
    with pytest.raises(LLMError):
        asyncio.run(gateway.complete_batch("scout", ["a"], max_parallel=0))
    assert asyncio.run(gateway.complete_batch("scout", [])) == []


def test_batch_preserves_input_order_and_isolates_failures():
    gateway = LLMGateway(JitterBackend(seed=7), RunConfig(llm_retry_wait=0))
    prompts = [f"item {i}" for i in range(50)] + [" "]
    results = asyncio.run(gateway.complete_batch("extraction", prompts, max_parallel=8))
    assert [r.text for r in results[:50]] == prompts[:50]
    assert isinstance(results[50], LLMError)


def test_usage_report_sums_the_ledger():
    gateway = LLMGateway(JitterBackend(seed=3), RunConfig(llm_retry_wait=0))
    prompts = [f"call number {i}" * (i % 5 + 1) for i in range(NUM_LEDGER_CALLS)]
    half = NUM_LEDGER_CALLS // 2
    asyncio.run(gateway.complete_batch("extraction", prompts[:half]))
    asyncio.run(gateway.complete_batch("orchestrator", prompts[half:]))

    records = gateway.records
    report = gateway.usage_report()
    assert report.total_calls == len(records) == NUM_LEDGER_CALLS
    assert report.total_input_tokens == sum(r.input_tokens for r in records)
    assert report.total_output_tokens == 3 * NUM_LEDGER_CALLS
    assert report.total_cost_usd == pytest.approx(math.fsum(r.cost_usd for r in records))
    assert report.per_role["extraction"].calls == half
    assert report.per_model[MODEL_SMALL].calls == half
    assert report.total_cost_usd == pytest.approx(
        sum(totals.cost_usd for totals in report.per_role.values())
    )


def test_mock_script_loading(tmp_path):
    with pytest.raises(ConfigError):
        load_mock_script(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text('{"rules": [{"role": "scout"}]}')
    with pytest.raises(ConfigError):
        load_mock_script(bad)
    good = tmp_path / "good.json"
    good.write_text('{"rules": [{"match": ["a", "b"], "response": "both"}], "default_response": "none"}')
    script = load_mock_script(good)
    assert script.rules[0].matches("scout", "b then a")
    assert not script.rules[0].matches("scout", "only a")


def test_backend_credentials_come_from_the_environment(monkeypatch):
    for name in ("IG_LLM_BASE_URL", "IG_LLM_API_KEY", "TI_LLM_BASE_URL", "TI_LLM_API_KEY"):
        monkeypatch.delenv(name, raising=False)
    monkeypatch.setenv("IG_LLM_API_KEY", "sk-test")
    monkeypatch.setenv("IG_LLM_BASE_URL", "http://localhost:8000/v1")
    config = load_run_config()
    assert config.llm_api_key == "sk-test"
    assert config.llm_base_url == "http://localhost:8000/v1"

    # TI_ names are aliases; the IG_ name wins when both are set
    monkeypatch.setenv("TI_LLM_API_KEY", "sk-alias")
    assert load_run_config().llm_api_key == "sk-test"
    monkeypatch.delenv("IG_LLM_API_KEY")
    assert load_run_config().llm_api_key == "sk-alias"
    assert load_run_config(llm_api_key="sk-flag").llm_api_key == "sk-flag"
