import json
import math
import time
import asyncio
import logging
import threading
from pathlib import Path
from typing import Any, Optional, Protocol

import aiohttp
from pydantic import ValidationError
from tenacity import (
    AsyncRetrying,
    retry_if_exception_type,
    stop_after_attempt,
    wait_exponential,
)

from apps.llm.models import (
    BackendReply,
    CallOutcome,
    CallRecord,
    Completion,
    ExpectedFormat,
    MockScript,
    ModelRoute,
    UsageReport,
    UsageTotals,
)
from config import ROLES, SRC_LOG_LEVELS, ModelPrice, RunConfig
from constants import ERROR_MESSAGES
from utils.errors import (
    ConfigError,
    LLMBackendError,
    LLMError,
    LLMParseError,
    LLMTimeoutError,
)
from utils.misc import TokenCounter, approximate_tokens, extract_json_value

log = logging.getLogger(__name__)
log.setLevel(SRC_LOG_LEVELS["LLM"])

JSON_REPAIR_INSTRUCTION = (
    "\n\nYour previous answer could not be parsed. Respond again with one valid "
    "JSON value only: no prose, no markdown fences."
)


class BackendFailure(Exception):
    """Raised by backends for transport or provider errors; retried by the gateway."""


class Backend(Protocol):
    async def generate(
        self, role: str, model: str, prompt: str, max_output_tokens: int, temperature: float
    ) -> BackendReply: ...


####################
# Backends
####################


class MockBackend:
    """Scripted backend: deterministic replay of canned responses per rule."""

    def __init__(self, script: MockScript, counter: Optional[TokenCounter] = None):
        self.script = script
        self.counter = counter
        self._positions: dict[int, int] = {}
        self._lock = threading.Lock()

    def _response_text(self, value: Any) -> str:
        return value if isinstance(value, str) else json.dumps(value, ensure_ascii=False)

    def next_response(self, role: str, prompt: str) -> tuple[str, str]:
        for idx, rule in enumerate(self.script.rules):
            if not rule.matches(role, prompt):
                continue
            if rule.outcome != "ok":
                return rule.outcome, ""
            if rule.responses:
                with self._lock:
                    position = self._positions.get(idx, 0)
                    self._positions[idx] = position + 1
                value = rule.responses[min(position, len(rule.responses) - 1)]
            else:
                value = rule.response
            return "ok", self._response_text(value)
        return "ok", self._response_text(self.script.default_response)

    async def generate(
        self, role: str, model: str, prompt: str, max_output_tokens: int, temperature: float
    ) -> BackendReply:
        outcome, text = self.next_response(role, prompt)
        if outcome == "timeout":
            raise asyncio.TimeoutError()
        if outcome == "backend_error":
            raise BackendFailure("scripted backend error")
        return BackendReply(
            text=text,
            input_tokens=approximate_tokens(prompt, self.counter),
            output_tokens=approximate_tokens(text, self.counter) if text else 0,
        )


def load_mock_script(path: str | Path) -> MockScript:
    path = Path(path)
    try:
        return MockScript.model_validate_json(path.read_text())
    except FileNotFoundError:
        raise ConfigError(ERROR_MESSAGES.FILE_NOT_FOUND(str(path)))
    except ValidationError as e:
        raise ConfigError(ERROR_MESSAGES.INVALID_MOCK_SCRIPT(str(e)))


class ChatCompletionsBackend:
    """OpenAI-compatible POST {base}/chat/completions."""

    def __init__(self, url: str, key: str, timeout: Optional[float] = None):
        self.url = url.rstrip("/")
        self.key = key
        self.timeout = timeout

    async def generate(
        self, role: str, model: str, prompt: str, max_output_tokens: int, temperature: float
    ) -> BackendReply:
        payload = {
            "model": model,
            "messages": [{"role": "user", "content": prompt}],
            "max_tokens": max_output_tokens,
            "temperature": temperature,
        }
        headers = {}
        headers["Authorization"] = f"Bearer {self.key}"
        headers["Content-Type"] = "application/json"

        r = None
        session = None
        try:
            session = aiohttp.ClientSession(
                trust_env=True, timeout=aiohttp.ClientTimeout(total=self.timeout)
            )
            r = await session.request(
                method="POST",
                url=f"{self.url}/chat/completions",
                data=json.dumps(payload),
                headers=headers,
            )
            r.raise_for_status()
            data = await r.json()
            text = data["choices"][0]["message"]["content"] or ""
            usage = data.get("usage") or {}
            return BackendReply(
                text=text,
                input_tokens=usage.get("prompt_tokens", approximate_tokens(prompt)),
                output_tokens=usage.get("completion_tokens", approximate_tokens(text)),
            )
        except asyncio.TimeoutError:
            raise
        except Exception as e:
            log.exception(e)
            error_detail = "Server Connection Error"
            if r is not None:
                try:
                    res = await r.json()
                    if "error" in res:
                        error_detail = f"External: {res['error']['message'] if 'message' in res['error'] else res['error']}"
                except Exception:
                    error_detail = f"External: {e}"
            raise BackendFailure(error_detail)
        finally:
            if r:
                r.close()
            if session:
                await session.close()


####################
# Gateway
####################


def build_routes(config: RunConfig) -> dict[str, ModelRoute]:
    return {
        role: ModelRoute(
            role=role,
            model_name=config.model_for(role),
            max_output_tokens=config.max_output_tokens,
            temperature=config.temperature,
        )
        for role in ROLES
    }


def usage_report(records: list[CallRecord]) -> UsageReport:
    """Per-role and per-model totals; every figure is a plain sum over records."""
    per_role: dict[str, list[CallRecord]] = {}
    per_model: dict[str, list[CallRecord]] = {}
    for record in records:
        per_role.setdefault(record.role, []).append(record)
        per_model.setdefault(record.model, []).append(record)

    def _totals(items: list[CallRecord]) -> UsageTotals:
        return UsageTotals(
            calls=len(items),
            failed_calls=sum(1 for r in items if r.outcome != "ok"),
            input_tokens=sum(r.input_tokens for r in items),
            output_tokens=sum(r.output_tokens for r in items),
            cost_usd=math.fsum(r.cost_usd for r in items),
        )

    return UsageReport(
        per_role={role: _totals(items) for role, items in sorted(per_role.items())},
        per_model={model: _totals(items) for model, items in sorted(per_model.items())},
        total_calls=len(records),
        total_input_tokens=sum(r.input_tokens for r in records),
        total_output_tokens=sum(r.output_tokens for r in records),
        total_cost_usd=math.fsum(r.cost_usd for r in records),
    )


class LLMGateway:
    """
    Every model call goes through here: routing, per-role concurrency caps,
    timeouts, retries, JSON repair and the run-scoped CallRecord ledger.
    """

    def __init__(
        self,
        backend: Backend,
        config: Optional[RunConfig] = None,
        routes: Optional[dict[str, ModelRoute]] = None,
    ):
        self.config = config or RunConfig()
        self.backend = backend
        self.routes = routes if routes is not None else build_routes(self.config)
        self.prices: dict[str, ModelPrice] = dict(self.config.prices)
        self._records: list[CallRecord] = []
        self._lock = threading.Lock()
        self._limiters: dict[tuple[int, str], asyncio.Semaphore] = {}

    @property
    def records(self) -> list[CallRecord]:
        with self._lock:
            return list(self._records)

    def usage_report(self) -> UsageReport:
        return usage_report(self.records)

    def cost(self, model: str, input_tokens: int, output_tokens: int) -> float:
        price = self.prices.get(model)
        if price is None:
            log.warning(f"no price configured for model '{model}', costing at 0")
            return 0.0
        return (
            input_tokens * price.input_per_million + output_tokens * price.output_per_million
        ) / 1_000_000

    def _record(
        self,
        route: ModelRoute,
        outcome: CallOutcome,
        started: float,
        input_tokens: int = 0,
        output_tokens: int = 0,
    ) -> CallRecord:
        record = CallRecord(
            role=route.role,
            model=route.model_name,
            input_tokens=input_tokens,
            output_tokens=output_tokens,
            wall_ms=int((time.perf_counter() - started) * 1000),
            outcome=outcome,
            cost_usd=self.cost(route.model_name, input_tokens, output_tokens),
        )
        with self._lock:
            self._records.append(record)
        if outcome != "ok":
            log.warning(f"{route.role} call via {route.model_name}: {outcome}")
        return record

    def _limiter(self, role: str) -> asyncio.Semaphore:
        key = (id(asyncio.get_running_loop()), role)
        if key not in self._limiters:
            self._limiters[key] = asyncio.Semaphore(self.config.role_concurrency)
        return self._limiters[key]

    def _route(self, role: str) -> ModelRoute:
        route = self.routes.get(role)
        if route is None:
            raise LLMError(ERROR_MESSAGES.ROLE_NOT_ROUTED(role))
        return route

    async def _attempt(self, route: ModelRoute, prompt: str) -> tuple[BackendReply, float]:
        async with self._limiter(route.role):
            started = time.perf_counter()
            try:
                reply = await asyncio.wait_for(
                    self.backend.generate(
                        route.role,
                        route.model_name,
                        prompt,
                        route.max_output_tokens,
                        route.temperature,
                    ),
                    timeout=self.config.call_timeout,
                )
            except asyncio.TimeoutError:
                self._record(route, "timeout", started)
                raise LLMTimeoutError(
                    ERROR_MESSAGES.LLM_TIMEOUT(route.role, self.config.call_timeout)
                )
            except BackendFailure:
                self._record(route, "backend_error", started)
                raise
            except Exception as e:
                self._record(route, "backend_error", started)
                raise BackendFailure(str(e)) from e
            return reply, started

    async def _generate(self, route: ModelRoute, prompt: str) -> tuple[BackendReply, float]:
        try:
            async for attempt in AsyncRetrying(
                stop=stop_after_attempt(self.config.llm_retry_attempts),
                wait=wait_exponential(multiplier=self.config.llm_retry_wait, max=30),
                retry=retry_if_exception_type(BackendFailure),
                reraise=True,
            ):
                with attempt:
                    if attempt.retry_state.attempt_number > 1:
                        log.info(
                            f"retrying {route.role} call (attempt {attempt.retry_state.attempt_number})"
                        )
                    return await self._attempt(route, prompt)
        except BackendFailure as e:
            raise LLMBackendError(ERROR_MESSAGES.LLM_BACKEND(route.role, str(e)))

    async def complete(
        self, role: str, prompt: str, expected_format: ExpectedFormat = "free_text"
    ) -> Completion:
        route = self._route(role)
        if not prompt or not prompt.strip():
            raise LLMError(ERROR_MESSAGES.EMPTY_PROMPT.value)

        reply, started = await self._generate(route, prompt)
        if expected_format == "free_text":
            record = self._record(route, "ok", started, reply.input_tokens, reply.output_tokens)
            return Completion(text=reply.text, call_record=record)

        try:
            parsed = extract_json_value(reply.text)
            record = self._record(route, "ok", started, reply.input_tokens, reply.output_tokens)
            return Completion(text=reply.text, parsed_json=parsed, call_record=record)
        except ValueError:
            self._record(route, "parse_error", started, reply.input_tokens, reply.output_tokens)

        log.info(f"{role}: response had no valid JSON, retrying with repair instruction")
        reply, started = await self._generate(route, prompt + JSON_REPAIR_INSTRUCTION)
        try:
            parsed = extract_json_value(reply.text)
        except ValueError:
            self._record(route, "parse_error", started, reply.input_tokens, reply.output_tokens)
            raise LLMParseError(ERROR_MESSAGES.LLM_PARSE(role))
        record = self._record(route, "ok", started, reply.input_tokens, reply.output_tokens)
        return Completion(text=reply.text, parsed_json=parsed, call_record=record)

    async def complete_batch(
        self,
        role: str,
        prompts: list[str],
        max_parallel: Optional[int] = None,
        expected_format: ExpectedFormat = "free_text",
    ) -> list[Completion | LLMError]:
        """
        Run prompts with at most max_parallel in flight. Results come back in
        input order; a failed item holds its LLMError in place.
        """
        if max_parallel is None:
            max_parallel = (
                self.config.extraction_concurrency
                if role == "extraction"
                else self.config.role_concurrency
            )
        if max_parallel < 1:
            raise LLMError(ERROR_MESSAGES.INVALID_MAX_PARALLEL(max_parallel))
        if not prompts:
            return []

        semaphore = asyncio.Semaphore(max_parallel)

        async def _one(prompt: str) -> Completion | LLMError:
            async with semaphore:
                try:
                    return await self.complete(role, prompt, expected_format)
                except LLMError as e:
                    return e

        return list(await asyncio.gather(*[_one(prompt) for prompt in prompts]))


def build_gateway(config: RunConfig, counter: Optional[TokenCounter] = None) -> LLMGateway:
    if config.mock_script:
        backend: Backend = MockBackend(load_mock_script(config.mock_script), counter)
        log.info(f"using mock backend from {config.mock_script}")
    else:
        backend = ChatCompletionsBackend(config.llm_base_url, config.llm_api_key)
    return LLMGateway(backend, config)
