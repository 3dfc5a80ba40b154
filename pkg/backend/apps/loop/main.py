import logging
import subprocess
from pathlib import Path
from typing import Callable, Optional, Protocol

from pydantic import ValidationError

from apps.agents.models import InsightReport
from apps.eval.main import render_report
from apps.loop.models import (
    AdapterRequest,
    AdapterResponse,
    AdapterSpec,
    LoopConfig,
    LoopHistory,
    RoundRecord,
    TerminationReason,
)
from config import SRC_LOG_LEVELS
from constants import ERROR_MESSAGES
from utils.errors import LoopError
from utils.misc import write_json_atomic
from utils.task import render_prompt

log = logging.getLogger(__name__)
log.setLevel(SRC_LOG_LEVELS["LOOP"])

# float slack when comparing a gain against epsilon
GAIN_TOLERANCE = 1e-9


####################
# Saturation
####################


def _stagnant_rounds(history: list[float], epsilon: float) -> int:
    """Trailing post-baseline rounds that failed to beat the best earlier score by more than epsilon."""
    count = 0
    for k in range(len(history) - 1, 0, -1):
        best_before = max(history[:k])
        if history[k] - best_before > epsilon + GAIN_TOLERANCE:
            break
        count += 1
    return count


def stop_reason(history: list[float], config: LoopConfig) -> Optional[TerminationReason]:
    """history[0] is the baseline; improvement is judged against best-so-far, not the previous round."""
    last_round = len(history) - 1
    at_max = last_round >= config.max_rounds
    saturated = last_round >= 1 and _stagnant_rounds(history, config.epsilon) >= config.patience
    if at_max and saturated:
        return "max_rounds+patience"
    if at_max:
        return "max_rounds"
    if saturated:
        return "patience"
    return None


def should_stop(history: list[float], config: LoopConfig) -> bool:
    return stop_reason(history, config) is not None


####################
# Adapters
####################


class Adapter(Protocol):
    name: str

    def __call__(self, request: AdapterRequest) -> AdapterResponse: ...


class ProcessAdapter:
    """An external process: one JSON request on stdin, one JSON response on stdout."""

    def __init__(self, name: str, spec: AdapterSpec):
        self.name = name
        self.spec = spec

    def __call__(self, request: AdapterRequest) -> AdapterResponse:
        try:
            completed = subprocess.run(
                self.spec.command,
                input=request.model_dump_json(),
                capture_output=True,
                text=True,
                timeout=self.spec.timeout,
                check=False,
            )
        except (OSError, subprocess.TimeoutExpired) as e:
            return AdapterResponse(ok=False, error=str(e))
        if completed.returncode != 0:
            stderr = completed.stderr.strip().splitlines()
            return AdapterResponse(
                ok=False,
                error=f"exit {completed.returncode}: {stderr[-1] if stderr else ''}",
            )
        try:
            return AdapterResponse.model_validate_json(completed.stdout)
        except ValidationError as e:
            return AdapterResponse(ok=False, error=f"bad response: {e.errors()[0]['msg']}")


class CallableAdapter:
    """In-process adapter around a function taking and returning plain dicts."""

    def __init__(self, name: str, func: Callable[[dict], dict]):
        self.name = name
        self.func = func
        self.calls: list[AdapterRequest] = []

    def __call__(self, request: AdapterRequest) -> AdapterResponse:
        self.calls.append(request)
        try:
            return AdapterResponse.model_validate(self.func(request.model_dump()))
        except Exception as e:
            return AdapterResponse(ok=False, error=str(e))


def _health(adapter: Adapter) -> None:
    response = adapter(AdapterRequest(step="health"))
    if not response.ok:
        raise LoopError(ERROR_MESSAGES.ADAPTER_UNHEALTHY(adapter.name, response.error or "not ok"))


def _call(adapter: Adapter, step: str, round: int, **inputs) -> dict:
    log.debug(f"round {round}: {step} via {adapter.name}")
    response = adapter(AdapterRequest(step=step, round=round, inputs=inputs))
    if not response.ok:
        raise LoopError(ERROR_MESSAGES.ADAPTER_FAILED(step, round, response.error or "not ok"))
    return response.outputs


def _score(outputs: dict, key: str, required: bool = True) -> Optional[float]:
    value = outputs.get(key)
    if value is None:
        if required:
            raise LoopError(ERROR_MESSAGES.MISSING_FIELD(key))
        return None
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise LoopError(ERROR_MESSAGES.SCORE_OUT_OF_RANGE(key, value))
    if not 0 <= value <= 1:
        raise LoopError(ERROR_MESSAGES.SCORE_OUT_OF_RANGE(key, value))
    return value


def patcher_prompt(scaffold_ref: str, report_ref: Optional[str]) -> str:
    """Patcher instructions; the report section is present only when a report exists."""
    report_section = ""
    if report_ref is not None:
        report_section = render_prompt("patcher_report", REPORT=_report_text(report_ref))
    return render_prompt("patcher", SCAFFOLD=scaffold_ref, REPORT_SECTION=report_section)


def _report_text(report_ref: str) -> str:
    path = Path(report_ref)
    if path.is_file():
        try:
            return render_report(InsightReport.model_validate_json(path.read_text()))
        except (ValidationError, OSError):
            log.warning(f"report {report_ref} is not a readable report, passing its reference")
    return report_ref


####################
# Controller
####################


def _best_round(records: list[RoundRecord], key: str) -> Optional[int]:
    scored = [(getattr(r, key), -r.round, r.round) for r in records if getattr(r, key) is not None]
    if not scored:
        return None
    return max(scored)[2]


def load_history(path: Optional[str | Path], config: LoopConfig, scaffold: str) -> LoopHistory:
    if path is not None and Path(path).exists():
        history = LoopHistory.model_validate_json(Path(path).read_text())
        if history.config != config or history.scaffold != scaffold:
            log.warning(f"{path} was written for a different loop setup, starting over")
        else:
            log.info(f"resuming from {path} after round {len(history.records) - 1}")
            return history
    return LoopHistory(config=config, scaffold=scaffold)


def run_loop(
    config: LoopConfig,
    scaffold0: str,
    runner: Adapter,
    analyzer: Optional[Adapter],
    patcher: Adapter,
    evaluator: Adapter,
    history_path: Optional[str | Path] = None,
) -> LoopHistory:
    """
    Round 0 evaluates the starting scaffold. Each later round runs the current
    scaffold, analyzes its traces (with_report mode only), patches it and
    evaluates the patch. History is saved after every round, so a rerun with
    the same history_path resumes where the last one stopped.
    """
    if config.mode == "with_report" and analyzer is None:
        raise LoopError(ERROR_MESSAGES.ADAPTER_UNHEALTHY("analyzer", "required in with_report mode"))
    history = load_history(history_path, config, scaffold0)
    if history.status == "finished":
        return history

    adapters = [runner, patcher, evaluator] + ([analyzer] if config.mode == "with_report" else [])
    for adapter in {id(a): a for a in adapters}.values():
        _health(adapter)

    def save() -> None:
        history.best_val_round = _best_round(history.records, "val_score")
        history.best_test_round = _best_round(history.records, "test_score")
        if history_path is not None:
            write_json_atomic(history_path, history.model_dump(mode="json"))

    history.status = "running"
    history.failure = None
    try:
        if not history.records:
            outputs = _call(evaluator, "evaluate", 0, scaffold=scaffold0, split="validation")
            history.records.append(
                RoundRecord(
                    round=0,
                    scaffold_ref=scaffold0,
                    val_score=_score(outputs, "val_score"),
                    test_score=_score(outputs, "test_score", required=False),
                )
            )
            log.info(f"round 0: baseline validation {history.records[0].val_score:.3f}")
            save()

        while (reason := stop_reason(history.val_scores, config)) is None:
            r = len(history.records)
            scaffold = history.records[-1].scaffold_ref
            traces = _call(runner, "run", r, scaffold=scaffold).get("traces")
            report = None
            if config.mode == "with_report":
                report = _call(analyzer, "analyze", r, traces=traces).get("report")
            patched = _call(
                patcher,
                "patch",
                r,
                scaffold=scaffold,
                report=report,
                prompt=patcher_prompt(scaffold, report),
            ).get("scaffold")
            if not patched:
                raise LoopError(ERROR_MESSAGES.MISSING_FIELD("scaffold"))
            outputs = _call(evaluator, "evaluate", r, scaffold=patched, split="validation")
            history.records.append(
                RoundRecord(
                    round=r,
                    scaffold_ref=str(patched),
                    traces_ref=None if traces is None else str(traces),
                    report_ref=None if report is None else str(report),
                    val_score=_score(outputs, "val_score"),
                    test_score=_score(outputs, "test_score", required=False),
                )
            )
            log.info(f"round {r}: validation {history.records[-1].val_score:.3f}")
            save()
    except LoopError as e:
        history.status = "failed"
        history.failure = e.detail
        log.error(f"loop aborted: {e.detail}")
        save()
        raise

    history.status = "finished"
    history.terminated_reason = reason
    log.info(f"loop finished after round {len(history.records) - 1} ({reason})")
    save()
    return history


def adapters_from_file(spec: dict[str, Optional[AdapterSpec]]) -> dict[str, Optional[ProcessAdapter]]:
    return {
        name: None if adapter_spec is None else ProcessAdapter(name, adapter_spec)
        for name, adapter_spec in spec.items()
    }
