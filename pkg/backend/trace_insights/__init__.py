import sys
import json
import asyncio
import logging
import functools
from pathlib import Path
from typing import Any, Callable, Optional

import typer
from pydantic import ValidationError

from apps.agents.main import AnalysisEngine, canonical_question
from apps.agents.models import AnalysisLimits, AnalysisRequest, InsightReport
from apps.agents.report import validate_grounding
from apps.eval.main import (
    coverage_rows,
    pool_and_cluster,
    render_summary,
    rubric_scores,
    run_pairwise,
    summarize,
)
from apps.eval.models import EvalResult, SystemReport
from apps.llm.main import build_gateway
from apps.loop.main import adapters_from_file, run_loop
from apps.loop.models import LoopFile
from apps.search.main import HashingEmbedder, OpenAIEmbedder, build_index
from apps.stats.main import run_test
from apps.store.main import TraceStore
from config import SRC_LOG_LEVELS, RunConfig, load_run_config
from constants import ERROR_MESSAGES, MESSAGES
from utils.errors import AnalysisAbortedError, ConfigError, EvalError, InsightsError
from utils.misc import dumps_stable, get_token_counter, read_jsonl, write_json_atomic

__version__ = "0.1.0"

log = logging.getLogger(__name__)
log.setLevel(SRC_LOG_LEVELS["CLI"])

app = typer.Typer(help="Corpus-level diagnostics for LLM agent execution traces.")
eval_app = typer.Typer(help="Judge-based evaluation of insight reports.")
app.add_typer(eval_app, name="eval")


def handle_errors(func: Callable) -> Callable:
    """Any InsightsError becomes exit code 1 plus one JSON line on stderr."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except InsightsError as e:
            typer.echo(json.dumps(e.to_dict(), ensure_ascii=False), err=True)
            raise typer.Exit(code=1)

    return wrapper


def _version(value: bool) -> None:
    if value:
        typer.echo(__version__)
        raise typer.Exit()


@app.callback()
def main(
    version: bool = typer.Option(
        False, "--version", callback=_version, is_eager=True, help="Print the version and exit."
    ),
):
    pass


####################
# Shared setup
####################


def _read_json(path: Path) -> Any:
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(ERROR_MESSAGES.FILE_NOT_FOUND(str(path)))
    except json.JSONDecodeError as e:
        raise ConfigError(ERROR_MESSAGES.INVALID_JSON_FILE(str(path), str(e)))


def open_store(config: RunConfig, store_dir: Optional[Path] = None) -> TraceStore:
    return TraceStore.open(
        store_dir or config.store_dir or ".",
        chunk_threshold=config.chunk_threshold_tokens,
        notable_threshold=config.notable_correlation,
        counter=get_token_counter(config.tokenizer),
    )


def _embedder(config: RunConfig):
    if config.embedding_model:
        return OpenAIEmbedder(
            config.embedding_model,
            config.embedding_dim,
            url=config.llm_base_url,
            key=config.llm_api_key,
        )
    return HashingEmbedder(config.embedding_dim)


def _load_report(path: Path) -> InsightReport:
    try:
        return InsightReport.model_validate(_read_json(path))
    except ValidationError as e:
        raise ConfigError(ERROR_MESSAGES.INVALID_JSON_FILE(str(path), e.errors()[0]["msg"]))


def parse_report_ref(ref: str) -> SystemReport:
    """SYSTEM:FOLD:PATH"""
    parts = ref.split(":", 2)
    if len(parts) != 3 or not all(parts):
        raise EvalError(ERROR_MESSAGES.INVALID_REPORT_REF(ref))
    system, fold, path = parts
    return SystemReport(system=system, fold=fold, report=_load_report(Path(path)))


####################
# Commands
####################


@app.command()
@handle_errors
def ingest(
    input: Path = typer.Argument(..., help="JSONL file with one trace object per line."),
    store_dir: Path = typer.Option(..., "--store-dir", help="Directory to create the store in."),
    config_file: Optional[Path] = typer.Option(None, "--config", help="Flat JSON run config."),
):
    """Ingest a trace corpus and print a schema summary."""
    config = load_run_config(config_file, store_dir=str(store_dir))
    if not input.exists():
        raise ConfigError(ERROR_MESSAGES.FILE_NOT_FOUND(str(input)))
    try:
        records = [obj for _, obj in read_jsonl(input)]
    except json.JSONDecodeError as e:
        raise ConfigError(ERROR_MESSAGES.INVALID_JSON_FILE(str(input), str(e)))
    store = TraceStore.create(
        records,
        store_dir,
        chunk_threshold=config.chunk_threshold_tokens,
        notable_threshold=config.notable_correlation,
        counter=get_token_counter(config.tokenizer),
    )
    schema = store.schema
    log.info(MESSAGES.INGESTED(schema.n_traces, str(store_dir)))
    summary = {
        "n_traces": schema.n_traces,
        "label_columns": store.corpus.label_columns,
        "columns": [
            {
                "name": c.name,
                "type": c.inferred_type,
                "null_rate": c.null_rate,
                "distinct": c.distinct_count,
            }
            for c in schema.columns
        ],
    }
    typer.echo(dumps_stable(summary, indent=None))


@app.command()
@handle_errors
def analyze(
    store_dir: Path = typer.Option(..., "--store-dir", help="Store created by `ingest`."),
    query: Optional[str] = typer.Option(None, "--query", help="Analysis question."),
    benchmark: str = typer.Option(
        "the benchmark", "--benchmark", help="Benchmark name for the default question when --query is absent."
    ),
    mode: Optional[str] = typer.Option(
        None, "--mode", help="full, orchestrator_only or generic_subagents."
    ),
    seed: Optional[int] = typer.Option(None, "--seed", help="Random seed for scout samples and comparisons."),
    mock_script: Optional[Path] = typer.Option(None, "--mock-script", help="Scripted model responses (no network)."),
    out_dir: Path = typer.Option(Path("."), "--out-dir", help="Where report.json, audit.json and usage.json go."),
    max_orchestrator_turns: Optional[int] = typer.Option(
        None, "--max-orchestrator-turns", help="Orchestrator turn limit."
    ),
    max_subagent_turns: Optional[int] = typer.Option(None, "--max-subagent-turns", help="Subagent turn limit."),
    config_file: Optional[Path] = typer.Option(None, "--config", help="Flat JSON run config."),
):
    """Run the orchestrated analysis and write report.json."""
    config = load_run_config(
        config_file,
        store_dir=str(store_dir),
        mock_script=str(mock_script) if mock_script else None,
        mode=mode,
        seed=seed,
        max_orchestrator_turns=max_orchestrator_turns,
        max_subagent_turns=max_subagent_turns,
    )
    store = open_store(config, store_dir)
    index = build_index(store, _embedder(config), config.bm25_k1, config.bm25_b, config.rrf_k)
    gateway = build_gateway(config, store.counter)
    request = AnalysisRequest(
        query=query or canonical_question(benchmark),
        mode=config.mode,
        seed=config.seed,
        limits=AnalysisLimits(
            max_orchestrator_turns=config.max_orchestrator_turns,
            max_subagent_turns=config.max_subagent_turns,
            scout_batch=config.scout_batch,
            investigator_batch=config.investigator_batch,
        ),
    )
    engine = AnalysisEngine(request, gateway, store, index, config)

    def write_side_files() -> None:
        write_json_atomic(out_dir / "audit.json", [entry.model_dump() for entry in engine.audit])
        write_json_atomic(out_dir / "usage.json", gateway.usage_report().model_dump())

    try:
        report = asyncio.run(engine.run())
    except AnalysisAbortedError as e:
        write_json_atomic(out_dir / "partial_findings.json", e.partial or {})
        write_side_files()
        raise

    write_json_atomic(out_dir / "report.json", report.model_dump())
    write_side_files()
    typer.echo(MESSAGES.REPORT_WRITTEN(str(out_dir / "report.json")))


@app.command()
@handle_errors
def validate(
    report: Path = typer.Argument(..., help="report.json to check."),
    store_dir: Path = typer.Option(..., "--store-dir", help="Store the report was produced from."),
    config_file: Optional[Path] = typer.Option(None, "--config", help="Flat JSON run config."),
):
    """Check every quote, trace id and prevalence of a report against the store."""
    config = load_run_config(config_file, store_dir=str(store_dir))
    store = open_store(config, store_dir)
    violations = validate_grounding(_load_report(report), store)
    typer.echo(dumps_stable([v.model_dump() for v in violations], indent=None))
    if violations:
        typer.echo(
            json.dumps({"error": "grounding_violation", "detail": f"{len(violations)} violations"}),
            err=True,
        )
        raise typer.Exit(code=1)


@app.command()
@handle_errors
def loop(
    loop_config: Path = typer.Argument(..., help="Loop config JSON (loop settings, scaffold, adapters)."),
):
    """Run the analyze, patch and evaluate rounds until saturation; writes loop.json."""
    try:
        spec = LoopFile.model_validate(_read_json(loop_config))
    except ValidationError as e:
        raise ConfigError(ERROR_MESSAGES.INVALID_CONFIG(e.errors()[0]["msg"]))
    adapters = adapters_from_file(
        {
            "runner": spec.runner,
            "analyzer": spec.analyzer,
            "patcher": spec.patcher,
            "evaluator": spec.evaluator,
        }
    )
    history = run_loop(
        spec.loop,
        spec.scaffold,
        adapters["runner"],
        adapters["analyzer"],
        adapters["patcher"],
        adapters["evaluator"],
        history_path=spec.history_path,
    )
    typer.echo(
        dumps_stable(
            {
                "rounds": len(history.records) - 1,
                "terminated_reason": history.terminated_reason,
                "best_val_round": history.best_val_round,
                "history_path": spec.history_path,
            },
            indent=None,
        )
    )


@app.command()
@handle_errors
def stats(
    payload: str = typer.Argument(..., help="Payload JSON file, or - for stdin."),
):
    """Run one statistical test described by a JSON payload."""
    if payload == "-":
        try:
            data = json.loads(sys.stdin.read())
        except json.JSONDecodeError as e:
            raise ConfigError(ERROR_MESSAGES.INVALID_JSON_FILE("<stdin>", str(e)))
    else:
        data = _read_json(Path(payload))
    if not isinstance(data, dict):
        raise ConfigError(ERROR_MESSAGES.INVALID_JSON_FILE(payload, "expected an object"))
    typer.echo(dumps_stable(run_test(data), indent=None))


####################
# Eval
####################


def _eval_gateway(config_file: Optional[Path], mock_script: Optional[Path]):
    config = load_run_config(config_file, mock_script=str(mock_script) if mock_script else None)
    return build_gateway(config, get_token_counter(config.tokenizer))


def _write_result(result: EvalResult, out: Optional[Path]) -> None:
    if out is not None:
        write_json_atomic(out, result.model_dump())
    typer.echo(dumps_stable(result.model_dump(), indent=None))


def _load_result(path: Path, kind: str) -> EvalResult:
    try:
        result = EvalResult.model_validate(_read_json(path))
    except ValidationError as e:
        raise ConfigError(ERROR_MESSAGES.INVALID_JSON_FILE(str(path), e.errors()[0]["msg"]))
    if result.kind != kind:
        raise ConfigError(ERROR_MESSAGES.INVALID_JSON_FILE(str(path), f"expected a {kind} result"))
    return result


@eval_app.command("cluster")
@handle_errors
def eval_cluster(
    reports: list[str] = typer.Argument(..., help="Report references SYSTEM:FOLD:PATH."),
    benchmark: str = typer.Option(..., "--benchmark", help="Benchmark label for the results."),
    out: Optional[Path] = typer.Option(None, "--out", help="Write the result JSON here too."),
    mock_script: Optional[Path] = typer.Option(None, "--mock-script", help="Scripted judge responses."),
    config_file: Optional[Path] = typer.Option(None, "--config", help="Flat JSON run config."),
):
    """Pool all findings and cluster them into union-gold clusters."""
    gateway = _eval_gateway(config_file, mock_script)
    items = [parse_report_ref(ref) for ref in reports]
    clusters = asyncio.run(pool_and_cluster(items, gateway))
    _write_result(EvalResult(benchmark=benchmark, kind="cluster", clusters=clusters), out)


@eval_app.command("coverage")
@handle_errors
def eval_coverage(
    reports: list[str] = typer.Argument(..., help="Report references SYSTEM:FOLD:PATH."),
    clusters: Path = typer.Option(..., "--clusters", help="Result of `eval cluster`."),
    out: Optional[Path] = typer.Option(None, "--out", help="Write the result JSON here too."),
):
    """Coverage of the gold clusters per report."""
    gold = _load_result(clusters, "cluster")
    items = [parse_report_ref(ref) for ref in reports]
    rows = coverage_rows(items, gold.clusters)
    _write_result(EvalResult(benchmark=gold.benchmark, kind="coverage", coverage=rows), out)


@eval_app.command("pairwise")
@handle_errors
def eval_pairwise(
    reports: list[str] = typer.Argument(..., help="Report references SYSTEM:FOLD:PATH."),
    benchmark: str = typer.Option(..., "--benchmark", help="Benchmark label for the results."),
    question: Optional[str] = typer.Option(None, "--question", help="Question the reports answer."),
    out: Optional[Path] = typer.Option(None, "--out", help="Write the result JSON here too."),
    mock_script: Optional[Path] = typer.Option(None, "--mock-script", help="Scripted judge responses."),
    config_file: Optional[Path] = typer.Option(None, "--config", help="Flat JSON run config."),
):
    """Position-swapped pairwise tournament between systems."""
    gateway = _eval_gateway(config_file, mock_script)
    items = [parse_report_ref(ref) for ref in reports]
    rounds = asyncio.run(run_pairwise(items, gateway, question or canonical_question(benchmark)))
    _write_result(EvalResult(benchmark=benchmark, kind="pairwise", rounds=rounds), out)


@eval_app.command("rubric")
@handle_errors
def eval_rubric(
    reports: list[str] = typer.Argument(..., help="Report references SYSTEM:FOLD:PATH."),
    clusters: Path = typer.Option(..., "--clusters", help="Result of `eval cluster`."),
    out: Optional[Path] = typer.Option(None, "--out", help="Write the result JSON here too."),
    mock_script: Optional[Path] = typer.Option(None, "--mock-script", help="Scripted judge responses."),
    config_file: Optional[Path] = typer.Option(None, "--config", help="Flat JSON run config."),
):
    """Rubric scores for every (report, gold cluster) pair."""
    gold = _load_result(clusters, "cluster")
    gateway = _eval_gateway(config_file, mock_script)
    items = [parse_report_ref(ref) for ref in reports]
    scores = asyncio.run(rubric_scores(items, gold.clusters, gateway))
    _write_result(EvalResult(benchmark=gold.benchmark, kind="rubric", scores=scores), out)


@eval_app.command("summarize")
@handle_errors
def eval_summarize(
    results: list[Path] = typer.Argument(..., help="Result files written by the other eval commands."),
    out: Optional[Path] = typer.Option(None, "--out", help="Write the summary JSON here."),
    as_json: bool = typer.Option(False, "--json", help="Print JSON instead of text tables."),
):
    """Fold eval results into win-rate, head-to-head, coverage and rubric tables."""
    loaded = []
    for path in results:
        try:
            loaded.append(EvalResult.model_validate(_read_json(path)))
        except ValidationError as e:
            raise ConfigError(ERROR_MESSAGES.INVALID_JSON_FILE(str(path), e.errors()[0]["msg"]))
    summary = summarize(loaded)
    if out is not None:
        write_json_atomic(out, summary)
    typer.echo(dumps_stable(summary) if as_json else render_summary(summary))


if __name__ == "__main__":
    app()
