import json
import asyncio
import logging
from typing import Any, Callable, Iterable, Optional, TypeVar

import pandas as pd
from pydantic import ValidationError

from apps.agents.models import InsightReport, ReportFinding
from apps.eval.models import (
    CoverageRow,
    EvalResult,
    FindingRef,
    GoldCluster,
    PairwiseRound,
    RoundSlot,
    RubricRow,
    RubricScore,
    SystemReport,
    WinRateRow,
)
from apps.llm.main import LLMGateway
from config import SRC_LOG_LEVELS
from constants import ERROR_MESSAGES
from utils.errors import EvalError
from utils.misc import round_half_up
from utils.task import render_prompt

log = logging.getLogger(__name__)
log.setLevel(SRC_LOG_LEVELS["EVAL"])

T = TypeVar("T")

RUBRIC_DIMENSIONS = ("detection", "mechanism", "evidence", "specificity", "actionability")
COMPOSITE_DIMENSIONS = ("mechanism", "specificity", "actionability")
DETECTED = 2

JUDGE_REPAIR = (
    "\n\nYour previous answer was rejected: {error}\n"
    "Respond again with one JSON value that fixes this."
)


async def _judge(gateway: LLMGateway, prompt: str, parse: Callable[[Any], T]) -> T:
    """One judge call; output failing validation is sent back once with the error."""
    completion = await gateway.complete("judge", prompt, expected_format="json")
    try:
        return parse(completion.parsed_json)
    except (ValidationError, ValueError, TypeError, KeyError, AttributeError) as e:
        error = _first_error(e)
        log.info(f"judge output rejected, asking for repair: {error}")

    completion = await gateway.complete(
        "judge", prompt + JUDGE_REPAIR.format(error=error), expected_format="json"
    )
    try:
        return parse(completion.parsed_json)
    except (ValidationError, ValueError, TypeError, KeyError, AttributeError) as e:
        raise EvalError(ERROR_MESSAGES.JUDGE_INVALID(_first_error(e)))


def _first_error(e: Exception) -> str:
    if isinstance(e, ValidationError):
        err = e.errors()[0]
        return f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}"
    return str(e)


def cited_ids(finding: ReportFinding) -> list[str]:
    ids = [e.trace_id for e in finding.evidence] + list(finding.affected_trace_ids)
    return list(dict.fromkeys(ids))


def report_cited_ids(report: InsightReport) -> set[str]:
    return {tid for finding in report.findings for tid in cited_ids(finding)}


def render_report(report: InsightReport, max_evidence: int = 3) -> str:
    lines = [f"Synthesis: {report.synthesis}", "", "Findings:"]
    for i, f in enumerate(report.findings, start=1):
        lines.append(
            f"{i}. [{f.status}] {f.name} ({f.prevalence.num}/{f.prevalence.den}, {f.confidence} confidence)"
        )
        lines.append(f"   {f.summary}")
        for e in f.evidence[:max_evidence]:
            lines.append(f'   - {e.trace_id}: "{e.quote}"')
        if f.suggested_action:
            lines.append(f"   Suggested action: {f.suggested_action}")
    return "\n".join(lines)


####################
# Union-gold clustering
####################


async def pool_and_cluster(reports: list[SystemReport], gateway: LLMGateway) -> list[GoldCluster]:
    """
    Pool every finding of every report and let one judge call group them into
    canonical clusters. Findings the judge leaves out become singleton clusters.
    """
    if not reports:
        raise EvalError(ERROR_MESSAGES.NO_REPORTS.value)

    pooled: dict[str, tuple[FindingRef, ReportFinding]] = {}
    for item in sorted(reports, key=lambda r: (r.system, r.fold)):
        for index, finding in enumerate(item.report.findings):
            ref = FindingRef(system=item.system, fold=item.fold, index=index)
            pooled[ref.key] = (ref, finding)

    listing = "\n".join(
        json.dumps(
            {
                "ref": key,
                "name": finding.name,
                "summary": finding.summary,
                "trace_ids": cited_ids(finding)[:10],
            },
            ensure_ascii=False,
        )
        for key, (_, finding) in pooled.items()
    )

    def parse(output: Any) -> list[GoldCluster]:
        items = output.get("clusters") if isinstance(output, dict) else output
        if not isinstance(items, list):
            raise ValueError("expected a list of clusters")
        clusters = []
        for item in items:
            members = item.get("members") or []
            unknown = [m for m in members if m not in pooled]
            if unknown:
                raise ValueError(f"unknown finding refs: {', '.join(map(str, unknown))}")
            clusters.append(
                GoldCluster(
                    canonical_name=item.get("canonical_name", ""),
                    description=item.get("description", ""),
                    representative_ids=item.get("representative_ids") or [],
                    member_findings=[pooled[m][0] for m in members],
                )
            )
        return clusters

    clusters = await _judge(
        gateway, render_prompt("judge_cluster", N=len(pooled), FINDINGS=listing), parse
    )

    clustered = {ref.key for c in clusters for ref in c.member_findings}
    for key, (ref, finding) in pooled.items():
        if key not in clustered:
            clusters.append(
                GoldCluster(
                    canonical_name=finding.name[:80],
                    description=finding.summary,
                    representative_ids=cited_ids(finding)[:5],
                    member_findings=[ref],
                )
            )

    for cluster in clusters:
        traces = set(cluster.representative_ids)
        for ref in cluster.member_findings:
            traces.update(cited_ids(pooled[ref.key][1]))
        cluster.member_trace_ids = sorted(traces)

    log.info(f"clustered {len(pooled)} findings into {len(clusters)} gold clusters")
    return clusters


####################
# Coverage
####################


def coverage(report: InsightReport, clusters: list[GoldCluster]) -> float:
    """Fraction of clusters for which the report cites at least one member trace."""
    if not clusters:
        raise EvalError(ERROR_MESSAGES.NO_CLUSTERS.value)
    cited = report_cited_ids(report)
    covered = sum(1 for c in clusters if cited & set(c.member_trace_ids))
    return covered / len(clusters)


def coverage_rows(reports: list[SystemReport], clusters: list[GoldCluster]) -> list[CoverageRow]:
    rows = []
    for item in sorted(reports, key=lambda r: (r.system, r.fold)):
        value = coverage(item.report, clusters)
        rows.append(
            CoverageRow(
                system=item.system,
                fold=item.fold,
                covered=round(value * len(clusters)),
                clusters=len(clusters),
                coverage=value,
            )
        )
    return rows


def fold_mean_coverage(values: Iterable[float]) -> float:
    """Mean of per-fold coverages as a whole percent, e.g. (0.86, 0.88, 0.87) -> 87."""
    values = list(values)
    if not values:
        return 0.0
    return round_half_up(100 * sum(values) / len(values), 0)


####################
# Pairwise tournament
####################


def schedule_tournament(systems: dict[str, list[str]]) -> list[RoundSlot]:
    """
    Every unordered system pair, every fold combination, shown twice with the
    positions swapped. Each system plays (S - 1) * F * F * 2 rounds.
    """
    names = sorted(systems)
    if len(names) < 2:
        raise EvalError(ERROR_MESSAGES.TOO_FEW_SYSTEMS.value)
    slots = []
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            for fold_a in systems[a]:
                for fold_b in systems[b]:
                    slots.append(RoundSlot(system_a=a, fold_a=fold_a, system_b=b, fold_b=fold_b))
                    slots.append(RoundSlot(system_a=b, fold_a=fold_b, system_b=a, fold_b=fold_a))
    return slots


def _parse_verdict(slot: RoundSlot) -> Callable[[Any], PairwiseRound]:
    def parse(output: Any) -> PairwiseRound:
        if not isinstance(output, dict):
            raise ValueError("expected an object with winner, confidence, rationale")
        confidence = output.get("confidence", "med")
        if confidence == "medium":
            confidence = "med"
        return PairwiseRound(
            **slot.model_dump(),
            winner=output.get("winner"),
            confidence=confidence,
            rationale=output.get("rationale", ""),
        )

    return parse


async def run_pairwise(
    reports: list[SystemReport], gateway: LLMGateway, question: str
) -> list[PairwiseRound]:
    systems: dict[str, list[str]] = {}
    for item in reports:
        systems.setdefault(item.system, []).append(item.fold)
    systems = {name: sorted(folds) for name, folds in systems.items()}
    lookup = {item.key: item for item in reports}
    slots = schedule_tournament(systems)
    log.info(f"running {len(slots)} pairwise rounds over {len(systems)} systems")

    async def _round(slot: RoundSlot) -> PairwiseRound:
        prompt = render_prompt(
            "judge_pairwise",
            QUESTION=question,
            REPORT_A=render_report(lookup[f"{slot.system_a}:{slot.fold_a}"].report),
            REPORT_B=render_report(lookup[f"{slot.system_b}:{slot.fold_b}"].report),
        )
        return await _judge(gateway, prompt, _parse_verdict(slot))

    return list(await asyncio.gather(*[_round(slot) for slot in slots]))


def _credit(rounds: Iterable[PairwiseRound], system: str) -> tuple[int, int, int]:
    wins = ties = n = 0
    for r in rounds:
        if system not in (r.system_a, r.system_b):
            continue
        n += 1
        if r.winner == "tie":
            ties += 1
        elif r.winning_system == system:
            wins += 1
    return wins, ties, n


def win_rate(rounds: list[PairwiseRound], system: str) -> float:
    """(wins + 0.5 * ties) / rounds played."""
    wins, ties, n = _credit(rounds, system)
    if n == 0:
        raise EvalError(ERROR_MESSAGES.SYSTEM_NOT_IN_ROUNDS(system))
    return (wins + 0.5 * ties) / n


def win_rate_table(rounds: list[PairwiseRound]) -> list[WinRateRow]:
    systems = sorted({r.system_a for r in rounds} | {r.system_b for r in rounds})
    rows = []
    for system in systems:
        wins, ties, n = _credit(rounds, system)
        rows.append((system, wins, ties, n, (wins + 0.5 * ties) / n))
    rows.sort(key=lambda row: (-row[4], row[0]))
    return [
        WinRateRow(rank=rank, system=s, wins=w, ties=t, rounds=n, win_rate=wr)
        for rank, (s, w, t, n, wr) in enumerate(rows, start=1)
    ]


def head_to_head(rounds: list[PairwiseRound]) -> dict[str, dict[str, Optional[float]]]:
    """Row-vs-column win percentage with half credit for ties; the diagonal is None."""
    systems = sorted({r.system_a for r in rounds} | {r.system_b for r in rounds})
    matrix: dict[str, dict[str, Optional[float]]] = {s: {} for s in systems}
    for row in systems:
        for col in systems:
            if row == col:
                matrix[row][col] = None
                continue
            pair = [r for r in rounds if {r.system_a, r.system_b} == {row, col}]
            if not pair:
                matrix[row][col] = None
                continue
            wins, ties, n = _credit(pair, row)
            matrix[row][col] = 100 * (wins + 0.5 * ties) / n
    return matrix


####################
# Rubric
####################


async def rubric_score(
    item: SystemReport, cluster: GoldCluster, cluster_index: int, gateway: LLMGateway
) -> RubricScore:
    prompt = render_prompt(
        "judge_rubric",
        CLUSTER_NAME=cluster.canonical_name,
        CLUSTER_DESCRIPTION=cluster.description,
        REPRESENTATIVE_IDS=", ".join(cluster.representative_ids) or "(none)",
        REPORT=render_report(item.report),
    )

    def parse(output: Any) -> RubricScore:
        if not isinstance(output, dict):
            raise ValueError("expected an object with the five rubric dimensions")
        return RubricScore(
            system=item.system,
            fold=item.fold,
            cluster=cluster_index,
            rationale=output.get("rationale", ""),
            **{d: output.get(d) for d in RUBRIC_DIMENSIONS},
        )

    return await _judge(gateway, prompt, parse)


async def rubric_scores(
    reports: list[SystemReport], clusters: list[GoldCluster], gateway: LLMGateway
) -> list[RubricScore]:
    if not clusters:
        raise EvalError(ERROR_MESSAGES.NO_CLUSTERS.value)
    ordered = sorted(reports, key=lambda r: (r.system, r.fold))
    jobs = [
        rubric_score(item, cluster, index, gateway)
        for item in ordered
        for index, cluster in enumerate(clusters)
    ]
    return list(await asyncio.gather(*jobs))


def dimension_means(scores: list[RubricScore]) -> dict[str, float]:
    if not scores:
        return {d: 0.0 for d in RUBRIC_DIMENSIONS}
    return {d: sum(getattr(s, d) for s in scores) / len(scores) for d in RUBRIC_DIMENSIONS}


def composite_of(mechanism: float, specificity: float, actionability: float) -> float:
    return (mechanism + specificity + actionability) / 3


def composite(scores: list[RubricScore]) -> float:
    """Mean of the mechanism, specificity and actionability means; detection and evidence are reported apart."""
    means = dimension_means(scores)
    return composite_of(*(means[d] for d in COMPOSITE_DIMENSIONS))


def detection_rate(scores: list[RubricScore]) -> float:
    if not scores:
        return 0.0
    return sum(1 for s in scores if s.detection >= DETECTED) / len(scores)


def rubric_table(scores: list[RubricScore]) -> list[RubricRow]:
    rows = []
    for system in sorted({s.system for s in scores}):
        subset = [s for s in scores if s.system == system]
        means = dimension_means(subset)
        rows.append(
            RubricRow(
                system=system,
                detection_rate=detection_rate(subset),
                composite=composite(subset),
                **means,
            )
        )
    return rows


####################
# Aggregation
####################


def benchmark_average(values: Iterable[float], ndigits: int = 1) -> float:
    """Mean across benchmarks, rounded half-up: (72.4, 83.3) -> 77.9."""
    values = list(values)
    if not values:
        return 0.0
    return round_half_up(sum(values) / len(values), ndigits)


def summarize(results: list[EvalResult]) -> dict:
    """Fold every eval result into per-benchmark tables plus cross-benchmark averages."""
    benchmarks: dict[str, dict] = {}
    for result in sorted(results, key=lambda r: (r.benchmark, r.kind)):
        entry = benchmarks.setdefault(result.benchmark, {})
        if result.kind == "coverage":
            by_system: dict[str, list[float]] = {}
            for row in result.coverage:
                by_system.setdefault(row.system, []).append(row.coverage)
            entry["coverage"] = {s: fold_mean_coverage(v) for s, v in sorted(by_system.items())}
        elif result.kind == "pairwise":
            entry["win_rates"] = [
                {**row.model_dump(), "win_rate": round_half_up(100 * row.win_rate, 1)}
                for row in win_rate_table(result.rounds)
            ]
            entry["head_to_head"] = {
                row: {col: None if v is None else round_half_up(v, 1) for col, v in cols.items()}
                for row, cols in head_to_head(result.rounds).items()
            }
        elif result.kind == "rubric":
            entry["rubric"] = [
                {
                    key: round_half_up(value, 2) if isinstance(value, float) else value
                    for key, value in row.model_dump().items()
                }
                for row in rubric_table(result.scores)
            ]
        elif result.kind == "cluster":
            entry["clusters"] = len(result.clusters)

    systems = sorted(
        {row["system"] for entry in benchmarks.values() for row in entry.get("win_rates", [])}
        | {s for entry in benchmarks.values() for s in entry.get("coverage", {})}
        | {row["system"] for entry in benchmarks.values() for row in entry.get("rubric", [])}
    )
    overall = []
    for system in systems:
        row: dict[str, Any] = {"system": system}
        for metric in ("win_rate", "coverage", "composite"):
            per_benchmark = {}
            for name, entry in benchmarks.items():
                value = _metric(entry, metric, system)
                if value is not None:
                    per_benchmark[name] = value
            row[metric] = per_benchmark
            ndigits = 2 if metric == "composite" else 1
            row[f"{metric}_avg"] = (
                benchmark_average(per_benchmark.values(), ndigits) if per_benchmark else None
            )
        overall.append(row)
    return {"benchmarks": benchmarks, "overall": overall}


def _metric(entry: dict, metric: str, system: str) -> Optional[float]:
    if metric == "coverage":
        return entry.get("coverage", {}).get(system)
    rows = entry.get("rubric" if metric == "composite" else "win_rates", [])
    for row in rows:
        if row["system"] == system:
            return row[metric]
    return None


def render_summary(summary: dict) -> str:
    """Aligned text tables: overall, then per benchmark win rates, head-to-head and rubric."""
    sections = []
    benchmarks = sorted(summary["benchmarks"])

    if summary["overall"]:
        records = []
        for row in summary["overall"]:
            record: dict[str, Any] = {"system": row["system"]}
            for metric, label in (("win_rate", "WR"), ("coverage", "Cov"), ("composite", "Comp")):
                for name in benchmarks:
                    record[f"{label} {name}"] = row[metric].get(name, "--")
                record[f"{label} Avg"] = "--" if row[f"{metric}_avg"] is None else row[f"{metric}_avg"]
            records.append(record)
        frame = pd.DataFrame.from_records(records)
        sections.append("Overall\n" + frame.to_string(index=False))

    for name in benchmarks:
        entry = summary["benchmarks"][name]
        if entry.get("win_rates"):
            frame = pd.DataFrame.from_records(entry["win_rates"])
            sections.append(f"{name}: win rate (%)\n" + frame.to_string(index=False))
        if entry.get("head_to_head"):
            frame = pd.DataFrame(entry["head_to_head"]).T.fillna("--")
            sections.append(f"{name}: head-to-head (row vs column, %)\n" + frame.to_string())
        if entry.get("rubric"):
            frame = pd.DataFrame.from_records(entry["rubric"])
            sections.append(f"{name}: rubric\n" + frame.to_string(index=False))
    return "\n\n".join(sections) + "\n"
