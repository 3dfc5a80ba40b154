import json
import random
import asyncio
import logging
from typing import Any, Optional

from apps.agents.models import (
    AnalysisRequest,
    AuditEntry,
    Finding,
    Hypothesis,
    InsightReport,
    RunStats,
)
from apps.agents.report import synthesize_report
from apps.agents.subagents import intake_finding, intake_hypotheses, run_subagent
from apps.llm.main import LLMGateway
from apps.search.main import TraceIndex
from apps.store.schema import render_schema
from apps.store.main import TraceStore
from apps.tools.analysis import SummaryCache
from apps.tools.main import ToolSession, call_tool, render_tool_result, tool_catalog
from config import SRC_LOG_LEVELS, RunConfig
from constants import ERROR_MESSAGES
from utils.errors import AnalysisAbortedError, LLMBackendError, LLMParseError, LLMTimeoutError
from utils.task import render_prompt

log = logging.getLogger(__name__)
log.setLevel(SRC_LOG_LEVELS["AGENTS"])

MODE_RULES = {
    "full": "Dispatch scouts to propose hypotheses and investigators to validate them.",
    "orchestrator_only": (
        "Subagent dispatch is disabled. Use your own tools, then submit_report with "
        "inline findings that list their affected_trace_ids."
    ),
    "generic_subagents": (
        "Dispatched subagents are untyped: dispatch_scouts asks them to propose "
        "hypotheses, dispatch_investigators asks them to validate one."
    ),
}


def canonical_question(benchmark: str) -> str:
    return render_prompt("canonical_question", BENCHMARK=benchmark).strip()


def prioritize(
    hypotheses: list[Hypothesis],
    capacity: int,
    investigated: set[str] = frozenset(),
    ranking: Optional[list[Any]] = None,
) -> list[Hypothesis]:
    """
    Pick up to `capacity` uninvestigated hypotheses. An orchestrator ranking
    (list of hypothesis ids) is used when it names any valid candidate;
    otherwise sort by evidence count desc, estimated prevalence desc, name asc.
    """
    candidates = {h.id: h for h in hypotheses if h.id not in investigated}
    if ranking:
        ranked = [candidates[r] for r in dict.fromkeys(ranking) if isinstance(r, str) and r in candidates]
        if ranked:
            return ranked[:capacity]
        log.info("orchestrator ranking named no open hypothesis, using fallback order")
    ordered = sorted(
        candidates.values(),
        key=lambda h: (-len(h.evidence), -h.estimated_prevalence.value, h.name),
    )
    return ordered[:capacity]


class AnalysisEngine:
    """
    Orchestrator loop: each turn the orchestrator picks one action
    (dispatch_scouts, dispatch_investigators, submit_report) or calls one of its
    own tools. Hypotheses and findings only change between batches.
    """

    def __init__(
        self,
        request: AnalysisRequest,
        gateway: LLMGateway,
        store: TraceStore,
        index: TraceIndex,
        config: Optional[RunConfig] = None,
    ):
        self.request = request
        self.gateway = gateway
        self.store = store
        self.index = index
        self.config = config or gateway.config
        self.summaries = SummaryCache()

        self.hypotheses: list[Hypothesis] = []
        self.investigated: set[str] = set()
        self.findings: list[Finding] = []
        self.other_findings: list[Finding] = []
        self.audit: list[AuditEntry] = []
        self.suggestions: list[str] = []
        self.stats = RunStats(mode=request.mode)
        self._agent_counter = 0
        self._inline_counter = 0
        self.orchestrator_session = self._session("orchestrator", "orchestrator")

    @property
    def limits(self):
        return self.request.limits

    def _session(self, role: str, agent_id: str) -> ToolSession:
        return ToolSession(
            store=self.store,
            index=self.index,
            gateway=self.gateway,
            role=role,
            config=self.config,
            summaries=self.summaries,
            agent_id=agent_id,
            seed=self.request.seed,
        )

    def _next_agent(self, kind: str) -> str:
        self._agent_counter += 1
        return f"{kind}-{self._agent_counter}"

    def partial_findings(self) -> dict:
        return self.store.remap_trace_ids(
            {
                "query": self.request.query,
                "findings": [f.model_dump() for f in self.findings],
                "other_findings": [f.model_dump() for f in self.other_findings],
                "hypotheses": [h.model_dump() for h in self.hypotheses],
            }
        )

    ####################
    # Scouts
    ####################

    def sample_for(self, agent_number: int) -> list[str]:
        short_ids = [t.short_id for t in self.store.corpus.traces]
        size = min(len(short_ids), self.config.sample_size)
        rng = random.Random(self.request.seed * 1_000_003 + agent_number)
        return sorted(rng.sample(short_ids, size))

    async def _run_scout(self, directive: str, role: str) -> list[Hypothesis]:
        agent_id = self._next_agent("scout" if role == "scout" else "subagent")
        sample = self.sample_for(self._agent_counter)
        variables = dict(
            QUERY=self.request.query,
            DIRECTIVE=directive,
            SAMPLE_SIZE=len(sample),
            SAMPLE_IDS=", ".join(sample),
            SCHEMA=render_schema(self.store.schema),
            TOOLS=tool_catalog(role),
        )
        if role == "scout":
            prompt = render_prompt("scout", **variables)
        else:
            prompt = render_prompt(
                "generic_subagent", TASK=render_prompt("generic_propose", **variables), **variables
            )
        session = self._session(role, agent_id)
        result = await run_subagent(
            session,
            agent_id,
            prompt,
            self.limits.max_subagent_turns,
            lambda payload: intake_hypotheses(payload, self.store, agent_id),
            kind="hypothesis",
        )
        self.audit.extend(result.audit)
        if not result.value:
            log.info(f"{agent_id}: contributed no hypotheses ({result.reason or 'none valid'})")
            return []
        return result.value

    async def dispatch_scouts(self, directives: list[str]) -> list[Hypothesis]:
        role = "subagent" if self.request.mode == "generic_subagents" else "scout"
        directives = [str(d) for d in directives][: self.limits.scout_batch]
        log.info(f"dispatching {len(directives)} {role}s")
        batches = await asyncio.gather(*[self._run_scout(d, role) for d in directives])
        self.stats.scouts_dispatched += len(directives)

        accepted = []
        for hypotheses in batches:
            for hypothesis in hypotheses:
                hypothesis.id = f"h{len(self.hypotheses) + 1}"
                self.hypotheses.append(hypothesis)
                self.suggestions.extend(hypothesis.suggestions)
                accepted.append(hypothesis)
        self.stats.hypotheses = len(self.hypotheses)
        return accepted

    ####################
    # Investigators
    ####################

    async def _run_investigator(self, hypothesis: Hypothesis, role: str) -> Optional[Finding]:
        agent_id = self._next_agent("investigator" if role == "investigator" else "subagent")
        variables = dict(
            QUERY=self.request.query,
            HYPOTHESIS=hypothesis.model_dump_json(indent=1, exclude={"source"}),
            SCHEMA=render_schema(self.store.schema),
            TOOLS=tool_catalog(role),
        )
        if role == "investigator":
            prompt = render_prompt("investigator", **variables)
        else:
            prompt = render_prompt(
                "generic_subagent", TASK=render_prompt("generic_validate", **variables), **variables
            )
        session = self._session(role, agent_id)
        result = await run_subagent(
            session,
            agent_id,
            prompt,
            self.limits.max_subagent_turns,
            lambda payload: intake_finding(payload, self.store, session, agent_id, hypothesis),
            kind="finding",
        )
        self.audit.extend(result.audit)
        return result.value

    def _accept(self, finding: Finding) -> None:
        finding.id = f"f{len(self.findings) + len(self.other_findings) + 1}"
        if finding.status == "confirmed":
            self.findings.append(finding)
        else:
            self.other_findings.append(finding)

    async def dispatch_investigators(self, selected: list[Hypothesis]) -> list[Finding]:
        role = "subagent" if self.request.mode == "generic_subagents" else "investigator"
        log.info(f"dispatching {len(selected)} {role}s")
        for hypothesis in selected:
            self.investigated.add(hypothesis.id)
        results = await asyncio.gather(*[self._run_investigator(h, role) for h in selected])
        self.stats.investigators_dispatched += len(selected)

        accepted = []
        for finding in results:
            if finding is not None:
                self._accept(finding)
                accepted.append(finding)
        self.store.consolidate()
        return accepted

    ####################
    # Orchestrator
    ####################

    def _orchestrator_prompt(self, transcript: list[str], turn: int) -> str:
        hypotheses = "\n".join(
            f"- {h.id}{' (investigated)' if h.id in self.investigated else ''}: {h.name} "
            f"[{len(h.evidence)} evidence, prevalence {h.estimated_prevalence.value:.2f}] {h.description}"
            for h in self.hypotheses
        ) or "(none yet)"
        findings = "\n".join(
            f"- {f.id} [{f.status}, {f.confidence}] {f.name}: {f.summary} "
            f"({f.prevalence.numerator}/{f.prevalence.denominator})"
            for f in [*self.findings, *self.other_findings]
        ) or "(none yet)"
        base = render_prompt(
            "orchestrator",
            QUERY=self.request.query,
            MODE=self.request.mode,
            MODE_RULES=MODE_RULES[self.request.mode],
            SCOUT_BATCH=self.limits.scout_batch,
            INVESTIGATOR_BATCH=self.limits.investigator_batch,
            SCHEMA=render_schema(self.store.schema),
            TOOLS=tool_catalog("orchestrator"),
            HYPOTHESES=hypotheses,
            FINDINGS=findings,
            SUGGESTIONS="\n".join(f"- {s}" for s in self.suggestions) or "(none)",
        )
        footer = (
            f"[orchestrator turn={turn} hypotheses={len(self.hypotheses)} "
            f"findings={len(self.findings)}]"
        )
        return "\n\n".join([base, *transcript, footer])

    def _inline_findings(self, items: Any) -> list[str]:
        """Persist and validate the orchestrator's own findings (no repair round)."""
        notes = []
        for item in items if isinstance(items, list) else []:
            self._inline_counter += 1
            agent_id = f"orchestrator-inline-{self._inline_counter}"
            affected = item.get("affected_trace_ids") if isinstance(item, dict) else None
            if not affected:
                self.audit.append(
                    AuditEntry(agent_id=agent_id, kind="finding", outcome="rejected", reason="no affected_trace_ids")
                )
                continue
            label = f"orchestrator-f{self._inline_counter}"
            try:
                cohort = self.store.save_affected_traces(label, affected, agent_id)
            except Exception as e:
                self.audit.append(
                    AuditEntry(agent_id=agent_id, kind="finding", outcome="rejected", reason=str(e))
                )
                continue
            payload = {**item, "cohort_label": label, "affected_trace_ids": cohort.short_ids}
            result = intake_finding(payload, self.store, None, agent_id)
            if result.value is None:
                self.audit.append(
                    AuditEntry(agent_id=agent_id, kind="finding", outcome="rejected", reason=result.reason)
                )
                notes.append(result.reason)
                continue
            self.audit.extend(result.audit)
            self._accept(result.value)
        return notes

    async def _decide(self, output: Any, transcript: list[str]) -> bool:
        """Apply one orchestrator output; returns True when the report is submitted."""
        mode = self.request.mode
        if not isinstance(output, dict):
            transcript.append(json.dumps({"error": "respond with one JSON object"}))
            return False

        if "tool" in output:
            result = await call_tool(self.orchestrator_session, str(output["tool"]), output.get("args") or {})
            transcript.append(render_tool_result(result))
            return False

        action = output.get("action")
        if action in ("dispatch_scouts", "dispatch_investigators") and mode == "orchestrator_only":
            transcript.append(json.dumps({"error": ERROR_MESSAGES.ILLEGAL_ACTION(action, mode)}))
            log.info(f"rejected {action} in {mode} mode")
            return False

        if action == "dispatch_scouts":
            directives = output.get("directives") or []
            if not isinstance(directives, list) or not directives:
                transcript.append(json.dumps({"error": "dispatch_scouts needs a non-empty 'directives' list"}))
                return False
            accepted = await self.dispatch_scouts(directives)
            transcript.append(
                json.dumps(
                    {
                        "dispatch_result": {
                            "scouts": min(len(directives), self.limits.scout_batch),
                            "hypotheses": [
                                {"id": h.id, "name": h.name, "evidence": len(h.evidence), "suggestions": h.suggestions}
                                for h in accepted
                            ],
                        }
                    },
                    ensure_ascii=False,
                )
            )
            return False

        if action == "dispatch_investigators":
            selected = prioritize(
                self.hypotheses,
                self.limits.investigator_batch,
                self.investigated,
                output.get("hypothesis_ids"),
            )
            if not selected:
                transcript.append(json.dumps({"error": "every hypothesis has already been investigated"}))
                return False
            accepted = await self.dispatch_investigators(selected)
            transcript.append(
                json.dumps(
                    {
                        "dispatch_result": {
                            "investigated": [h.id for h in selected],
                            "findings": [
                                {"id": f.id, "name": f.name, "status": f.status, "confidence": f.confidence}
                                for f in accepted
                            ],
                        }
                    },
                    ensure_ascii=False,
                )
            )
            return False

        if action == "submit_report":
            if mode == "orchestrator_only" and output.get("findings"):
                self._inline_findings(output["findings"])
            return True

        transcript.append(json.dumps({"error": ERROR_MESSAGES.UNKNOWN_ACTION(action)}))
        return False

    async def run(self) -> InsightReport:
        transcript: list[str] = []
        submitted = False
        for turn in range(1, self.limits.max_orchestrator_turns + 1):
            self.stats.rounds = turn
            prompt = self._orchestrator_prompt(transcript, turn)
            try:
                completion = await self.gateway.complete("orchestrator", prompt, expected_format="json")
                output = completion.parsed_json
            except LLMParseError as e:
                transcript.append(json.dumps({"error": e.detail}))
                continue
            except (LLMTimeoutError, LLMBackendError) as e:
                raise AnalysisAbortedError(
                    ERROR_MESSAGES.ANALYSIS_ABORTED(e.detail), partial=self.partial_findings()
                )
            transcript.append(f"YOU: {json.dumps(output, ensure_ascii=False)}")
            if await self._decide(output, transcript):
                submitted = True
                break

        if not submitted:
            log.warning(f"orchestrator turn limit {self.limits.max_orchestrator_turns} reached")
            self.stats.forced_synthesis = True
        return await synthesize_report(
            self.findings,
            self.request.query,
            self.gateway,
            self.store,
            self.stats,
            self.other_findings,
        )


async def run_analysis(
    request: AnalysisRequest,
    gateway: LLMGateway,
    store: TraceStore,
    index: TraceIndex,
    config: Optional[RunConfig] = None,
) -> InsightReport:
    return await AnalysisEngine(request, gateway, store, index, config).run()
