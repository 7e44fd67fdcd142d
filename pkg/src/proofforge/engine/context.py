"""Per-attempt state shared by the node operations: budgets, clock, transcript."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Any, Mapping

from ..llm.gateway import LlmGateway
from ..llm.templates import PromptTemplate
from ..model import LlmExchange, ProofForgeError, ProofNode, ProofTree, RunConfig, VerifierReport
from ..transcript import EventKind, RunTranscript
from ..verifier import run_verifier


class GlobalTimeoutError(ProofForgeError):
    """The attempt's wall-clock budget ran out."""


class BudgetExhaustedError(ProofForgeError):
    """A node used up its t generation attempts in the current visit."""


class RealClock:
    def now(self) -> float:
        return time.monotonic()

    def charge(self, seconds: float) -> None:
        pass


@dataclass
class VirtualClock:
    """Deterministic clock for mock backends; advanced by reported verifier time."""

    t: float = 0.0
    llm_latency: float = 0.0

    def now(self) -> float:
        return self.t

    def charge(self, seconds: float) -> None:
        self.t += max(0.0, seconds)


@dataclass
class ReusePool:
    """Verified lemma subtrees from abandoned branches, keyed by normalized signature."""

    entries: dict[str, dict[str, Any]] = field(default_factory=dict)

    def offer(self, key: str, name: str, definitions: dict[str, str]) -> None:
        self.entries.setdefault(key, {"name": name, "definitions": definitions})

    def get(self, key: str) -> dict[str, Any] | None:
        return self.entries.get(key)

    def listing(self) -> str:
        if not self.entries:
            return "(none)"
        return "\n\n".join(e["definitions"][e["name"]] for e in self.entries.values())


@dataclass
class EngineContext:
    llm: LlmGateway
    verifier: Any
    config: RunConfig
    transcript: RunTranscript
    clock: Any = field(default_factory=RealClock)
    deadline: float = float("inf")
    tree: ProofTree | None = None
    pool: ReusePool = field(default_factory=ReusePool)

    @classmethod
    def start(cls, llm: LlmGateway, verifier: Any, config: RunConfig, task_id: str, clock: Any = None,
              **metadata: Any) -> "EngineContext":
        clock = clock or RealClock()
        transcript = RunTranscript(task_id, clock=clock.now, metadata=dict(metadata))
        return cls(llm, verifier, config, transcript, clock, clock.now() + config.global_timeout_seconds)

    # -- time ------------------------------------------------------------------

    def remaining(self) -> float:
        return self.deadline - self.clock.now()

    def check_time(self) -> None:
        if self.remaining() <= 0:
            raise GlobalTimeoutError("global timeout reached")

    def emit(self, kind: EventKind, /, **data: Any) -> None:
        # work that ends exactly on the deadline is still logged; nothing after it is
        if self.remaining() < 0:
            raise GlobalTimeoutError("global timeout reached")
        self.transcript.emit(kind, **data)

    # -- backends --------------------------------------------------------------

    def listener(self, kind: str, /, **data: Any) -> None:
        """Adapter for events raised inside the gateway and the refactor engine."""
        if kind == "LlmCall":
            ex: LlmExchange = data.pop("exchange")
            self.clock.charge(getattr(self.clock, "llm_latency", 0.0))
            self.emit(EventKind.LLM_CALL, node=data.pop("node", None), **_exchange_fields(ex), **data)
        elif kind == "VerifierRun":
            report: VerifierReport = data.pop("report")
            self.clock.charge(report.wall_time_seconds)
            self.emit(EventKind.VERIFIER_RUN, node=data.pop("node", None), **_report_fields(report), **data)
        elif kind == "LlmRetry":
            self.emit(EventKind.LLM_RETRY, **data)
        elif kind == "CassetteOverwrite":
            self.emit(EventKind.CASSETTE_OVERWRITE, **data)

    def call_llm(
        self,
        template: PromptTemplate,
        substitutions: Mapping[str, str],
        node: ProofNode,
        *,
        charged: bool,
        purpose: str,
    ) -> LlmExchange:
        """One model call on behalf of ``node``; charged calls draw from its t budget."""
        self.check_time()
        if charged:
            if node.generation_attempts >= self.config.max_generation_attempts_t:
                raise BudgetExhaustedError(f"{node.id} used its {self.config.max_generation_attempts_t} attempts")
            node.generation_attempts += 1
        subs = dict(substitutions)
        if "attempt" in template.placeholders:
            subs["attempt"] = f"{node.id}.{node.retries_used}.{node.generation_attempts}"
        ex = self.llm.complete(template, subs, node.temperature, self.config.max_tokens, listener=self.listener)
        self.listener("LlmCall", exchange=ex, node=node.id, charged=charged, purpose=purpose)
        return ex

    def charge_failure(self, node: ProofNode) -> None:
        """Count a failed step (e.g. an unparseable verdict) against the node budget."""
        if node.generation_attempts >= self.config.max_generation_attempts_t:
            raise BudgetExhaustedError(f"{node.id} used its attempts")
        node.generation_attempts += 1

    def verify(self, program: str, node: ProofNode | None, purpose: str) -> VerifierReport:
        self.check_time()
        # rounding up: a run clipped by the deadline then exhausts it and aborts the attempt
        budget = min(float(self.config.verifier_timeout_seconds), self.remaining())
        report = run_verifier(program, self.verifier, max(1, math.ceil(budget)))
        self.listener("VerifierRun", report=report, node=None if node is None else node.id, purpose=purpose)
        return report


def _exchange_fields(ex: LlmExchange) -> dict[str, Any]:
    return {
        "template_id": ex.template_id,
        "digest": ex.request_digest,
        "temperature": ex.temperature,
        "max_tokens": ex.max_tokens,
        "source": ex.source,
        "truncated": ex.truncated,
    }


def _report_fields(report: VerifierReport) -> dict[str, Any]:
    return {
        "status": report.status.value,
        "wall_time_seconds": round(report.wall_time_seconds, 3),
        "diagnostics": [d.kind.value for d in report.diagnostics if d.severity == "error"],
        "command": list(report.command),
    }
