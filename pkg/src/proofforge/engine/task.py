"""End-to-end attempt: verify as given, decompose, search, assemble, restore, re-verify."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

from .. import syntax
from ..llm.gateway import LlmGateway
from ..model import DecompositionPlan, NodeStatus, ProofTree, RunConfig, VerificationTask
from ..refactor import DecompositionError, choose_target, decompose_until_consistent, restore_code
from ..transcript import EventKind, RunTranscript
from .context import EngineContext, GlobalTimeoutError, RealClock
from .nodes import InitError, init_tree, root_for_failure
from .search import assemble, explore


@dataclass
class AttemptResult:
    status: str  # verified | failed | aborted
    program: str | None
    transcript: RunTranscript
    tree: ProofTree | None = None
    plan: DecompositionPlan | None = None
    restoration: dict[str, Any] | None = None
    lemma_count: int = 0

    @property
    def verified(self) -> bool:
        return self.status == "verified"


@dataclass
class TaskResult:
    task_id: str
    attempts: list[AttemptResult] = field(default_factory=list)

    @property
    def verified(self) -> bool:
        return any(a.verified for a in self.attempts)

    @property
    def success(self) -> AttemptResult | None:
        return next((a for a in self.attempts if a.verified), None)

    @property
    def program(self) -> str | None:
        s = self.success
        return s.program if s else None

    @property
    def transcripts(self) -> list[RunTranscript]:
        return [a.transcript for a in self.attempts]


def _count_lemmas(program: str, original: str) -> int:
    before = syntax.lemma_names(original)
    return len(syntax.lemma_names(program) - before)


def run_attempt(
    task: VerificationTask,
    llm: LlmGateway,
    verifier: Any,
    config: RunConfig,
    *,
    attempt: int = 1,
    clock: Any = None,
) -> AttemptResult:
    ctx = EngineContext.start(
        llm, verifier, config, task.task_id, clock=clock or RealClock(), attempt=attempt, run_config=config.to_dict()
    )
    t = ctx.transcript
    tree = None
    plan = None
    try:
        problems = syntax.check_structure(task.program)
        if problems:
            t.finish("failed", reason="syntax", detail="; ".join(problems))
            return AttemptResult("failed", None, t)
        initial = ctx.verify(task.program, None, "initial")
        if initial.verified:
            t.finish("verified", reason="verified-as-given")
            return AttemptResult("verified", task.program, t)
        target = choose_target(task.program, task.target) if config.decompose != "never" else None
        if target is not None and (config.decompose == "always" or syntax.loop_depth(
            syntax.parse_body(task.program, syntax.find_definition(task.program, target))
        ) >= 2):
            try:
                plan = decompose_until_consistent(
                    task.program, config.strategy, llm, verifier, config=config, method=target, listener=ctx.listener
                )
                ctx.emit(EventKind.DECOMPOSITION, status="accepted", strategy=config.strategy.value,
                         method=target, lifted=plan.lifted_names)
            except DecompositionError as exc:
                ctx.emit(EventKind.DECOMPOSITION, status="abandoned", strategy=config.strategy.value,
                         method=target, reason=str(exc)[:500])
                plan = None
        root_name = None if plan else (task.target or root_for_failure(task.program, list(initial.errors)))
        tree = init_tree(task, config, plan, root_name)
        ctx.tree = tree
        ctx.emit(EventKind.NODE_CREATED, node=tree.root_id, parent=None, name=tree.root.name, decl_kind=tree.root.signature.kind)
        if not explore(ctx):
            t.finish("failed", reason="root-exhausted")
            return AttemptResult("failed", None, t, tree, plan)
        program = assemble(tree)
        restoration = None
        if plan is not None:
            restored = restore_code(task.program, program, plan, llm, verifier, config=config, listener=ctx.listener)
            restoration = restored.report
            ctx.emit(EventKind.RESTORED, complete=restored.complete, rounds=restored.rounds,
                     status=restored.report.get("status"))
            program = restored.program
        final = ctx.verify(program, None, "final")
        if not final.verified:
            t.finish("failed", reason="final-verification")
            return AttemptResult("failed", program, t, tree, plan, restoration)
        t.finish("verified", lemmas=_count_lemmas(program, task.program))
        return AttemptResult("verified", program, t, tree, plan, restoration, _count_lemmas(program, task.program))
    except GlobalTimeoutError:
        if tree is not None:
            for node in tree.nodes.values():
                if node.status in (NodeStatus.PENDING, NodeStatus.IN_PROGRESS):
                    node.status = NodeStatus.ABORTED
        t.finish("aborted", reason="global-timeout")
        return AttemptResult("aborted", None, t, tree, plan)
    except InitError as exc:
        t.finish("failed", reason="init", detail=str(exc))
        return AttemptResult("failed", None, t, tree, plan)


def run_task(
    task: VerificationTask,
    llm: LlmGateway,
    verifier: Any,
    config: RunConfig | None = None,
    *,
    clock_factory: Any = None,
) -> TaskResult:
    """Up to k independent attempts; stops at the first verified one."""
    config = config or RunConfig()
    result = TaskResult(task.task_id)
    for k in range(1, config.verify_at_k + 1):
        clock = clock_factory() if clock_factory else None
        attempt = run_attempt(task, llm, verifier, config, attempt=k, clock=clock)
        result.attempts.append(attempt)
        if attempt.verified:
            break
    return result
