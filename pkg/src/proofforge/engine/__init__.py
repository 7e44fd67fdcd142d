"""Lemma-tree search over a program's proof obligations."""

from .context import BudgetExhaustedError, EngineContext, GlobalTimeoutError, RealClock, ReusePool, VirtualClock
from .nodes import (
    InitError,
    MergeRejectedError,
    gate_verifiability,
    generate_candidate,
    handle_weak_callee_contract,
    init_tree,
    merge_candidate,
    repair_failing_assertion,
    repair_failing_invariant,
    visit_node,
)
from .search import assemble, explore, explore_node, usefulness_check
from .task import AttemptResult, TaskResult, run_attempt, run_task

__all__ = [
    "AttemptResult",
    "BudgetExhaustedError",
    "EngineContext",
    "GlobalTimeoutError",
    "InitError",
    "MergeRejectedError",
    "RealClock",
    "ReusePool",
    "TaskResult",
    "VirtualClock",
    "assemble",
    "explore",
    "explore_node",
    "gate_verifiability",
    "generate_candidate",
    "handle_weak_callee_contract",
    "init_tree",
    "merge_candidate",
    "repair_failing_assertion",
    "repair_failing_invariant",
    "run_attempt",
    "run_task",
    "usefulness_check",
    "visit_node",
]
