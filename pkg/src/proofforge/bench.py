"""Backend wiring, task descriptors and the verify@k benchmark runner."""

from __future__ import annotations

import json
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .engine import TaskResult, run_task
from .engine.context import RealClock, VirtualClock
from .llm import Cassette, LiveChatBackend, LlmGateway
from .model import ConfigError, RunConfig, VerificationTask, verify_at_k
from .verifier import DafnySubprocess, ScriptedMock

EXPECTED_MARKERS = ("verifiable", "known-hard")


class CorpusError(ConfigError):
    pass


# -- backends -----------------------------------------------------------------


def load_config(path: str | Path | None, **overrides: Any) -> RunConfig:
    """RunConfig from an optional JSON file, then non-None overrides."""
    config = RunConfig()
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        config = RunConfig.from_dict(data)
    return config.with_overrides(**overrides)


def build_llm(mode: str, cassette_path: str | Path | None, config: RunConfig) -> LlmGateway:
    if mode == "replay":
        if cassette_path is None:
            raise ConfigError("replay mode needs --cassette")
        try:
            cassette = Cassette.load(cassette_path, mode="replay")
        except FileNotFoundError as exc:
            raise ConfigError(str(exc)) from exc
        return LlmGateway("replay", cassette=cassette, max_tokens=config.max_tokens)
    backend = LiveChatBackend.from_env(timeout_seconds=config.llm_timeout_seconds)
    if mode == "record":
        if cassette_path is None:
            raise ConfigError("record mode needs --cassette")
        return LlmGateway("record", backend=backend, cassette=Cassette.load(cassette_path, mode="record"),
                          max_tokens=config.max_tokens)
    if mode == "live":
        return LlmGateway("live", backend=backend, max_tokens=config.max_tokens)
    raise ConfigError(f"unknown mode {mode!r}")


def build_verifier(table_path: str | Path | None, config: RunConfig) -> DafnySubprocess | ScriptedMock:
    """A recorded verdict table when given, else the real Dafny executable."""
    if table_path is not None:
        try:
            return ScriptedMock.from_file(table_path, timeout=config.verifier_timeout_seconds)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read verifier table {table_path}: {exc}") from exc
    dafny = DafnySubprocess.from_env(timeout=config.verifier_timeout_seconds)
    dafny.resolve_executable()
    return dafny


def clock_factory_for(verifier: Any) -> Callable[[], Any]:
    # recorded verdicts carry their own wall times, so a virtual clock keeps replays exact
    return VirtualClock if isinstance(verifier, ScriptedMock) else RealClock


# -- corpus -------------------------------------------------------------------


@dataclass
class TaskDescriptor:
    task_id: str
    directory: Path
    program: str
    outline: str = ""
    expected: str | None = None

    @property
    def cassette_path(self) -> Path:
        return self.directory / "cassette.json"

    @property
    def verifier_table_path(self) -> Path:
        return self.directory / "verifier_table.json"

    def to_task(self) -> VerificationTask:
        return VerificationTask(self.task_id, self.program, self.outline)


def load_task(directory: str | Path) -> TaskDescriptor:
    d = Path(directory)
    program = d / "program.dfy"
    if not program.is_file():
        raise CorpusError(f"{d} has no program.dfy")
    outline = d / "outline.md"
    expected_file = d / "expected"
    expected = None
    if expected_file.is_file():
        expected = expected_file.read_text(encoding="utf-8").strip() or None
        if expected is not None and expected not in EXPECTED_MARKERS:
            raise CorpusError(f"{expected_file}: marker must be one of {', '.join(EXPECTED_MARKERS)}")
    return TaskDescriptor(
        task_id=d.name,
        directory=d,
        program=program.read_text(encoding="utf-8"),
        outline=outline.read_text(encoding="utf-8") if outline.is_file() else "",
        expected=expected,
    )


def discover(corpus: str | Path) -> list[TaskDescriptor]:
    root = Path(corpus)
    if not root.is_dir():
        raise CorpusError(f"corpus directory not found: {root}")
    tasks = [load_task(p) for p in sorted(root.iterdir()) if p.is_dir() and (p / "program.dfy").is_file()]
    if not tasks:
        raise CorpusError(f"corpus {root} contains no task directories")
    return tasks


# -- reporting ----------------------------------------------------------------


def _attempt_time(result: TaskResult) -> float:
    """Clock time spent up to and including the successful attempt."""
    total = 0.0
    for a in result.attempts:
        total += a.transcript.totals()["wall_time_seconds"]
        if a.verified:
            break
    return round(total, 6)


def task_record(desc: TaskDescriptor, result: TaskResult) -> dict[str, Any]:
    success = result.success
    return {
        "task_id": desc.task_id,
        "expected": desc.expected,
        "verified": result.verified,
        "attempts": len(result.attempts),
        "statuses": [a.status for a in result.attempts],
        "time_seconds": _attempt_time(result),
        "lemmas": success.lemma_count if success else None,
        "restoration": (success.restoration or {}).get("status") if success else None,
    }


def build_report(records: list[dict[str, Any]], k: int) -> dict[str, Any]:
    rate = verify_at_k(r["verified"] for r in records)
    wins = [r for r in records if r["verified"]]
    return {
        "k": k,
        "tasks": records,
        "verify_at_k": {
            "successes": rate.successes,
            "tasks": rate.tasks,
            "rate": float(rate.fraction),
            "percent": rate.percent_text(),
        },
        "mean_success_time_seconds": round(statistics.fmean(r["time_seconds"] for r in wins), 6) if wins else None,
        "mean_lemmas": round(statistics.fmean(r["lemmas"] for r in wins), 6) if wins else None,
    }


def report_json(report: dict[str, Any]) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def run_bench(
    corpus: str | Path,
    config: RunConfig,
    *,
    mode: str = "replay",
    verifier_table: str | Path | None = None,
    jobs: int = 1,
    on_result: Callable[[TaskDescriptor, TaskResult], None] | None = None,
) -> dict[str, Any]:
    """Run every task of ``corpus`` up to ``config.verify_at_k`` times and build the report.

    Each task gets its own gateway and verifier: the per-task cassette and
    (when present) per-task verdict table take precedence over shared ones.
    """
    tasks = discover(corpus)
    if jobs < 1:
        raise ConfigError("--jobs must be positive")

    def one(desc: TaskDescriptor) -> dict[str, Any]:
        llm = build_llm(mode, desc.cassette_path, config)
        table = desc.verifier_table_path if desc.verifier_table_path.is_file() else verifier_table
        verifier = build_verifier(table, config)
        result = run_task(desc.to_task(), llm, verifier, config, clock_factory=clock_factory_for(verifier))
        if on_result:
            on_result(desc, result)
        return task_record(desc, result)

    if jobs == 1:
        records = [one(d) for d in tasks]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(one, tasks))
    return build_report(records, config.verify_at_k)
