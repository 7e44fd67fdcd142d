"""Append-only event log of one end-to-end attempt."""

from __future__ import annotations

import json
from importlib import resources
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable


class EventKind(str, Enum):
    NODE_CREATED = "NodeCreated"
    VISIT_STARTED = "VisitStarted"
    VISIT_ENDED = "VisitEnded"
    LLM_CALL = "LlmCall"
    LLM_RETRY = "LlmRetry"
    CASSETTE_OVERWRITE = "CassetteOverwrite"
    VERIFIER_RUN = "VerifierRun"
    REPAIR_APPLIED = "RepairApplied"
    LEMMA_PRUNED = "LemmaPruned"
    LEMMA_REUSED = "LemmaReused"
    ROLLBACK = "Rollback"
    DECOMPOSITION = "Decomposition"
    RESTORED = "Restored"
    FINAL_RESULT = "FinalResult"


# fields that depend on the wall clock and are dropped from the canonical form
TIMING_FIELDS = frozenset({"time", "wall_time_seconds"})
RESERVED_FIELDS = frozenset({"seq", "kind", "time"})


@dataclass(frozen=True)
class Event:
    seq: int
    kind: EventKind
    time: float
    data: dict[str, Any] = field(default_factory=dict)

    def to_dict(self, timing: bool = True) -> dict[str, Any]:
        out: dict[str, Any] = {"seq": self.seq, "kind": self.kind.value}
        if timing:
            out["time"] = round(self.time, 6)
        for key, value in self.data.items():
            if timing or key not in TIMING_FIELDS:
                out[key] = value
        return out


class TranscriptClosedError(RuntimeError):
    pass


@dataclass
class RunTranscript:
    task_id: str
    clock: Callable[[], float] | None = None
    events: list[Event] = field(default_factory=list)
    metadata: dict[str, Any] = field(default_factory=dict)
    _t0: float | None = None

    def __post_init__(self) -> None:
        if self.clock is not None and self._t0 is None:
            self._t0 = self.clock()

    def _now(self) -> float:
        if self.clock is None:
            return 0.0
        return self.clock() - (self._t0 or 0.0)

    @property
    def closed(self) -> bool:
        return bool(self.events) and self.events[-1].kind is EventKind.FINAL_RESULT

    def emit(self, kind: EventKind, /, **data: Any) -> Event:
        if self.closed:
            raise TranscriptClosedError("FinalResult already recorded")
        clash = RESERVED_FIELDS & data.keys()
        if clash:
            raise ValueError(f"event data may not use reserved fields {sorted(clash)}")
        event = Event(seq=len(self.events), kind=kind, time=self._now(), data=data)
        self.events.append(event)
        return event

    def finish(self, status: str, /, **data: Any) -> Event:
        return self.emit(EventKind.FINAL_RESULT, status=status, **data)

    # -- queries -------------------------------------------------------------

    def of_kind(self, kind: EventKind) -> list[Event]:
        return [e for e in self.events if e.kind is kind]

    @property
    def final_status(self) -> str | None:
        return self.events[-1].data["status"] if self.closed else None

    def totals(self) -> dict[str, Any]:
        llm = self.of_kind(EventKind.LLM_CALL)
        return {
            "attempts": sum(1 for e in llm if e.data.get("charged")),
            "llm_calls": len(llm),
            "verifier_runs": len(self.of_kind(EventKind.VERIFIER_RUN)),
            "rollbacks": len(self.of_kind(EventKind.ROLLBACK)),
            "wall_time_seconds": round(self.events[-1].time, 6) if self.events else 0.0,
        }

    def to_dict(self, timing: bool = True) -> dict[str, Any]:
        totals = self.totals()
        if not timing:
            totals.pop("wall_time_seconds")
        return {
            "task_id": self.task_id,
            "metadata": self.metadata,
            "events": [e.to_dict(timing=timing) for e in self.events],
            "totals": totals,
        }

    def to_json(self, timing: bool = True) -> str:
        return json.dumps(self.to_dict(timing=timing), indent=2, sort_keys=True) + "\n"

    def canonical(self) -> str:
        """Timing-free serialization; identical for identical replayed runs."""
        return self.to_json(timing=False)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunTranscript":
        transcript = cls(task_id=data["task_id"], metadata=dict(data.get("metadata", {})))
        for raw in data["events"]:
            raw = dict(raw)
            seq = raw.pop("seq")
            kind = EventKind(raw.pop("kind"))
            time = raw.pop("time", 0.0)
            transcript.events.append(Event(seq=seq, kind=kind, time=time, data=raw))
        return transcript


def transcript_schema() -> dict[str, Any]:
    """JSON Schema of the document written by ``verify --transcript``."""
    text = resources.files("proofforge").joinpath("schemas/transcript.schema.json").read_text(encoding="utf-8")
    return json.loads(text)
