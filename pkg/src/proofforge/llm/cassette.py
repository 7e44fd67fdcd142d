"""Record/replay storage for model responses."""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from ..model import ProofForgeError


class CassetteMissError(ProofForgeError):
    def __init__(self, digest: str, template_id: str = ""):
        super().__init__(f"cassette has no response for request {digest} ({template_id or 'unknown template'})")
        self.digest = digest
        self.template_id = template_id


@dataclass
class CassetteEntry:
    digest: str
    template_id: str
    temperature: float
    response: str
    recorded_at: str = ""
    truncated: bool = False

    def to_dict(self) -> dict[str, Any]:
        data = {
            "digest": self.digest,
            "template_id": self.template_id,
            "temperature": self.temperature,
            "response": self.response,
            "recorded_at": self.recorded_at,
        }
        if self.truncated:
            data["truncated"] = True
        return data


@dataclass
class Cassette:
    """A JSON array of entries; later entries win on duplicate digests."""

    mode: str = "replay"  # record | replay
    entries: list[CassetteEntry] = field(default_factory=list)
    path: Path | None = None
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self) -> None:
        if self.mode not in ("record", "replay"):
            raise ValueError(f"cassette mode must be record or replay, got {self.mode!r}")

    @classmethod
    def load(cls, path: str | os.PathLike, mode: str = "replay") -> "Cassette":
        p = Path(path)
        entries = []
        if p.exists():
            for raw in json.loads(p.read_text(encoding="utf-8")):
                entries.append(
                    CassetteEntry(
                        digest=raw["digest"],
                        template_id=raw.get("template_id", ""),
                        temperature=raw.get("temperature", 0.0),
                        response=raw["response"],
                        recorded_at=raw.get("recorded_at", ""),
                        truncated=raw.get("truncated", False),
                    )
                )
        elif mode == "replay":
            raise FileNotFoundError(f"cassette not found: {p}")
        return cls(mode=mode, entries=entries, path=p)

    def lookup(self, digest: str, template_id: str = "") -> CassetteEntry:
        for entry in reversed(self.entries):
            if entry.digest == digest:
                return entry
        raise CassetteMissError(digest, template_id)

    def __contains__(self, digest: str) -> bool:
        return any(e.digest == digest for e in self.entries)

    def record(self, entry: CassetteEntry) -> bool:
        """Store an entry; returns True when it replaced an earlier one."""
        if self.mode != "record":
            raise ProofForgeError("cassette is not in record mode")
        if not entry.recorded_at:
            entry.recorded_at = datetime.now(timezone.utc).replace(microsecond=0).isoformat()
        with self._lock:
            replaced = False
            for i, old in enumerate(self.entries):
                if old.digest == entry.digest:
                    self.entries[i] = entry
                    replaced = True
                    break
            if not replaced:
                self.entries.append(entry)
            if self.path is not None:
                self.save(self.path)
        return replaced

    def to_json(self) -> str:
        return json.dumps([e.to_dict() for e in self.entries], indent=2, ensure_ascii=False) + "\n"

    def save(self, path: str | os.PathLike) -> None:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        tmp = p.with_suffix(p.suffix + ".tmp")
        tmp.write_text(self.to_json(), encoding="utf-8")
        tmp.replace(p)
