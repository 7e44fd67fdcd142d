"""Running Dafny and turning its output into structured diagnostics."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import shutil
import signal
import subprocess
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

from . import syntax
from .model import (
    Diagnostic,
    DiagnosticKind,
    MethodSignature,
    ProofForgeError,
    RelatedLocation,
    VerifierReport,
    VerifierStatus,
)

log = logging.getLogger(__name__)

# teardown grace: the gateway kills the process at the deadline and allows this much for cleanup
KILL_GRACE_SECONDS = 1.0


class VerifierEnvironmentError(ProofForgeError):
    """The verifier cannot be run at all (missing executable, bad install)."""


class UnknownProgramError(ProofForgeError):
    """A scripted mock was asked about a program text it has no verdict for."""

    def __init__(self, digest: str, program: str):
        super().__init__(f"scripted verifier has no verdict for program digest {digest}")
        self.digest = digest
        self.program = program


class DeclarationConflictError(ProofForgeError):
    pass


def program_digest(program_text: str) -> str:
    return hashlib.sha256(program_text.replace("\r\n", "\n").encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Classification
# ---------------------------------------------------------------------------

# (kind, pattern) pairs checked in order against the message of each error line.
# Both the Dafny 4 wording and the older 3.x wording are accepted.
_MESSAGE_RULES: list[tuple[DiagnosticKind, re.Pattern[str]]] = [
    (DiagnosticKind.TIMEOUT, re.compile(r"timed out|time ?out|out of resource", re.I)),
    (DiagnosticKind.INVARIANT_ON_ENTRY, re.compile(
        r"(loop )?invariant (could not be proved|might not hold) on entry"
        r"|invariant could not be proved to hold on entry", re.I)),
    (DiagnosticKind.INVARIANT_MAINTENANCE, re.compile(
        r"invariant (could not be proved to be|might not be) maintained", re.I)),
    (DiagnosticKind.POSTCONDITION_FAILURE, re.compile(
        r"postcondition (could not be proved|might not hold)", re.I)),
    (DiagnosticKind.PRECONDITION_CALL_FAILURE, re.compile(
        r"precondition for this call (could not be proved|might not hold)", re.I)),
    (DiagnosticKind.ASSERTION_FAILURE, re.compile(
        r"assertion (might not hold|could not be proved|violation)", re.I)),
]

_LOCATED = re.compile(
    r"^(?P<file>.*?)\((?P<line>\d+),(?P<col>\d+)\):\s*(?P<sev>Error|Warning|Info|Related location)\s*:?\s*(?P<msg>.*)$"
)
_BARE_ERROR = re.compile(r"^(?P<sev>Error|Warning)\s*:\s*(?P<msg>.*)$")
_PARSE_SUMMARY = re.compile(r"(\d+) parse errors? detected", re.I)
_RESOLVE_SUMMARY = re.compile(r"(\d+) (resolution/type|resolution|type) errors? detected", re.I)
_VERIFIER_SUMMARY = re.compile(r"Dafny program verifier finished with (\d+) verified, (\d+) errors?(?:, (\d+) time ?outs?)?", re.I)
_PROCESS_TIMEOUT_MARK = "<<proofforge: verifier process killed at deadline>>"


def _kind_for(message: str, phase: str | None) -> DiagnosticKind:
    for kind, pattern in _MESSAGE_RULES:
        if pattern.search(message):
            return kind
    if phase == "parse":
        return DiagnosticKind.SYNTAX_ERROR
    if phase == "resolve":
        return DiagnosticKind.RESOLUTION_ERROR
    return DiagnosticKind.UNKNOWN


def _phase(raw_output: str) -> str | None:
    if _PARSE_SUMMARY.search(raw_output):
        return "parse"
    if _RESOLVE_SUMMARY.search(raw_output):
        return "resolve"
    return None


def _classify_json_lines(raw_output: str) -> list[Diagnostic] | None:
    """Parse ``--json-diagnostics`` style output; None if it is not that format."""
    records = []
    for line in raw_output.splitlines():
        stripped = line.strip()
        if not stripped.startswith("{"):
            continue
        try:
            obj = json.loads(stripped)
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict) and "message" in obj and "location" in obj:
            records.append(obj)
    if not records:
        return None
    phase = _phase(raw_output)
    out = []
    for obj in records:
        severity = obj.get("severity", 1)
        sev = {1: "error", 2: "warning", 3: "info", 4: "info"}.get(severity, str(severity).lower())
        if sev not in ("error", "warning", "info"):
            sev = "error"
        loc = obj.get("location") or {}
        start = ((loc.get("range") or {}).get("start")) or {}
        line = start.get("line")
        col = start.get("character")
        source = str(obj.get("source", "")).lower()
        kind_phase = phase or {"parser": "parse", "resolver": "resolve"}.get(source)
        message = obj["message"]
        related = []
        for rel in obj.get("relatedInformation") or ():
            rloc = rel.get("location") or {}
            rstart = ((rloc.get("range") or {}).get("start")) or {}
            related.append(
                RelatedLocation(
                    file=rloc.get("filename", ""),
                    line=int(rstart.get("line", 0)),
                    column=int(rstart.get("character", 0)) + 1,
                    message=rel.get("message", ""),
                )
            )
        kind = _kind_for(message, kind_phase) if sev == "error" else DiagnosticKind.UNKNOWN
        out.append(
            Diagnostic(
                kind=kind,
                message=message,
                file=loc.get("filename", ""),
                line=int(line) if line is not None else None,
                column=int(col) + 1 if col is not None else None,
                severity=sev,
                related=tuple(related),
            )
        )
    return out


def classify_diagnostics(raw_output: str, exit_code: int | None) -> list[Diagnostic]:
    """Map verifier output to diagnostics, one per error line.

    Total: unrecognised error lines become ``Unknown`` with the verbatim text.
    ``exit_code`` of None means the process was killed at the deadline.
    """
    text = raw_output.replace("\r\n", "\n")
    parsed = _classify_json_lines(text)
    if parsed is not None:
        diags = parsed
    else:
        diags = []
        phase = _phase(text)
        for line in text.splitlines():
            m = _LOCATED.match(line.strip())
            if m:
                sev = m.group("sev")
                if sev == "Related location":
                    if diags:
                        rel = RelatedLocation(m.group("file"), int(m.group("line")), int(m.group("col")), m.group("msg"))
                        last = diags[-1]
                        diags[-1] = Diagnostic(last.kind, last.message, last.file, last.line, last.column,
                                               last.severity, last.related + (rel,))
                    continue
                severity = sev.lower()
                msg = m.group("msg").strip()
                kind = _kind_for(msg, phase) if severity == "error" else DiagnosticKind.UNKNOWN
                diags.append(
                    Diagnostic(kind, msg, m.group("file"), int(m.group("line")), int(m.group("col")), severity)
                )
                continue
            b = _BARE_ERROR.match(line.strip())
            if b and b.group("sev") == "Error":
                msg = b.group("msg").strip()
                diags.append(Diagnostic(_kind_for(msg, phase), msg))
    timed_out_process = exit_code is None or _PROCESS_TIMEOUT_MARK in text
    summary = _VERIFIER_SUMMARY.search(text)
    if summary and summary.group(3) and int(summary.group(3)) > 0 and not any(
        d.kind is DiagnosticKind.TIMEOUT for d in diags
    ):
        diags.append(Diagnostic(DiagnosticKind.TIMEOUT, summary.group(0)))
    if timed_out_process and not any(d.kind is DiagnosticKind.TIMEOUT for d in diags):
        diags.append(Diagnostic(DiagnosticKind.TIMEOUT, "verifier process exceeded its time limit"))
    return diags


def _status_for(diags: list[Diagnostic], exit_code: int | None, raw_output: str) -> VerifierStatus:
    errors = [d for d in diags if d.severity == "error"]
    if any(d.kind is DiagnosticKind.TIMEOUT for d in errors):
        return VerifierStatus.TIMEOUT
    if errors:
        return VerifierStatus.FAILED
    if exit_code == 0:
        return VerifierStatus.VERIFIED
    return VerifierStatus.CRASH


def report_from_output(raw_output: str, exit_code: int | None, wall_time: float = 0.0,
                       command: Iterable[str] = ()) -> VerifierReport:
    diags = classify_diagnostics(raw_output, exit_code)
    status = _status_for(diags, exit_code, raw_output)
    if status is VerifierStatus.CRASH:
        # keep warnings but an unusable run carries no error diagnostics
        diags = [d for d in diags if d.severity != "error"]
    if status is VerifierStatus.VERIFIED:
        diags = [d for d in diags if d.severity != "error"]
    return VerifierReport(status, tuple(diags), wall_time, raw_output, tuple(command))


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------


@dataclass
class DafnySubprocess:
    """Runs ``dafny verify`` on a temporary file."""

    executable: str = "dafny"
    timeout: int = 20
    extra_args: tuple[str, ...] = ()
    _help: str | None = field(default=None, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    flavor = "DafnySubprocess"

    @classmethod
    def from_env(cls, timeout: int = 20) -> "DafnySubprocess":
        return cls(executable=os.environ.get("PF_DAFNY_PATH", "dafny"), timeout=timeout)

    def resolve_executable(self) -> str:
        path = shutil.which(self.executable) if os.sep not in self.executable else self.executable
        if not path or not os.path.exists(path):
            raise VerifierEnvironmentError(f"Dafny executable not found: {self.executable!r}")
        return path

    def _verify_help(self, exe: str) -> str:
        with self._lock:
            if self._help is None:
                try:
                    proc = subprocess.run([exe, "verify", "--help"], capture_output=True, text=True, timeout=60)
                    self._help = proc.stdout + proc.stderr
                except (OSError, subprocess.TimeoutExpired):
                    self._help = ""
            return self._help

    def command(self, path: str, timeout_seconds: int, mode: str = "verify") -> list[str]:
        exe = self.resolve_executable()
        if mode == "resolve":
            return [exe, "resolve", path, *self.extra_args]
        help_text = self._verify_help(exe)
        cmd = [exe, "verify", path, "--verification-time-limit", str(timeout_seconds)]
        if "--allow-warnings" in help_text:
            cmd.append("--allow-warnings")
        if "--json-diagnostics" in help_text:
            cmd.append("--json-diagnostics")
        cmd.extend(self.extra_args)
        return cmd

    def run(self, program_text: str, timeout_seconds: int, mode: str = "verify") -> VerifierReport:
        with tempfile.TemporaryDirectory(prefix="proofforge-") as tmp:
            path = os.path.join(tmp, "program.dfy")
            Path(path).write_text(program_text, encoding="utf-8")
            cmd = self.command(path, timeout_seconds, mode)
            started = time.monotonic()
            try:
                proc = subprocess.Popen(
                    cmd, stdout=subprocess.PIPE, stderr=subprocess.STDOUT, text=True, start_new_session=True
                )
            except OSError as exc:
                raise VerifierEnvironmentError(f"cannot start {cmd[0]}: {exc}") from exc
            try:
                out, _ = proc.communicate(timeout=timeout_seconds)
                code: int | None = proc.returncode
            except subprocess.TimeoutExpired:
                _kill_group(proc)
                try:
                    out, _ = proc.communicate(timeout=KILL_GRACE_SECONDS)
                except subprocess.TimeoutExpired:
                    out = ""
                out = (out or "") + "\n" + _PROCESS_TIMEOUT_MARK + "\n"
                code = None
            elapsed = time.monotonic() - started
        out = (out or "").replace(path, "program.dfy")
        return report_from_output(out, code, elapsed, cmd)

    def resolve(self, program_text: str) -> VerifierReport:
        return self.run(program_text, self.timeout, mode="resolve")


def _kill_group(proc: subprocess.Popen) -> None:
    try:
        os.killpg(proc.pid, signal.SIGKILL)
    except (ProcessLookupError, PermissionError):
        proc.kill()


@dataclass
class ScriptedEntry:
    raw_output: str
    exit_code: int | None = 0
    wall_time_seconds: float = 0.0

    def to_dict(self) -> dict:
        return {"raw_output": self.raw_output, "exit_code": self.exit_code, "wall_time_seconds": self.wall_time_seconds}


VERIFIED_OUTPUT = "\nDafny program verifier finished with 1 verified, 0 errors\n"


@dataclass
class ScriptedMock:
    """Verdicts looked up by the digest of the exact program text.

    An optional ``oracle`` answers misses and records them into ``table`` so a
    test can freeze the table afterwards; without one, a miss is an error.
    """

    table: dict[str, ScriptedEntry] = field(default_factory=dict)
    timeout: int = 20
    oracle: Callable[[str], ScriptedEntry] | None = None
    programs: dict[str, str] = field(default_factory=dict)
    calls: list[str] = field(default_factory=list)

    flavor = "ScriptedMock"

    def add(self, program_text: str, raw_output: str = VERIFIED_OUTPUT, exit_code: int | None = 0,
            wall_time_seconds: float = 0.0) -> str:
        digest = program_digest(program_text)
        self.table[digest] = ScriptedEntry(raw_output, exit_code, wall_time_seconds)
        self.programs[digest] = program_text
        return digest

    def run(self, program_text: str, timeout_seconds: int, mode: str = "verify") -> VerifierReport:
        digest = program_digest(program_text)
        self.calls.append(digest)
        entry = self.table.get(digest)
        if entry is None:
            if self.oracle is None:
                raise UnknownProgramError(digest, program_text)
            entry = self.oracle(program_text)
            self.table[digest] = entry
            self.programs[digest] = program_text
        if entry.wall_time_seconds > timeout_seconds:
            return report_from_output(_PROCESS_TIMEOUT_MARK, None, float(timeout_seconds), ("scripted",))
        return report_from_output(entry.raw_output, entry.exit_code, entry.wall_time_seconds, ("scripted",))

    def resolve(self, program_text: str) -> VerifierReport:
        # structural check stands in for `dafny resolve`
        problems = syntax.check_structure(program_text)
        if problems:
            raw = "\n".join(f"program.dfy(1,0): Error: {p}" for p in problems)
            raw += f"\n{len(problems)} parse errors detected in program.dfy\n"
            return report_from_output(raw, 2, 0.0, ("scripted-resolve",))
        return report_from_output("", 0, 0.0, ("scripted-resolve",))

    # -- persistence ---------------------------------------------------------

    def to_json(self) -> str:
        data = {
            d: {**e.to_dict(), **({"program": self.programs[d]} if d in self.programs else {})}
            for d, e in sorted(self.table.items())
        }
        return json.dumps(data, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_file(cls, path: str | os.PathLike, timeout: int = 20) -> "ScriptedMock":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        mock = cls(timeout=timeout)
        for digest, rec in data.items():
            mock.table[digest] = ScriptedEntry(rec["raw_output"], rec.get("exit_code", 0), rec.get("wall_time_seconds", 0.0))
            if "program" in rec:
                mock.programs[digest] = rec["program"]
        return mock


VerifierBackend = DafnySubprocess | ScriptedMock


def run_verifier(program_text: str, backend: VerifierBackend, timeout_seconds: int | None = None) -> VerifierReport:
    if not program_text.strip():
        raise ValueError("program text is empty")
    timeout = backend.timeout if timeout_seconds is None else timeout_seconds
    return backend.run(program_text, max(1, int(timeout)))


# ---------------------------------------------------------------------------
# Bodiless declarations
# ---------------------------------------------------------------------------


def declare_bodiless(program_text: str, signatures: Iterable[MethodSignature]) -> str:
    """Append each signature as a body-less declaration (idempotent)."""
    out = program_text
    for sig in signatures:
        existing = syntax.find_definition(out, sig.name)
        if existing is not None:
            if existing.has_body:
                raise DeclarationConflictError(f"{sig.name} is already defined with a body")
            current = syntax.parse_signature(out, existing)
            if current.normalized_key() == sig.normalized_key() and current.kind == sig.kind:
                continue
            raise DeclarationConflictError(f"{sig.name} is already declared with a different signature")
        out = out.rstrip("\n") + "\n\n" + sig.render() + "\n"
    return out
