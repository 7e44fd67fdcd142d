"""Domain types shared by every stage of the pipeline.

Nothing in here touches the filesystem, the network or a subprocess.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from fractions import Fraction
from typing import Any, Iterable


class ProofForgeError(Exception):
    """Base class for all errors raised by the package."""


class ConfigError(ProofForgeError):
    pass


class OutOfBudgetError(ProofForgeError):
    pass


class UndefinedRateError(ProofForgeError):
    pass


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


class Strategy(str, Enum):
    FULL_SHARING = "full-sharing"
    DECOUPLED = "decoupled"
    FULLY_DECOUPLED = "fully-decoupled"

    @classmethod
    def parse(cls, text: str) -> "Strategy":
        key = text.strip().lower().replace("_", "-")
        aliases = {"fullsharing": "full-sharing", "fullydecoupled": "fully-decoupled"}
        key = aliases.get(key, key)
        for member in cls:
            if member.value == key:
                return member
        raise ConfigError(f"unknown decomposition strategy: {text!r}")


@dataclass(frozen=True)
class RunConfig:
    """Search budgets and model parameters; defaults follow the evaluation setup."""

    max_generation_attempts_t: int = 10
    retry_budget_s: int = 2
    temperature_step: float = 0.3
    initial_temperature: float = 0.5
    max_tokens: int = 4028
    verifier_timeout_seconds: int = 20
    global_timeout_seconds: int = 500
    verify_at_k: int = 5
    llm_timeout_seconds: int = 20
    strategy: Strategy = Strategy.DECOUPLED
    decompose: str = "auto"  # auto | always | never
    usefulness_check: bool = True

    def __post_init__(self) -> None:
        for name in (
            "max_generation_attempts_t",
            "retry_budget_s",
            "max_tokens",
            "verifier_timeout_seconds",
            "global_timeout_seconds",
            "verify_at_k",
            "llm_timeout_seconds",
        ):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        for name in ("temperature_step", "initial_temperature"):
            value = getattr(self, name)
            if not 0.0 <= float(value) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {value!r}")
        if self.decompose not in ("auto", "always", "never"):
            raise ConfigError(f"decompose must be auto, always or never, got {self.decompose!r}")
        if not isinstance(self.strategy, Strategy):
            object.__setattr__(self, "strategy", Strategy.parse(str(self.strategy)))

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        clean = {k: v for k, v in overrides.items() if v is not None}
        if "strategy" in clean and not isinstance(clean["strategy"], Strategy):
            clean["strategy"] = Strategy.parse(clean["strategy"])
        return replace(self, **clean)

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["strategy"] = self.strategy.value
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        values = dict(data)
        if "strategy" in values:
            values["strategy"] = Strategy.parse(values["strategy"])
        return cls(**values)


def temperature_schedule(config: RunConfig, retry_index: int) -> float:
    """Sampling temperature for the ``retry_index``-th visit of a node (0-based)."""
    if retry_index < 0:
        raise ValueError("retry_index must be non-negative")
    if retry_index >= config.retry_budget_s:
        raise OutOfBudgetError(
            f"retry {retry_index} exceeds the retry budget of {config.retry_budget_s}"
        )
    value = config.initial_temperature - retry_index * config.temperature_step
    # rounding keeps 0.5 - 0.3 from drifting into digests as 0.19999...
    return max(0.0, round(value, 10))


# ---------------------------------------------------------------------------
# Metric
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SuccessRate:
    successes: int
    tasks: int

    @property
    def fraction(self) -> Fraction:
        return Fraction(self.successes, self.tasks)

    @property
    def percent(self) -> Fraction:
        return self.fraction * 100

    def percent_text(self) -> str:
        """Percentage as the evaluation tables print it.

        Exact values with at most one decimal are printed exactly (87.5%);
        anything else is truncated to a whole percent (4/13 -> 30%).
        """
        pct = self.percent
        tenths = pct * 10
        if tenths.denominator == 1:
            whole, rem = divmod(tenths.numerator, 10)
            return f"{whole}%" if rem == 0 else f"{whole}.{rem}%"
        return f"{pct.numerator // pct.denominator}%"

    def __str__(self) -> str:
        return f"{self.percent_text()} ({self.successes}/{self.tasks})"


def verify_at_k(outcomes: Iterable[bool]) -> SuccessRate:
    """Fraction of tasks solved; each outcome is "any of the k runs succeeded"."""
    flags = [bool(x) for x in outcomes]
    if not flags:
        raise UndefinedRateError("verify@k is undefined for an empty task list")
    return SuccessRate(successes=sum(flags), tasks=len(flags))


# ---------------------------------------------------------------------------
# Signatures and proof tree
# ---------------------------------------------------------------------------

_IDENT = re.compile(r"^[A-Za-z_][A-Za-z0-9_'?]*$")
SIGNATURE_KINDS = ("method", "lemma", "function", "predicate")


@dataclass(frozen=True)
class MethodSignature:
    name: str
    parameters: tuple[tuple[str, str], ...] = ()
    returns: tuple[tuple[str, str], ...] = ()
    requires_clauses: tuple[str, ...] = ()
    ensures_clauses: tuple[str, ...] = ()
    kind: str = "lemma"
    decreases_clauses: tuple[str, ...] = ()
    modifiers: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not _IDENT.match(self.name):
            raise ValueError(f"not a Dafny identifier: {self.name!r}")
        if self.kind not in SIGNATURE_KINDS:
            raise ValueError(f"unsupported signature kind: {self.kind!r}")
        for attr in ("parameters", "returns"):
            object.__setattr__(self, attr, tuple(tuple(p) for p in getattr(self, attr)))
        for attr in ("requires_clauses", "ensures_clauses", "decreases_clauses", "modifiers"):
            object.__setattr__(self, attr, tuple(getattr(self, attr)))

    def render(self, indent: str = "") -> str:
        params = ", ".join(f"{n}: {t}" for n, t in self.parameters)
        head = " ".join([*self.modifiers, self.kind, self.name]) + f"({params})"
        if self.kind in ("function", "predicate"):
            if self.returns:
                ((rname, rtype),) = self.returns
                head += f": ({rname}: {rtype})" if rname else f": {rtype}"
        elif self.returns:
            head += " returns (" + ", ".join(f"{n}: {t}" for n, t in self.returns) + ")"
        lines = [indent + head]
        for kw, clauses in (
            ("requires", self.requires_clauses),
            ("ensures", self.ensures_clauses),
            ("decreases", self.decreases_clauses),
        ):
            lines.extend(f"{indent}  {kw} {c}" for c in clauses)
        return "\n".join(lines)

    def normalized_key(self) -> str:
        """Name-independent identity used for cycle and duplicate detection.

        Parameter names are replaced positionally so that two lemmas that
        differ only in naming compare equal.
        """
        renames = {name: f"$p{i}" for i, (name, _) in enumerate(self.parameters)}
        renames.update({name: f"$r{i}" for i, (name, _) in enumerate(self.returns) if name})

        def norm(text: str) -> str:
            parts = re.findall(r"[A-Za-z_][A-Za-z0-9_'?]*|\d+|==>|<==>|<==|==|!=|<=|>=|&&|\|\||::|:=|\.\.|\S", text)
            return " ".join(renames.get(p, p) for p in parts)

        return "|".join(
            [
                "lemma" if self.kind in ("lemma", "method") else self.kind,
                ",".join(norm(t) for _, t in self.parameters),
                ",".join(norm(t) for _, t in self.returns),
                " && ".join(norm(c) for c in self.requires_clauses),
                " && ".join(norm(c) for c in self.ensures_clauses),
            ]
        )

    def contract_equals(self, other: "MethodSignature") -> bool:
        """Same parameters, results and requires/ensures (whitespace-insensitive)."""
        ws = lambda items: tuple(" ".join(str(x).split()) for x in items)  # noqa: E731
        return (
            self.name == other.name
            and tuple(map(ws, self.parameters)) == tuple(map(ws, other.parameters))
            and tuple(map(ws, self.returns)) == tuple(map(ws, other.returns))
            and ws(self.requires_clauses) == ws(other.requires_clauses)
            and ws(self.ensures_clauses) == ws(other.ensures_clauses)
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "kind": self.kind,
            "parameters": [list(p) for p in self.parameters],
            "returns": [list(p) for p in self.returns],
            "requires": list(self.requires_clauses),
            "ensures": list(self.ensures_clauses),
            "decreases": list(self.decreases_clauses),
            "modifiers": list(self.modifiers),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "MethodSignature":
        return cls(
            name=data["name"],
            kind=data.get("kind", "lemma"),
            parameters=tuple(tuple(p) for p in data.get("parameters", ())),
            returns=tuple(tuple(p) for p in data.get("returns", ())),
            requires_clauses=tuple(data.get("requires", ())),
            ensures_clauses=tuple(data.get("ensures", ())),
            decreases_clauses=tuple(data.get("decreases", ())),
            modifiers=tuple(data.get("modifiers", ())),
        )


class NodeStatus(str, Enum):
    PENDING = "pending"
    IN_PROGRESS = "in_progress"
    VERIFIED = "verified"
    EXHAUSTED = "exhausted"  # failed t generations in its final retry
    ABORTED = "aborted"  # killed by the global timeout or a parent rollback


@dataclass
class ProofNode:
    id: str
    signature: MethodSignature
    base_code: str
    parent_id: str | None = None
    textual_proof: str = ""
    working_list: list[MethodSignature] = field(default_factory=list)
    generation_attempts: int = 0
    retries_used: int = 0
    temperature: float = 0.5
    status: NodeStatus = NodeStatus.PENDING
    final_code: str | None = None
    children: list[str] = field(default_factory=list)
    # signatures the node starts every visit with (lifted methods from a decomposition)
    seeded: list[MethodSignature] = field(default_factory=list)
    useful: bool = True

    @property
    def name(self) -> str:
        return self.signature.name


@dataclass
class ProofTree:
    root_id: str
    nodes: dict[str, ProofNode] = field(default_factory=dict)
    # executable bodies of lifted methods, restored when their node is created
    stashed_bodies: dict[str, str] = field(default_factory=dict)
    _counter: int = 0

    @classmethod
    def with_root(cls, node: ProofNode) -> "ProofTree":
        tree = cls(root_id=node.id)
        tree.nodes[node.id] = node
        tree._counter = 1
        return tree

    @property
    def root(self) -> ProofNode:
        return self.nodes[self.root_id]

    def new_id(self) -> str:
        ident = f"n{self._counter}"
        self._counter += 1
        return ident

    def add_child(self, parent: ProofNode, node: ProofNode) -> ProofNode:
        if node.id in self.nodes:
            raise ValueError(f"duplicate node id {node.id}")
        node.parent_id = parent.id
        self.nodes[node.id] = node
        parent.children.append(node.id)
        self.assert_acyclic()
        return node

    def ancestors(self, node: ProofNode) -> list[ProofNode]:
        out = []
        seen = {node.id}
        cur = node
        while cur.parent_id is not None:
            cur = self.nodes[cur.parent_id]
            if cur.id in seen:
                raise ProofForgeError(f"cycle through node {cur.id}")
            seen.add(cur.id)
            out.append(cur)
        return out

    def descendants(self, node: ProofNode) -> list[ProofNode]:
        out = []
        stack = list(reversed(node.children))
        while stack:
            child = self.nodes[stack.pop()]
            out.append(child)
            stack.extend(reversed(child.children))
        return out

    def assert_acyclic(self) -> None:
        for node in self.nodes.values():
            self.ancestors(node)
        roots = [n for n in self.nodes.values() if n.parent_id is None]
        if len(roots) != 1 or roots[0].id != self.root_id:
            raise ProofForgeError("proof tree must have exactly one parentless root")

    def preorder(self) -> list[ProofNode]:
        return [self.root, *self.descendants(self.root)]


@dataclass(frozen=True)
class VerificationTask:
    task_id: str
    program: str
    outline: str = ""
    target: str | None = None  # name of the method whose contract is the goal


# ---------------------------------------------------------------------------
# Verifier outcomes
# ---------------------------------------------------------------------------


class DiagnosticKind(str, Enum):
    SYNTAX_ERROR = "SyntaxError"
    RESOLUTION_ERROR = "ResolutionError"
    ASSERTION_FAILURE = "AssertionFailure"
    INVARIANT_ON_ENTRY = "InvariantOnEntry"
    INVARIANT_MAINTENANCE = "InvariantMaintenance"
    POSTCONDITION_FAILURE = "PostconditionFailure"
    PRECONDITION_CALL_FAILURE = "PreconditionCallFailure"
    TIMEOUT = "Timeout"
    UNKNOWN = "Unknown"


@dataclass(frozen=True)
class RelatedLocation:
    file: str
    line: int
    column: int
    message: str


@dataclass(frozen=True)
class Diagnostic:
    kind: DiagnosticKind
    message: str
    file: str = ""
    line: int | None = None
    column: int | None = None
    severity: str = "error"
    related: tuple[RelatedLocation, ...] = ()

    def describe(self) -> str:
        where = f"line {self.line}" if self.line is not None else "no location"
        return f"{self.kind.value} at {where}: {self.message}"

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "file": self.file,
            "line": self.line,
            "column": self.column,
            "severity": self.severity,
            "message": self.message,
            "related": [asdict(r) for r in self.related],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Diagnostic":
        return cls(
            kind=DiagnosticKind(data["kind"]),
            message=data["message"],
            file=data.get("file", ""),
            line=data.get("line"),
            column=data.get("column"),
            severity=data.get("severity", "error"),
            related=tuple(RelatedLocation(**r) for r in data.get("related", ())),
        )


class VerifierStatus(str, Enum):
    VERIFIED = "Verified"
    FAILED = "Failed"
    TIMEOUT = "Timeout"
    CRASH = "CrashOrUnusable"


@dataclass(frozen=True)
class VerifierReport:
    status: VerifierStatus
    diagnostics: tuple[Diagnostic, ...] = ()
    wall_time_seconds: float = 0.0
    raw_output: str = ""
    command: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "diagnostics", tuple(self.diagnostics))
        if self.status is VerifierStatus.VERIFIED and self.errors:
            raise ValueError("a verified report cannot carry error diagnostics")
        if self.status is VerifierStatus.FAILED and not self.errors:
            raise ValueError("a failed report needs at least one error diagnostic")

    @property
    def verified(self) -> bool:
        return self.status is VerifierStatus.VERIFIED

    @property
    def errors(self) -> list[Diagnostic]:
        return [d for d in self.diagnostics if d.severity == "error"]


# ---------------------------------------------------------------------------
# LLM exchanges
# ---------------------------------------------------------------------------


def request_digest(template_id: str, substitutions: Iterable[tuple[str, str]], temperature: float) -> str:
    """Stable hash of a request; max_tokens is deliberately not part of it."""
    payload = {
        "template_id": template_id,
        "substitutions": sorted([str(k), str(v).replace("\r\n", "\n")] for k, v in substitutions),
        "temperature": f"{float(temperature):.4f}",
    }
    blob = json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class LlmExchange:
    template_id: str
    substitutions: tuple[tuple[str, str], ...]
    temperature: float
    max_tokens: int
    response_text: str
    source: str  # live | cassette | scripted
    truncated: bool = False

    @property
    def request_digest(self) -> str:
        return request_digest(self.template_id, self.substitutions, self.temperature)

    def to_dict(self) -> dict[str, Any]:
        return {
            "template_id": self.template_id,
            "substitutions": [list(p) for p in self.substitutions],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "response_text": self.response_text,
            "source": self.source,
            "truncated": self.truncated,
            "request_digest": self.request_digest,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "LlmExchange":
        return cls(
            template_id=data["template_id"],
            substitutions=tuple((k, v) for k, v in data["substitutions"]),
            temperature=data["temperature"],
            max_tokens=data["max_tokens"],
            response_text=data["response_text"],
            source=data["source"],
            truncated=data.get("truncated", False),
        )


# ---------------------------------------------------------------------------
# Decomposition
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SourceSpan:
    start_line: int
    start_column: int
    end_line: int
    end_column: int
    text: str

    def overlaps(self, other: "SourceSpan") -> bool:
        a = (self.start_line, self.start_column), (self.end_line, self.end_column)
        b = (other.start_line, other.start_column), (other.end_line, other.end_column)
        return a[0] < b[1] and b[0] < a[1]


@dataclass(frozen=True)
class LiftedMethod:
    signature: MethodSignature
    text: str  # full definition, header and body
    original_span: SourceSpan | None


@dataclass(frozen=True)
class CallSite:
    span: SourceSpan  # call statement inside the outer method
    method: str


@dataclass(frozen=True)
class DecompositionPlan:
    strategy: Strategy
    outer_signature: MethodSignature
    outer_text: str
    lifted_methods: tuple[LiftedMethod, ...] = ()
    call_sites: tuple[CallSite, ...] = ()
    program: str = ""  # the full decomposed program

    @property
    def lifted_names(self) -> list[str]:
        return [m.signature.name for m in self.lifted_methods]

    def to_dict(self) -> dict[str, Any]:
        def span(s: SourceSpan | None):
            return None if s is None else asdict(s)

        return {
            "strategy": self.strategy.value,
            "outer_signature": self.outer_signature.to_dict(),
            "outer_text": self.outer_text,
            "lifted_methods": [
                {"signature": m.signature.to_dict(), "text": m.text, "original_span": span(m.original_span)}
                for m in self.lifted_methods
            ],
            "call_sites": [{"span": span(c.span), "method": c.method} for c in self.call_sites],
            "program": self.program,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "DecompositionPlan":
        def span(d):
            return None if d is None else SourceSpan(**d)

        return cls(
            strategy=Strategy.parse(data["strategy"]),
            outer_signature=MethodSignature.from_dict(data["outer_signature"]),
            outer_text=data["outer_text"],
            lifted_methods=tuple(
                LiftedMethod(MethodSignature.from_dict(m["signature"]), m["text"], span(m["original_span"]))
                for m in data.get("lifted_methods", ())
            ),
            call_sites=tuple(CallSite(span(c["span"]), c["method"]) for c in data.get("call_sites", ())),
            program=data.get("program", ""),
        )
