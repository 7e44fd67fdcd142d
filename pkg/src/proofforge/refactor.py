"""Transient code-shape transformations.

Annotation stripping, loop lifting into ``<method>_loop<k>`` helpers, the
consistency gate for a lifted plan, and restoration of a verified modular
program onto the original method shape.
"""

from __future__ import annotations

import difflib
import json
import re
from dataclasses import dataclass, field
from typing import Any, Callable

from . import syntax
from .llm import templates as T
from .llm.gateway import LlmGateway
from .llm.responses import EmptyResponseError, UnparseableVerdictError, extract_code_block, parse_verdict
from .model import (
    CallSite,
    DecompositionPlan,
    LiftedMethod,
    MethodSignature,
    ProofForgeError,
    RunConfig,
    SourceSpan,
    Strategy,
    VerifierStatus,
)
from .syntax import DafnySyntaxError, Definition, Stmt
from .verifier import run_verifier

Listener = Callable[..., None]


class DecompositionError(ProofForgeError):
    """The model never produced a usable plan within the attempt budget."""


class DecompositionAbandonedError(DecompositionError):
    """Every plan was rejected by the consistency gate."""


class PreservationError(ProofForgeError):
    pass


# ---------------------------------------------------------------------------
# Stripping
# ---------------------------------------------------------------------------

_REMOVED_LOOP_SPECS = frozenset({"invariant", "decreases"})


def _removal_span(text: str, start: int, end: int) -> tuple[int, int]:
    s, e = syntax.full_line_span(text, start, end)
    return s, e


def _outermost(spans: list[tuple[int, int]]) -> list[tuple[int, int]]:
    out: list[tuple[int, int]] = []
    for s, e in sorted(spans, key=lambda x: (x[0], -x[1])):
        if out and s < out[-1][1]:
            continue
        out.append((s, e))
    return out


def _strip_method_body(src: str, d: Definition, lemmas: set[str]) -> list[tuple[int, int, str]]:
    edits: list[tuple[int, int, str]] = []
    removals: list[tuple[int, int]] = []
    for stmt in syntax.walk_statements(syntax.parse_body(src, d)):
        if syntax.is_annotation(stmt, lemmas):
            removals.append(_removal_span(src, stmt.start, stmt.end))
            continue
        if stmt.is_loop and stmt.specs:
            gone = [sp for sp in stmt.specs if sp.keyword in _REMOVED_LOOP_SPECS]
            if not gone:
                continue
            if len(gone) == len(stmt.specs):
                # header and '{' end up on one line again
                toks = [t for t in syntax.tokenize(src[stmt.start : stmt.specs[0].start])]
                header_end = stmt.start + toks[-1].end
                edits.append((header_end, stmt.body_open, " "))
            else:
                removals.extend(_removal_span(src, sp.start, sp.end) for sp in gone)
    outer = _outermost(removals)
    # loop-header joins that fall inside a removed statement are moot
    edits = [e for e in edits if not any(s <= e[0] < t for s, t in outer)]
    edits.extend((s, e, "") for s, e in outer)
    return edits


def _drop_lemma_edit(src: str, d: Definition) -> tuple[int, int, str]:
    start, end = syntax.full_line_span(src, d.start, d.end)
    # eat one blank separator line so no double gap is left behind
    if src.startswith("\n", end):
        end += 1
    elif start > 0 and src[:start].endswith("\n\n"):
        start -= 1
    return start, end, ""


def strip_annotations(program_text: str) -> str:
    """Remove proof-only code; contracts and executable statements stay byte-identical."""
    problems = syntax.check_structure(program_text)
    if problems:
        raise DafnySyntaxError("; ".join(problems))
    defs = syntax.scan_definitions(program_text)
    lemmas = {d.name for d in defs if d.kind == "lemma"}
    edits: list[tuple[int, int, str]] = []
    dropped: list[tuple[int, int]] = []
    for d in defs:
        if d.kind == "lemma":
            dropped.append(_drop_lemma_edit(program_text, d)[:2])
        elif d.kind in ("method", "constructor") and d.has_body:
            edits.extend(_strip_method_body(program_text, d, lemmas))
    # neighbouring lemmas may both claim the blank line between them
    for s, e in sorted(dropped):
        if edits and edits[-1][2] == "" and s <= edits[-1][1] and edits[-1][0] <= s:
            edits[-1] = (edits[-1][0], max(e, edits[-1][1]), "")
        else:
            edits.append((s, e, ""))
    out = re.sub(r"\n{3,}", "\n\n", syntax.apply_edits(program_text, edits))
    # a dropped trailing lemma must not leave a blank line at end of file
    if out.endswith("\n\n") and not program_text.endswith("\n\n"):
        out = out.rstrip("\n") + "\n"
    return out


def executable_tokens(program_text: str, name: str) -> list[str]:
    """Token stream of one definition with every annotation removed."""
    stripped = strip_annotations(program_text)
    d = syntax.find_definition(stripped, name)
    if d is None:
        raise KeyError(name)
    return syntax.token_texts(d.text(stripped))


def preserves_executable(original_program: str, candidate_program: str, name: str) -> bool:
    try:
        return executable_tokens(original_program, name) == executable_tokens(candidate_program, name)
    except (KeyError, DafnySyntaxError):
        return False


# ---------------------------------------------------------------------------
# Decomposition
# ---------------------------------------------------------------------------

STRATEGY_DESCRIPTIONS = {
    Strategy.FULL_SHARING: (
        "Pass the whole loop state to each extracted method, including loop-carried accumulators such as a running "
        "maximum; the extracted method returns the updated accumulator."
    ),
    Strategy.DECOUPLED: (
        "Pass only the original inputs and the loop indices the extracted loop needs. Do not pass accumulators; "
        "the extracted method returns its own result and the caller combines it."
    ),
    Strategy.FULLY_DECOUPLED: (
        "Pass only slices of the original inputs (for example `xs[i..]`), never indices or accumulators; the "
        "extracted method returns its own result and the caller combines it."
    ),
}


def choose_target(program_text: str, preferred: str | None = None) -> str | None:
    """Method to decompose: ``preferred`` or the first method with nested loops."""
    defs = syntax.scan_definitions(program_text)
    if preferred:
        return preferred if any(d.name == preferred for d in defs) else None
    for d in defs:
        if d.kind == "method" and d.has_body and syntax.loop_depth(syntax.parse_body(program_text, d)) >= 2:
            return d.name
    return None


def _loops(program_text: str, d: Definition) -> list[Stmt]:
    return [s for s in syntax.walk_statements(syntax.parse_body(program_text, d)) if s.is_loop]


def _fresh_base(program_text: str, method: str) -> int:
    taken = set(syntax.definition_names(program_text))
    k = 1
    while f"{method}_loop{k}" in taken:
        k += 1
    return k


@dataclass
class _CallInfo:
    stmt: Stmt
    callee: str
    args: list[str]
    lhs: list[str]


_CALL_RE = re.compile(r"^(?:var\s+)?(?P<lhs>[^;]*?)\s*:=\s*(?P<callee>[A-Za-z_][\w'?]*)\s*\((?P<args>.*)\)\s*;$", re.S)
_BARE_CALL_RE = re.compile(r"^(?P<callee>[A-Za-z_][\w'?]*)\s*\((?P<args>.*)\)\s*;$", re.S)


def _split_args(text: str) -> list[str]:
    if not text.strip():
        return []
    toks = syntax.tokenize(text)
    parts, depth, start = [], 0, 0
    for t in toks:
        if t.text in ("(", "[", "{"):
            depth += 1
        elif t.text in (")", "]", "}"):
            depth -= 1
        elif t.text == "," and depth == 0:
            parts.append(text[start : t.start].strip())
            start = t.end
    parts.append(text[start:].strip())
    return parts


def _call_info(src: str, stmt: Stmt) -> _CallInfo | None:
    text = " ".join(stmt.text(src).split())
    m = _CALL_RE.match(text)
    if m:
        lhs = [x.split(":")[0].strip() for x in _split_args(m.group("lhs"))]
        return _CallInfo(stmt, m.group("callee"), _split_args(m.group("args")), lhs)
    m = _BARE_CALL_RE.match(text)
    if m:
        return _CallInfo(stmt, m.group("callee"), _split_args(m.group("args")), [])
    return None


def _calls_in(src: str, d: Definition, names: set[str]) -> list[_CallInfo]:
    out = []
    for stmt in syntax.walk_statements(syntax.parse_body(src, d)):
        if stmt.kind in ("var", "assign", "call"):
            info = _call_info(src, stmt)
            if info and info.callee in names:
                out.append(info)
    return out


def _assigned_names(src: str, d: Definition) -> set[str]:
    out: set[str] = set()
    for stmt in syntax.walk_statements(syntax.parse_body(src, d)):
        if stmt.kind in ("assign", "var"):
            text = stmt.text(src)
            if ":=" in text:
                lhs = text.split(":=", 1)[0].replace("var", " ").replace("ghost", " ")
                out.update(x.split(":")[0].strip() for x in lhs.split(","))
    return {x for x in out if x}


def _loop_indices(src: str, d: Definition) -> set[str]:
    out = set()
    for loop in _loops(src, d):
        if loop.kind == "for" and len(loop.tokens) > 1:
            out.add(loop.tokens[1].text)
    return out


def classify_argument(arg: str, inputs: set[str], indices: set[str], accumulators: set[str]) -> str:
    """input | index | slice | accumulator | other, for one call argument."""
    toks = syntax.tokenize(arg)
    if len(toks) == 1 and toks[0].kind == "ident":
        name = toks[0].text
        if name in accumulators:
            return "accumulator"
        if name in indices:
            return "index"
        if name in inputs:
            return "input"
        return "other"
    if toks and toks[0].kind == "ident" and toks[0].text in inputs and len(toks) > 1 and toks[1].text == "[":
        if any(t.text == ".." for t in toks) and syntax.match_close(toks, 1) == len(toks) - 1:
            return "slice"
    if syntax.free_identifiers(arg) & accumulators:
        return "accumulator"
    return "other"


def check_parameter_flow(strategy: Strategy, classes: list[str]) -> str | None:
    """Reason the argument classes break ``strategy``, or None."""
    if strategy is Strategy.FULL_SHARING:
        if "accumulator" not in classes:
            return "full-sharing must pass the loop-carried accumulator to the extracted method"
    elif strategy is Strategy.DECOUPLED:
        bad = [c for c in classes if c not in ("input", "index")]
        if bad or "input" not in classes:
            return "decoupled must pass only original inputs and loop indices (no accumulators or slices)"
    else:
        if not classes or any(c != "slice" for c in classes):
            return "fully-decoupled must pass only slices of the original inputs"
    return None


def _span(text: str, start: int, end: int) -> SourceSpan:
    idx = syntax.LineIndex(text)
    sl, sc = idx.position(start)
    el, ec = idx.position(end)
    return SourceSpan(sl, sc, el, ec, text[start:end])


def _loop_similarity(a: str, b: str) -> float:
    return difflib.SequenceMatcher(a=syntax.token_texts(a), b=syntax.token_texts(b), autojunk=False).ratio()


def validate_plan(
    original_program: str, method: str, block: str, strategy: Strategy
) -> tuple[DecompositionPlan | None, list[str]]:
    """Mechanical checks on a decomposition reply; returns (plan, problems)."""
    problems = syntax.check_structure(block)
    if problems:
        return None, [f"syntax: {p}" for p in problems]
    defs = syntax.scan_definitions(block)
    by_name = {d.name: d for d in defs}
    orig_def = syntax.find_definition(original_program, method)
    assert orig_def is not None
    orig_sig = syntax.parse_signature(original_program, orig_def)
    outer = by_name.get(method)
    if outer is None:
        return None, [f"the reply does not define {method}"]
    out_sig = syntax.parse_signature(block, outer)
    if not out_sig.contract_equals(orig_sig):
        problems.append(f"{method} must keep its original signature and requires/ensures clauses verbatim")
    existing = set(syntax.definition_names(original_program)) - {method}
    name_re = re.compile(rf"^{re.escape(method)}_loop(\d+)$")
    lifted_defs = []
    for d in defs:
        if d.name == method:
            continue
        if d.name in existing:
            # copies of unchanged helpers are tolerated only verbatim
            if " ".join(d.text(block).split()) != " ".join(syntax.find_definition(original_program, d.name).text(original_program).split()):
                problems.append(f"{d.name} already exists and must not be redefined")
            continue
        if not name_re.match(d.name) or d.kind != "method":
            problems.append(f"extracted method {d.name} must be a method named {method}_loop<k>")
            continue
        lifted_defs.append(d)
    if not lifted_defs:
        problems.append("no loop was extracted")
    for d in [outer, *lifted_defs]:
        n = syntax.count_loops(syntax.parse_body(block, d))
        if n > 1:
            problems.append(f"{d.name} contains {n} loops; each method may contain at most one")
    lifted_names = {d.name for d in lifted_defs}
    call_sites: list[CallSite] = []
    called: set[str] = set()
    for caller in [outer, *lifted_defs]:
        caller_sig = syntax.parse_signature(block, caller)
        inputs = {n for n, _ in caller_sig.parameters}
        indices = _loop_indices(block, caller)
        accumulators = {n for n, _ in caller_sig.returns} | (_assigned_names(block, caller) - indices)
        for info in _calls_in(block, caller, lifted_names):
            called.add(info.callee)
            call_sites.append(CallSite(_span(block, info.stmt.start, info.stmt.end), info.callee))
            carried = accumulators | (set(info.lhs) & {a.strip() for a in info.args})
            classes = [classify_argument(a, inputs, indices, carried) for a in info.args]
            reason = check_parameter_flow(strategy, classes)
            if reason:
                problems.append(f"call to {info.callee}: {reason} (got {', '.join(classes) or 'no arguments'})")
    for name in sorted(lifted_names - called):
        problems.append(f"{name} is never called")
    if problems:
        return None, problems

    orig_loops = _loops(original_program, orig_def)
    free = list(orig_loops)
    lifted: list[LiftedMethod] = []
    for d in sorted(lifted_defs, key=lambda x: int(name_re.match(x.name).group(1))):
        loop = next(iter(_loops(block, d)), None)
        span = None
        if loop is not None and free:
            stripped_loop = strip_annotations("method _m_() {\n" + loop.text(block) + "\n}")
            best = max(free, key=lambda o: _loop_similarity(o.text(original_program), stripped_loop))
            free.remove(best)
            span = _span(original_program, best.start, best.end)
        lifted.append(LiftedMethod(syntax.parse_signature(block, d), d.text(block), span))
    spans = [m.original_span for m in lifted if m.original_span]
    for i, a in enumerate(spans):
        for b in spans[i + 1 :]:
            if a.overlaps(b) and not (a.text in b.text or b.text in a.text):
                return None, ["extracted loops map to overlapping source regions"]
    program = syntax.replace_definition(original_program, method, block.strip("\n"))
    return (
        DecompositionPlan(
            strategy=strategy,
            outer_signature=out_sig,
            outer_text=outer.text(block),
            lifted_methods=tuple(lifted),
            call_sites=tuple(call_sites),
            program=program,
        ),
        [],
    )


def decompose_code(
    program_text: str,
    strategy: Strategy,
    llm: LlmGateway,
    *,
    method: str | None = None,
    config: RunConfig | None = None,
    temperature: float | None = None,
    feedback: str = "",
    listener: Listener | None = None,
    attempts: int | None = None,
) -> DecompositionPlan:
    """Ask the model for a loop-lifted version of ``method`` and validate it mechanically.

    Invalid replies are re-requested with the problems appended as feedback,
    up to ``attempts`` (default t) model calls.
    """
    config = config or RunConfig()
    target = choose_target(program_text, method)
    if target is None:
        raise DecompositionError("no method with nested loops to decompose")
    temp = config.initial_temperature if temperature is None else temperature
    budget = attempts or config.max_generation_attempts_t
    first = _fresh_base(program_text, target)
    problems: list[str] = []
    for attempt in range(1, budget + 1):
        fb = feedback
        if problems:
            fb = (fb + "\n" if fb else "") + "Your previous reply was rejected:\n" + "\n".join(f"- {p}" for p in problems)
        subs = {
            "method": target,
            "first_index": str(first),
            "strategy": strategy.value,
            "strategy_description": STRATEGY_DESCRIPTIONS[strategy],
            "program": program_text.strip("\n"),
            "feedback": fb,
        }
        exchange = llm.complete(T.DECOMPOSE_CODE, subs, temp, listener=listener)
        if listener:
            listener("LlmCall", exchange=exchange, charged=True, purpose="decompose", attempt=attempt)
        try:
            block = extract_code_block(exchange.response_text).code
        except EmptyResponseError:
            problems = ["empty reply"]
            continue
        plan, problems = validate_plan(program_text, target, block, strategy)
        if plan is not None:
            return plan
    raise DecompositionError(f"no valid decomposition of {target} after {budget} attempts: {'; '.join(problems)}")


def _weak(sig: MethodSignature) -> bool:
    return bool(sig.returns) and all(c.strip() in ("true", "(true)") for c in sig.ensures_clauses)


def check_decomposition_consistency(
    plan: DecompositionPlan,
    llm: LlmGateway,
    verifier: Any,
    *,
    original_program: str = "",
    temperature: float = 0.5,
    listener: Listener | None = None,
) -> tuple[bool, str]:
    """(accepted, reason). Mechanical checks run before any model call."""
    report = verifier.resolve(plan.program)
    if listener:
        listener("VerifierRun", report=report, purpose="resolve-plan")
    if report.status is not VerifierStatus.VERIFIED:
        detail = "; ".join(d.message for d in report.errors) or report.status.value
        return False, f"decomposed program does not resolve: {detail}"
    for m in plan.lifted_methods:
        if _weak(m.signature):
            return False, f"{m.signature.name} has no postcondition beyond `true`, so it cannot support the caller's proof"
    exchange = llm.complete(
        T.CONSISTENCY_CHECK,
        {"original": (original_program or plan.program).strip("\n"), "decomposed": plan.program.strip("\n")},
        temperature,
        listener=listener,
    )
    if listener:
        listener("LlmCall", exchange=exchange, charged=True, purpose="consistency")
    try:
        verdict = parse_verdict(exchange.response_text)
    except UnparseableVerdictError:
        return False, "consistency verdict was not a clear yes/no"
    if verdict:
        return True, ""
    return False, exchange.response_text.strip()


def decompose_until_consistent(
    program_text: str,
    strategy: Strategy,
    llm: LlmGateway,
    verifier: Any,
    *,
    config: RunConfig | None = None,
    method: str | None = None,
    listener: Listener | None = None,
) -> DecompositionPlan:
    """Plan, gate, and re-plan with the rejection reason until accepted or t rounds pass."""
    config = config or RunConfig()
    feedback = ""
    last = ""
    for _ in range(config.max_generation_attempts_t):
        try:
            plan = decompose_code(
                program_text, strategy, llm, method=method, config=config, feedback=feedback, listener=listener, attempts=1
            )
        except DecompositionError as exc:
            last = str(exc)
            feedback = f"Your previous plan was rejected: {exc}"
            continue
        ok, reason = check_decomposition_consistency(
            plan, llm, verifier, original_program=program_text, temperature=config.initial_temperature, listener=listener
        )
        if ok:
            return plan
        last = reason
        feedback = f"Your previous plan was rejected: {reason}"
    raise DecompositionAbandonedError(f"decomposition abandoned after {config.max_generation_attempts_t} rounds: {last}")


# ---------------------------------------------------------------------------
# Restoration
# ---------------------------------------------------------------------------


@dataclass
class RestoreResult:
    program: str
    complete: bool
    report: dict[str, Any] = field(default_factory=dict)
    rounds: int = 0

    def report_json(self) -> str:
        return json.dumps(self.report, indent=2, sort_keys=True) + "\n"


def _renamings(plan: DecompositionPlan, program: str) -> dict[str, dict[str, str]]:
    """Per lifted method: parameter -> argument and result -> assignment target."""
    out: dict[str, dict[str, str]] = {}
    names = set(plan.lifted_names)
    for d in syntax.scan_definitions(program):
        if not d.has_body or d.kind != "method":
            continue
        for info in _calls_in(program, d, names):
            sig = next(m.signature for m in plan.lifted_methods if m.signature.name == info.callee)
            ren = {p: a for (p, _), a in zip(sig.parameters, info.args)}
            ren.update({r: t for (r, _), t in zip(sig.returns, info.lhs)})
            out.setdefault(info.callee, ren)
    return out


def mapping_report(plan: DecompositionPlan, verified_program: str, status: str) -> dict[str, Any]:
    ren = _renamings(plan, verified_program)
    entries = []
    for m in plan.lifted_methods:
        site = next((c for c in plan.call_sites if c.method == m.signature.name), None)
        renamed = {k: v for k, v in ren.get(m.signature.name, {}).items() if k != v}
        entries.append(
            {
                "method": m.signature.name,
                "original_span": None if m.original_span is None else {
                    "start_line": m.original_span.start_line,
                    "start_column": m.original_span.start_column,
                    "end_line": m.original_span.end_line,
                    "end_column": m.original_span.end_column,
                },
                "call_site": None if site is None else site.span.text,
                "renamings": renamed,
            }
        )
    return {
        "status": status,
        "method": plan.outer_signature.name,
        "strategy": plan.strategy.value,
        "lifted": entries,
    }


def _declared_names(stmt_text: str) -> set[str]:
    """Names introduced by a ``var``/``ghost var`` statement."""
    toks = syntax.tokenize(stmt_text)
    out, expect, depth = set(), True, 0
    for t in toks:
        if t.text in (":=", ":|", ";"):
            break
        if t.text in ("<", "(", "["):
            depth += 1
        elif t.text in (">", ")", "]"):
            depth -= 1
        elif depth == 0 and t.text == ",":
            expect = True
        elif depth == 0 and t.text == ":":
            expect = False
        elif expect and t.kind == "ident" and t.text not in ("var", "ghost"):
            out.add(t.text)
            expect = False
    return out


def _scope_names(program: str, d: Definition) -> set[str]:
    sig = syntax.parse_signature(program, d)
    names = {n for n, _ in sig.parameters} | {n for n, _ in sig.returns}
    names |= _loop_indices(program, d) | set(syntax.definition_names(program))
    for stmt in syntax.walk_statements(syntax.parse_body(program, d)):
        if stmt.kind in ("var", "ghost-var"):
            names |= _declared_names(stmt.text(program))
    return names


def _annotation_groups(src: str, stmts: list[Stmt], lemmas: set[str]) -> list[tuple[list[Stmt], Stmt | None]]:
    """Pairs (annotations, following executable statement or None at block end)."""
    groups, pending = [], []
    for s in stmts:
        if syntax.is_annotation(s, lemmas):
            pending.append(s)
        else:
            groups.append((pending, s))
            pending = []
    groups.append((pending, None))
    return groups


def _migrate_annotations(
    original_program: str,
    orig_body: list[Stmt],
    block_close: int,
    block_owner: int,
    verified_program: str,
    src_body: list[Stmt],
    mapping: dict[str, str],
    lemmas: set[str],
    edits: list[tuple[int, int, str]],
) -> bool:
    """Copy annotation statements in front of the matching executable anchors; False if some were lost."""
    complete = True
    orig_keys = [syntax.statement_key(original_program, s) for s in orig_body]
    cursor = 0
    for annots, anchor in _annotation_groups(verified_program, src_body, lemmas):
        if anchor is not None:
            akey = syntax.statement_key(verified_program, anchor, mapping)
            try:
                pos = orig_keys.index(akey, cursor)
            except ValueError:
                if annots:
                    complete = False
                continue
            cursor = pos + 1
            at = orig_body[pos].start
            ind = syntax.indentation_at(original_program, at)
        else:
            at = block_close
            ind = syntax.indentation_at(original_program, block_owner) + "  "
        if not annots:
            continue
        texts = [syntax.substitute_identifiers(" ".join(a.text(verified_program).split()), mapping) for a in annots]
        if anchor is None:
            line_start = original_program.rfind("\n", 0, at) + 1
            edits.append((line_start, line_start, "".join(ind + t + "\n" for t in texts)))
        else:
            edits.append((at, at, "".join(t + "\n" + ind for t in texts)))
    return complete


def mechanical_restore(original_program: str, verified_program: str, plan: DecompositionPlan) -> tuple[str, bool]:
    """Annotation-migration draft of the original method; second value tells if it looks complete.

    Loop invariants and annotation statements of every verified loop are
    copied, with lifted parameters renamed to call arguments, onto the original
    loop with the same executable header.
    """
    method = plan.outer_signature.name
    orig_def = syntax.find_definition(original_program, method)
    assert orig_def is not None
    lemmas = syntax.lemma_names(verified_program)
    ren = _renamings(plan, verified_program)
    complete = True
    # verified loops keyed by their (renamed) header
    sources: dict[str, tuple[Stmt, dict[str, str]]] = {}
    for name in [method, *plan.lifted_names]:
        d = syntax.find_definition(verified_program, name)
        if d is None or not d.has_body:
            complete = False
            continue
        mapping = {k: v for k, v in ren.get(name, {}).items() if k != v}
        for loop in _loops(verified_program, d):
            sources.setdefault(syntax.statement_key(verified_program, loop, mapping), (loop, mapping))
    edits: list[tuple[int, int, str]] = []
    matched = 0
    orig_loops = _loops(original_program, orig_def)
    for loop in orig_loops:
        key = syntax.statement_key(original_program, loop)
        if key not in sources:
            complete = False
            continue
        src_loop, mapping = sources[key]
        matched += 1
        indent = syntax.indentation_at(original_program, loop.start) + "  "
        specs = [
            indent + syntax.substitute_identifiers(" ".join(sp.text(verified_program).split()), mapping)
            for sp in src_loop.specs
        ]
        if specs:
            header_toks = syntax.tokenize(original_program[loop.start : loop.body_open])
            header_end = loop.start + header_toks[-1].end
            edits.append((header_end, loop.body_open, "\n" + "\n".join(specs) + "\n" + indent[:-2]))
        ok = _migrate_annotations(original_program, loop.body, loop.body_close, loop.start,
                                  verified_program, src_loop.body, mapping, lemmas, edits)
        complete = complete and ok
    outer = syntax.find_definition(verified_program, method)
    if outer is not None and outer.has_body:
        # straight-line annotations of the outer method keep their anchors
        close = orig_def.body_end - 1
        ok = _migrate_annotations(original_program, syntax.parse_body(original_program, orig_def), close,
                                  orig_def.start, verified_program, syntax.parse_body(verified_program, outer),
                                  {}, lemmas, edits)
        complete = complete and ok
    for name in plan.lifted_names:
        d = syntax.find_definition(verified_program, name)
        if d is not None and d.has_body and any(
            syntax.is_annotation(s, lemmas) for s in syntax.parse_body(verified_program, d)
        ):
            complete = False  # annotations outside the lifted loop have no mechanical home
    if matched < len(orig_loops):
        complete = False
    draft_method = syntax.apply_edits(original_program, edits)
    d = syntax.find_definition(draft_method, method)
    assert d is not None
    text = d.text(draft_method)
    # drop lifted methods, keep every other verified definition (helper lemmas, functions)
    program = verified_program
    for name in plan.lifted_names:
        ld = syntax.find_definition(program, name)
        if ld is not None:
            s, e, _ = _drop_lemma_edit(program, ld)
            program = program[:s] + program[e:]
    program = syntax.replace_definition(program, method, text)
    if complete:
        scope = _scope_names(program, syntax.find_definition(program, method))
        d = syntax.find_definition(program, method)
        for stmt in syntax.walk_statements(syntax.parse_body(program, d)):
            pieces = [sp.expression(program) for sp in stmt.specs]
            if syntax.is_annotation(stmt, lemmas):
                pieces.append(stmt.text(program))
            for piece in pieces:
                if syntax.free_identifiers(piece) - scope:
                    complete = False
    return program, complete


def restore_code(
    original_program: str,
    verified_program: str,
    plan: DecompositionPlan | None,
    llm: LlmGateway,
    verifier: Any,
    *,
    config: RunConfig | None = None,
    temperature: float | None = None,
    listener: Listener | None = None,
) -> RestoreResult:
    """Fold a verified modular program back into the original method shape."""
    config = config or RunConfig()
    if plan is None or not plan.lifted_methods:
        return RestoreResult(verified_program, True, {"status": "identity"})
    method = plan.outer_signature.name
    temp = config.initial_temperature if temperature is None else temperature
    draft, complete = mechanical_restore(original_program, verified_program, plan)
    candidates: list[str] = []
    feedback = ""
    rounds = 0

    def attempt(candidate_program: str) -> str | None:
        """None when verified, else feedback text."""
        if not preserves_executable(original_program, candidate_program, method):
            return "The merged method changed executable statements of the original; only annotations may differ."
        problems = syntax.check_structure(candidate_program)
        if problems:
            return "Syntax problems: " + "; ".join(problems)
        report = run_verifier(candidate_program, verifier, config.verifier_timeout_seconds)
        if listener:
            listener("VerifierRun", report=report, purpose="restore")
        if report.verified:
            return None
        return "Dafny reported:\n" + "\n".join(d.describe() for d in report.diagnostics)

    if complete:
        rounds += 1
        fb = attempt(draft)
        if fb is None:
            return RestoreResult(draft, True, {"status": "restored", "via": "mechanical"}, rounds)
        feedback = fb
    base = draft
    while rounds < config.max_generation_attempts_t:
        rounds += 1
        subs = {
            "method": method,
            "original": syntax.find_definition(original_program, method).text(original_program),
            "modular": verified_program.strip("\n"),
            "draft": syntax.find_definition(draft, method).text(draft),
            "feedback": feedback,
            "attempt": str(rounds),
        }
        exchange = llm.complete(T.MERGE_AND_RESTORE, subs, temp, listener=listener)
        if listener:
            listener("LlmCall", exchange=exchange, charged=True, purpose="restore")
        try:
            block = extract_code_block(exchange.response_text).code
        except EmptyResponseError:
            feedback = "Your reply was empty."
            continue
        candidate = _merge_restored(base, block, method)
        if candidate is None:
            feedback = f"Your reply must contain a definition of {method}."
            continue
        candidates.append(candidate)
        fb = attempt(candidate)
        if fb is None:
            return RestoreResult(candidate, True, {"status": "restored", "via": "llm"}, rounds)
        feedback = fb
    report = mapping_report(plan, verified_program, "restoration-incomplete")
    return RestoreResult(verified_program, False, report, rounds)


def _merge_restored(base_program: str, block: str, method: str) -> str | None:
    """Put the reply's ``method`` (and any new helper lemmas) into ``base_program``."""
    try:
        defs = syntax.scan_definitions(block)
    except DafnySyntaxError:
        return None
    target = next((d for d in defs if d.name == method), None)
    if target is None:
        return None
    program = syntax.replace_definition(base_program, method, target.text(block))
    existing = syntax.definition_names(program)
    extra = [d.text(block) for d in defs if d.name != method and d.kind == "lemma" and d.name not in existing]
    if extra:
        d = syntax.find_definition(program, method)
        program = program[: d.start] + "\n\n".join(extra) + "\n\n" + program[d.start :]
    return program
