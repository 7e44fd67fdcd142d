"""Node-level operations: gate, generate, merge, verify and repair."""

from __future__ import annotations

from dataclasses import dataclass, field

from .. import syntax
from ..llm import templates as T
from ..llm.responses import EmptyResponseError, UnparseableVerdictError, extract_code_block, extract_code_blocks, parse_verdict
from ..model import (
    DecompositionPlan,
    Diagnostic,
    DiagnosticKind,
    MethodSignature,
    NodeStatus,
    ProofForgeError,
    ProofNode,
    ProofTree,
    RunConfig,
    VerificationTask,
)
from ..refactor import preserves_executable
from ..syntax import DafnySyntaxError
from ..transcript import EventKind
from ..verifier import DeclarationConflictError, declare_bodiless
from .context import BudgetExhaustedError, EngineContext


class InitError(ProofForgeError):
    pass


class MergeRejectedError(ProofForgeError):
    pass


class RepairNotApplicableError(ProofForgeError):
    pass


# ---------------------------------------------------------------------------
# Tree initialization
# ---------------------------------------------------------------------------


def init_tree(
    task: VerificationTask,
    config: RunConfig | None = None,
    plan: DecompositionPlan | None = None,
    root_name: str | None = None,
) -> ProofTree:
    config = config or RunConfig()
    program = plan.program if plan is not None else task.program
    problems = syntax.check_structure(program)
    if problems:
        raise InitError("program does not parse: " + "; ".join(problems))
    stashed: dict[str, str] = {}
    seeded: list[MethodSignature] = []
    if plan is not None:
        for lifted in plan.lifted_methods:
            d = syntax.find_definition(program, lifted.signature.name)
            if d is None or d.body(program) is None:
                raise InitError(f"lifted method {lifted.signature.name} is missing from the plan program")
            stashed[lifted.signature.name] = d.body(program)
            program = program[: d.start] + syntax.without_body(program, d) + program[d.end :]
            seeded.append(lifted.signature)
        signature = plan.outer_signature
    else:
        name = root_name or task.target or _default_root(program)
        try:
            signature = syntax.signature_of(program, name)
        except KeyError:
            raise InitError(f"no definition named {name}") from None
    root = ProofNode(
        id="n0",
        signature=signature,
        base_code=program,
        textual_proof=task.outline,
        working_list=list(seeded),
        seeded=list(seeded),
        temperature=config.initial_temperature,
    )
    tree = ProofTree.with_root(root)
    tree.stashed_bodies.update(stashed)
    return tree


def _default_root(program: str) -> str:
    defs = [d for d in syntax.scan_definitions(program) if d.kind in ("method", "lemma") and d.has_body]
    if not defs:
        raise InitError("program has no method or lemma with a body")
    return defs[-1].name


def root_for_failure(program: str, diagnostics: list[Diagnostic]) -> str | None:
    """Name of the definition containing the first located error."""
    defs = syntax.scan_definitions(program)
    idx = syntax.LineIndex(program)
    for diag in diagnostics:
        if diag.line is None or diag.severity != "error":
            continue
        for d in defs:
            if d.kind in ("method", "lemma") and idx.line_of(d.start) <= diag.line <= idx.line_of(max(d.end - 1, d.start)):
                return d.name
    return None


# ---------------------------------------------------------------------------
# Helpers over program text
# ---------------------------------------------------------------------------


def _definition_lines(code: str, name: str) -> tuple[int, int]:
    d = syntax.find_definition(code, name)
    if d is None:
        return (0, -1)
    idx = syntax.LineIndex(code)
    return idx.line_of(d.start), idx.line_of(max(d.end - 1, d.start))


def _taken_names(code: str) -> set[str]:
    return set(syntax.definition_names(code))


def _forbidden_keys(tree: ProofTree, node: ProofNode) -> set[str]:
    keys = {node.signature.normalized_key()}
    keys |= {a.signature.normalized_key() for a in tree.ancestors(node)}
    keys |= {s.normalized_key() for s in node.working_list}
    return keys


def _reusable_listing(ctx: EngineContext, code: str) -> str:
    lemmas = [d for d in syntax.scan_definitions(code) if d.kind == "lemma"]
    names = ", ".join(d.name for d in lemmas) or "(none)"
    return f"Declared in the program: {names}\nFrom earlier branches:\n{ctx.pool.listing()}"


# ---------------------------------------------------------------------------
# Gate, generation, merge
# ---------------------------------------------------------------------------


def gate_verifiability(ctx: EngineContext, node: ProofNode) -> bool:
    """High-level yes/no on the node's goal; unparseable answers cost one attempt."""
    subs = {
        "signature": node.signature.render(),
        "textual_proof": node.textual_proof or "(none)",
        "code": node.base_code.strip("\n"),
    }
    while True:
        ex = ctx.call_llm(T.VERIFIABILITY_GATE, subs, node, charged=False, purpose="gate")
        try:
            return parse_verdict(ex.response_text)
        except UnparseableVerdictError:
            ctx.charge_failure(node)


class CandidateError(ProofForgeError):
    pass


def generate_candidate(ctx: EngineContext, node: ProofNode, code: str, feedback: str) -> str:
    """One charged generation: full body for bodiless goals, augmentation otherwise."""
    d = syntax.find_definition(code, node.name)
    reusable = _reusable_listing(ctx, code)
    fb = f"Feedback on your previous attempt:\n{feedback}" if feedback else ""
    if d is not None and d.has_body:
        subs = {
            "name": node.name,
            "definition": d.text(code),
            "textual_proof": node.textual_proof or "(none)",
            "reusable": reusable,
            "code": code.strip("\n"),
            "feedback": fb,
        }
        ex = ctx.call_llm(T.AUGMENT_ANNOTATIONS, subs, node, charged=True, purpose="augment")
    else:
        subs = {
            "signature": node.signature.render(),
            "textual_proof": node.textual_proof or "(none)",
            "reusable": reusable,
            "code": code.strip("\n"),
            "feedback": fb,
        }
        ex = ctx.call_llm(T.GENERATE_BODY, subs, node, charged=True, purpose="generate")
    try:
        block = extract_code_block(ex.response_text).code
    except EmptyResponseError as exc:
        raise CandidateError(str(exc)) from exc
    if not block.strip():
        raise CandidateError("empty code block")
    return block


@dataclass
class MergeResult:
    code: str
    queued: list[MethodSignature] = field(default_factory=list)


def _same_text(a: str, b: str) -> bool:
    return " ".join(syntax.token_texts(a)) == " ".join(syntax.token_texts(b))


def merge_candidate(
    code: str,
    signature: MethodSignature,
    candidate: str,
    forbidden_keys: set[str] | frozenset[str] = frozenset(),
) -> MergeResult:
    """Replace ``signature``'s definition in ``code`` with the candidate's.

    New helper lemmas in the candidate are reduced to declarations and
    returned for queuing; redefining any other existing symbol is rejected.
    """
    problems = syntax.check_structure(candidate)
    if problems:
        raise MergeRejectedError("candidate does not parse: " + "; ".join(problems))
    defs = syntax.scan_definitions(candidate)
    target = next((d for d in defs if d.name == signature.name), None)
    if target is None:
        raise MergeRejectedError(f"candidate does not define {signature.name}")
    cand_sig = syntax.parse_signature(candidate, target)
    if not cand_sig.contract_equals(signature):
        raise MergeRejectedError(f"candidate changes the signature or contract of {signature.name}")
    existing = syntax.definition_names(code)
    merged = syntax.replace_definition(code, signature.name, target.text(candidate))
    queued: list[MethodSignature] = []
    keys = set(forbidden_keys)
    for d in defs:
        if d.name == signature.name:
            continue
        if d.name in existing:
            old = existing[d.name]
            if _same_text(d.text(candidate), old.text(code)):
                continue
            if d.kind == "lemma" and not old.has_body:
                if syntax.parse_signature(candidate, d).normalized_key() == syntax.parse_signature(code, old).normalized_key():
                    continue
            raise MergeRejectedError(f"candidate redefines existing symbol {d.name}")
        if d.kind != "lemma":
            raise MergeRejectedError(f"candidate introduces {d.kind} {d.name}; only helper lemmas may be added")
        sig = syntax.parse_signature(candidate, d)
        key = sig.normalized_key()
        if key in keys:
            raise MergeRejectedError(f"helper lemma {d.name} restates a goal already in the proof tree")
        keys.add(key)
        queued.append(sig)
    try:
        merged = declare_bodiless(merged, queued)
    except DeclarationConflictError as exc:
        raise MergeRejectedError(str(exc)) from exc
    # checked after declaring helpers, so calls to them count as annotations
    current = existing.get(signature.name)
    if current is not None and current.has_body and signature.kind == "method":
        if not preserves_executable(code, merged, signature.name):
            raise MergeRejectedError(f"candidate changes executable statements of {signature.name}")
    return MergeResult(merged, queued)


# ---------------------------------------------------------------------------
# Repairs
# ---------------------------------------------------------------------------


def _parse_proposal(text: str, taken: set[str], forbidden: set[str]) -> tuple[MethodSignature, str]:
    blocks = extract_code_blocks(text)
    if len(blocks) < 2:
        raise RepairNotApplicableError("expected a signature block and a call block")
    sig_text, call_text = blocks[0], blocks[1].strip()
    defs = syntax.scan_definitions(sig_text)
    if len(defs) != 1 or defs[0].kind != "lemma":
        raise RepairNotApplicableError("the first block must declare exactly one lemma")
    try:
        sig = syntax.parse_signature(sig_text, defs[0])
    except DafnySyntaxError as exc:
        raise RepairNotApplicableError(str(exc)) from exc
    if sig.name in taken:
        raise RepairNotApplicableError(f"lemma name {sig.name} is already taken")
    if sig.normalized_key() in forbidden:
        raise RepairNotApplicableError(f"{sig.name} restates a goal already in the proof tree")
    if not call_text.endswith(";"):
        call_text += ";"
    call_text = " ".join(call_text.split())
    stmts = syntax.parse_block_at("{" + call_text + "}", 0)
    if len(stmts) != 1 or stmts[0].kind != "call" or stmts[0].callee() != sig.name:
        raise RepairNotApplicableError(f"the second block must be a single call to {sig.name}")
    return sig, call_text


def _find_stmt_at_line(code: str, name: str, line: int, kinds: tuple[str, ...]):
    d = syntax.find_definition(code, name)
    if d is None or not d.has_body:
        return None
    idx = syntax.LineIndex(code)
    for stmt in syntax.walk_statements(syntax.parse_body(code, d)):
        if stmt.kind in kinds and idx.line_of(stmt.start) <= line <= idx.line_of(stmt.end - 1):
            return stmt
    return None


def _find_invariant_at_line(code: str, name: str, line: int):
    d = syntax.find_definition(code, name)
    if d is None or not d.has_body:
        return None
    idx = syntax.LineIndex(code)
    for stmt in syntax.walk_statements(syntax.parse_body(code, d)):
        if not stmt.is_loop:
            continue
        for spec in stmt.specs:
            if spec.keyword == "invariant" and idx.line_of(spec.start) <= line <= idx.line_of(spec.end - 1):
                return stmt, spec
    return None


def _delete_span(code: str, start: int, end: int) -> str:
    s, e = syntax.full_line_span(code, start, end)
    return code[:s] + code[e:]


def _judge(ctx: EngineContext, node: ProofNode, template, claim: str, code: str) -> bool:
    subs = {"signature": claim, "textual_proof": node.textual_proof or "(none)", "code": code.strip("\n")}
    while True:
        ex = ctx.call_llm(template, subs, node, charged=True, purpose="judge")
        try:
            return parse_verdict(ex.response_text)
        except UnparseableVerdictError:
            continue


def _propose(ctx: EngineContext, node: ProofNode, template, subs: dict[str, str], code: str) -> tuple[MethodSignature, str]:
    taken = _taken_names(code)
    forbidden = _forbidden_keys(ctx.tree, node) if ctx.tree is not None else set()
    subs = {**subs, "taken_names": ", ".join(sorted(taken))}
    while True:
        ex = ctx.call_llm(template, subs, node, charged=True, purpose="propose")
        try:
            return _parse_proposal(ex.response_text, taken, forbidden)
        except (RepairNotApplicableError, DafnySyntaxError):
            continue


def repair_failing_assertion(
    ctx: EngineContext, node: ProofNode, code: str, diag: Diagnostic
) -> tuple[str, MethodSignature | None]:
    """``assert E;`` becomes ``assert E by { L(..); }`` with L queued, or is dropped if judged false."""
    stmt = _find_stmt_at_line(code, node.name, diag.line or -1, ("assert",))
    if stmt is None:
        raise RepairNotApplicableError(f"no assertion at line {diag.line}")
    text = stmt.text(code)
    if not _judge(ctx, node, T.ASSERTION_JUDGE, " ".join(text.split()), code):
        ctx.emit(EventKind.REPAIR_APPLIED, node=node.id, repair="assertion-removed", line=diag.line, lemma=None)
        return _delete_span(code, stmt.start, stmt.end), None
    sig, call = _propose(
        ctx,
        node,
        T.PROPOSE_SUBLEMMA_ASSERTION,
        {"name": node.name, "assertion": " ".join(text.split()), "diagnostic": diag.message, "code": code.strip("\n")},
        code,
    )
    if stmt.body_open is not None:
        # existing `by { ... }`: add the call at the end of the block
        new_text = code[stmt.start : stmt.body_close].rstrip() + " " + call + " }"
    else:
        expr = " ".join(code[stmt.start : stmt.end].rstrip(";").split())
        new_text = f"{expr} by {{ {call} }}"
    code = code[: stmt.start] + new_text + code[stmt.end :]
    code = declare_bodiless(code, [sig])
    ctx.emit(EventKind.REPAIR_APPLIED, node=node.id, repair=DiagnosticKind.ASSERTION_FAILURE.value, line=diag.line, lemma=sig.name)
    return code, sig


def _remove_spec(code: str, loop, spec) -> str:
    if len(loop.specs) == 1:
        header = syntax.tokenize(code[loop.start : spec.start])
        end = loop.start + header[-1].end
        return code[:end] + " " + code[loop.body_open :]
    return _delete_span(code, spec.start, spec.end)


def repair_failing_invariant(
    ctx: EngineContext, node: ProofNode, code: str, diag: Diagnostic
) -> tuple[str, MethodSignature | None]:
    """Queue a preservation (or entry) lemma and call it in the loop, or drop a false invariant."""
    found = _find_invariant_at_line(code, node.name, diag.line or -1)
    if found is None:
        raise RepairNotApplicableError(f"no invariant at line {diag.line}")
    loop, spec = found
    inv = " ".join(spec.text(code).split())
    if not _judge(ctx, node, T.INVARIANT_JUDGE, inv, code):
        ctx.emit(EventKind.REPAIR_APPLIED, node=node.id, repair="invariant-removed", line=diag.line, lemma=None)
        return _remove_spec(code, loop, spec), None
    entry = diag.kind is DiagnosticKind.INVARIANT_ON_ENTRY
    placement = "immediately before the loop" if entry else "at the end of the loop body"
    sig, call = _propose(
        ctx,
        node,
        T.PROPOSE_SUBLEMMA_INVARIANT,
        {
            "name": node.name,
            "failure": "not established on entry" if entry else "not maintained by the loop body",
            "invariant": inv,
            "diagnostic": diag.message,
            "loop": loop.text(code),
            "code": code.strip("\n"),
            "placement": placement,
        },
        code,
    )
    indent = syntax.indentation_at(code, loop.start)
    if entry:
        code = code[: loop.start] + call + "\n" + indent + code[loop.start :]
    else:
        close = loop.body_close
        line_start = code.rfind("\n", 0, close) + 1
        if code[line_start:close].strip():
            code = code[:close] + call + " " + code[close:]
        else:
            code = code[:line_start] + indent + "  " + call + "\n" + code[line_start:]
    code = declare_bodiless(code, [sig])
    ctx.emit(EventKind.REPAIR_APPLIED, node=node.id, repair=diag.kind.value, line=diag.line, lemma=sig.name)
    return code, sig


def lifted_callees(ctx: EngineContext, code: str, node: ProofNode) -> list[str]:
    if ctx.tree is None:
        return []
    d = syntax.find_definition(code, node.name)
    if d is None or not d.has_body:
        return []
    names = set(ctx.tree.stashed_bodies)
    out = []
    for stmt in syntax.walk_statements(syntax.parse_body(code, d)):
        for tok in stmt.tokens:
            if tok.kind == "ident" and tok.text in names and tok.text not in out:
                out.append(tok.text)
    return out


def handle_weak_callee_contract(
    ctx: EngineContext, node: ProofNode, code: str, diag: Diagnostic, callee: str
) -> tuple[str, MethodSignature]:
    """Ask for a stronger contract for a lifted callee and swap its declaration in."""
    d = syntax.find_definition(code, callee)
    if d is None:
        raise RepairNotApplicableError(f"{callee} is not declared")
    old_sig = syntax.parse_signature(code, d)
    subs = {
        "caller": node.name,
        "callee": callee,
        "diagnostic": diag.describe(),
        "callee_signature": syntax.without_body(code, d),
        "code": code.strip("\n"),
    }
    while True:
        ex = ctx.call_llm(T.STRENGTHEN_CALLEE, subs, node, charged=True, purpose="strengthen")
        blocks = extract_code_blocks(ex.response_text)
        if not blocks:
            continue
        try:
            defs = [x for x in syntax.scan_definitions(blocks[0]) if x.name == callee]
            if not defs:
                continue
            new_sig = syntax.parse_signature(blocks[0], defs[0])
        except DafnySyntaxError:
            continue
        same_shape = (
            new_sig.kind == old_sig.kind
            and [" ".join(t.split()) for _, t in new_sig.parameters] == [" ".join(t.split()) for _, t in old_sig.parameters]
            and [" ".join(t.split()) for _, t in new_sig.returns] == [" ".join(t.split()) for _, t in old_sig.returns]
        )
        if not same_shape or new_sig.contract_equals(old_sig):
            continue
        break
    header = syntax.without_body(blocks[0], defs[0])
    if d.has_body:
        new_text = header + "\n" + d.body(code)
    else:
        new_text = header
    code = code[: d.start] + new_text + code[d.end :]
    node.working_list = [new_sig if s.name == callee else s for s in node.working_list]
    node.seeded = [new_sig if s.name == callee else s for s in node.seeded]
    bd = syntax.find_definition(node.base_code, callee)
    if bd is not None and not bd.has_body:
        node.base_code = node.base_code[: bd.start] + header + node.base_code[bd.end :]
    ctx.emit(EventKind.REPAIR_APPLIED, node=node.id, repair="callee-strengthened", line=diag.line, lemma=callee)
    return code, new_sig


# ---------------------------------------------------------------------------
# Visit
# ---------------------------------------------------------------------------

_REGENERATE = {DiagnosticKind.SYNTAX_ERROR, DiagnosticKind.RESOLUTION_ERROR}
_INVARIANT = {DiagnosticKind.INVARIANT_ON_ENTRY, DiagnosticKind.INVARIANT_MAINTENANCE}


def _feedback(diags: list[Diagnostic], hint: str = "") -> str:
    lines = [d.describe() for d in diags]
    if hint:
        lines.append(hint)
    return "\n".join(lines)


def _try_pool(ctx: EngineContext, node: ProofNode) -> bool:
    entry = ctx.pool.get(node.signature.normalized_key())
    if entry is None or node.parent_id is None or node.name in (ctx.tree.stashed_bodies if ctx.tree else {}):
        return False
    code = node.base_code
    names = _taken_names(code)
    rename = {entry["name"]: node.name} if entry["name"] != node.name else {}
    helpers = {k: v for k, v in entry["definitions"].items() if k != entry["name"]}
    if any(h in names for h in helpers):
        return False
    main = entry["definitions"][entry["name"]]
    if rename:
        main = syntax.substitute_identifiers(main, rename)
    try:
        code = syntax.replace_definition(code, node.name, main)
    except KeyError:
        return False
    for text in helpers.values():
        code = code.rstrip("\n") + "\n\n" + text.strip("\n") + "\n"
    report = ctx.verify(code, node, "reuse")
    if not report.verified:
        return False
    node.final_code = code
    node.status = NodeStatus.VERIFIED
    ctx.emit(EventKind.LEMMA_REUSED, node=node.id, lemma=node.name, source=entry["name"])
    return True


def visit_node(ctx: EngineContext, node: ProofNode) -> bool:
    """One visit: gate, then generate/merge/verify/repair until verified or t attempts are used."""
    config = ctx.config
    node.status = NodeStatus.IN_PROGRESS
    node.generation_attempts = 0
    node.working_list = list(node.seeded)
    node.final_code = None
    ctx.emit(EventKind.VISIT_STARTED, node=node.id, name=node.name, retry=node.retries_used, temperature=node.temperature)
    try:
        if _try_pool(ctx, node):
            ctx.emit(EventKind.VISIT_ENDED, node=node.id, result="verified", attempts=0)
            return True
        if not gate_verifiability(ctx, node):
            node.status = NodeStatus.PENDING
            ctx.emit(EventKind.VISIT_ENDED, node=node.id, result="gate-rejected", attempts=node.generation_attempts)
            return False
        feedback = ""
        forbidden = _forbidden_keys(ctx.tree, node) if ctx.tree is not None else {node.signature.normalized_key()}
        while node.generation_attempts < config.max_generation_attempts_t:
            try:
                block = generate_candidate(ctx, node, node.base_code, feedback)
                merged = merge_candidate(node.base_code, node.signature, block, forbidden)
            except (CandidateError, MergeRejectedError) as exc:
                feedback = str(exc)
                continue
            code = merged.code
            node.working_list = list(node.seeded) + merged.queued
            feedback = _repair_cycle(ctx, node, code)
            if feedback is None:
                node.status = NodeStatus.VERIFIED
                ctx.emit(EventKind.VISIT_ENDED, node=node.id, result="verified", attempts=node.generation_attempts)
                return True
    except BudgetExhaustedError:
        pass
    node.status = NodeStatus.PENDING
    ctx.emit(EventKind.VISIT_ENDED, node=node.id, result="budget-exhausted", attempts=node.generation_attempts)
    return False


def _repair_cycle(ctx: EngineContext, node: ProofNode, code: str) -> str | None:
    """Verify and repair ``code`` in place; None on success, else feedback for regeneration."""
    while True:
        report = ctx.verify(code, node, "candidate")
        if report.verified:
            node.final_code = code
            return None
        errors = list(report.errors)
        if not errors:
            return f"verifier status {report.status.value}:\n{report.raw_output[-2000:]}"
        first, last = _definition_lines(code, node.name)
        kinds = {d.kind for d in errors}
        if kinds & _REGENERATE:
            return _feedback([d for d in errors if d.kind in _REGENERATE])
        mine = [d for d in errors if d.line is not None and first <= d.line <= last]
        post = [d for d in mine if d.kind is DiagnosticKind.POSTCONDITION_FAILURE]
        callees = lifted_callees(ctx, code, node) if post else []
        if post and callees:
            try:
                code, _ = handle_weak_callee_contract(ctx, node, code, post[0], callees[0])
            except RepairNotApplicableError:
                return _feedback(errors)
            continue
        asserts = sorted((d for d in mine if d.kind is DiagnosticKind.ASSERTION_FAILURE), key=lambda d: (d.line, d.column or 0))
        if asserts:
            code = _repair_all(ctx, node, code, asserts, repair_failing_assertion)
            if code is None:
                return _feedback(errors)
            continue
        invs = sorted((d for d in mine if d.kind in _INVARIANT), key=lambda d: (d.line, d.column or 0))
        if invs:
            code = _repair_all(ctx, node, code, invs, repair_failing_invariant)
            if code is None:
                return _feedback(errors)
            continue
        if DiagnosticKind.TIMEOUT in kinds or report.status.value == "Timeout":
            return _feedback(errors, "The verifier timed out. Simplify the proof: fewer quantifiers, smaller lemmas.")
        return _feedback(errors)


def _repair_all(ctx: EngineContext, node: ProofNode, code: str, diags: list[Diagnostic], repair) -> str | None:
    """Apply ``repair`` to each diagnostic in source order, tracking line shifts."""
    shift = 0
    changed = False
    seen_lines: set[int] = set()
    for diag in diags:
        if diag.line in seen_lines:
            continue
        seen_lines.add(diag.line)
        moved = Diagnostic(diag.kind, diag.message, diag.file, diag.line + shift, diag.column, diag.severity, diag.related)
        before = code.count("\n")
        try:
            code, sig = repair(ctx, node, code, moved)
        except RepairNotApplicableError:
            continue
        if sig is not None:
            node.working_list.append(sig)
        shift += code.count("\n") - before
        changed = True
    return code if changed else None
