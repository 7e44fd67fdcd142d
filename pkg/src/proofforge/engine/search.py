"""Depth-first exploration of the lemma tree with rollback and annealing."""

from __future__ import annotations

from .. import syntax
from ..model import NodeStatus, ProofNode, ProofTree, temperature_schedule
from ..transcript import EventKind
from .context import EngineContext
from .nodes import visit_node


def _lifted_definition(tree: ProofTree, code: str, name: str) -> str:
    """Re-attach a lifted method's stashed body to its (possibly strengthened) declaration."""
    d = syntax.find_definition(code, name)
    if d is None or d.has_body:
        return code
    return code[: d.start] + syntax.without_body(code, d) + "\n" + tree.stashed_bodies[name] + code[d.end :]


def instantiate_children(ctx: EngineContext, node: ProofNode) -> list[ProofNode]:
    tree = ctx.tree
    assert tree is not None and node.final_code is not None
    children = []
    for sig in node.working_list:
        base = node.final_code
        if sig.name in tree.stashed_bodies:
            base = _lifted_definition(tree, base, sig.name)
        child = ProofNode(
            id=tree.new_id(),
            signature=sig,
            base_code=base,
            textual_proof="",
            temperature=ctx.config.initial_temperature,
        )
        tree.add_child(node, child)
        ctx.emit(EventKind.NODE_CREATED, node=child.id, parent=node.id, name=sig.name, decl_kind=sig.kind)
        children.append(child)
    return children


def _subtree_complete(tree: ProofTree, node: ProofNode) -> bool:
    return node.status is NodeStatus.VERIFIED and all(
        _subtree_complete(tree, tree.nodes[c]) for c in node.children if tree.nodes[c].useful
    )


def discard_subtree(ctx: EngineContext, node: ProofNode) -> None:
    """Abort every descendant; fully verified lemma subtrees go to the reuse pool first."""
    tree = ctx.tree
    assert tree is not None
    for child_id in node.children:
        child = tree.nodes[child_id]
        if child.signature.kind == "lemma" and child.useful and _subtree_complete(tree, child):
            defs = {}
            for n in [child, *tree.descendants(child)]:
                if n.useful and n.final_code is not None:
                    d = syntax.find_definition(n.final_code, n.name)
                    if d is not None:
                        defs[n.name] = d.text(n.final_code)
            ctx.pool.offer(child.signature.normalized_key(), child.name, defs)
    for desc in tree.descendants(node):
        if desc.status is not NodeStatus.ABORTED:
            desc.status = NodeStatus.ABORTED
    # children stay in the tree (the transcript keeps them) but are detached from the live search
    node.children = []


def _remove_calls(code: str, caller: str, lemma: str) -> str | None:
    """``caller`` with every call to ``lemma`` removed and the lemma's declaration dropped."""
    d = syntax.find_definition(code, caller)
    if d is None or not d.has_body:
        return None
    edits = []
    for stmt in syntax.walk_statements(syntax.parse_body(code, d)):
        if stmt.kind == "call" and stmt.callee() == lemma:
            s, e = syntax.full_line_span(code, stmt.start, stmt.end)
            edits.append((s, e, ""))
        elif stmt.kind == "assert" and stmt.body_open is not None:
            inner = [x for x in stmt.body if x.kind == "call" and x.callee() == lemma]
            if inner and len(inner) == len(stmt.body):
                head = " ".join(code[stmt.start : stmt.body_open].split())
                if head.endswith(" by"):
                    head = head[:-3]
                edits.append((stmt.start, stmt.end, head + ";"))
            else:
                edits.extend((x.start, x.end, "") for x in inner)
    if not edits:
        return None
    # nested edits inside an assert that is rewritten as a whole are redundant
    edits.sort()
    kept = []
    for e in edits:
        if kept and e[0] < kept[-1][1]:
            continue
        kept.append(e)
    out = syntax.apply_edits(code, kept)
    ld = syntax.find_definition(out, lemma)
    if ld is not None:
        s, e = syntax.full_line_span(out, ld.start, ld.end)
        out = out[:s] + out[e:]
    return out


def usefulness_check(ctx: EngineContext, parent: ProofNode, child: ProofNode) -> bool:
    """True when the parent still needs the lemma; otherwise the call is pruned from the parent."""
    assert parent.final_code is not None
    reduced = _remove_calls(parent.final_code, parent.name, child.name)
    if reduced is None:
        return True
    report = ctx.verify(reduced, child, "usefulness")
    if not report.verified:
        return True
    parent.final_code = reduced
    child.useful = False
    ctx.emit(EventKind.LEMMA_PRUNED, node=child.id, parent=parent.id, lemma=child.name)
    return False


def explore_node(ctx: EngineContext, node: ProofNode) -> bool:
    """Visit ``node`` up to s times, each retry cooler by the annealing step, then DFS its children."""
    tree = ctx.tree
    assert tree is not None
    config = ctx.config
    failed_from = node.id
    for retry in range(config.retry_budget_s):
        node.retries_used = retry
        node.temperature = temperature_schedule(config, retry)
        if retry:
            ctx.emit(EventKind.ROLLBACK, **{"from": failed_from, "to": node.id, "temperature": node.temperature, "retry": retry})
            discard_subtree(ctx, node)
        failed_from = node.id
        if not visit_node(ctx, node):
            continue
        parent = tree.nodes[node.parent_id] if node.parent_id is not None else None
        if (
            parent is not None
            and config.usefulness_check
            and node.signature.kind == "lemma"
            and node.name not in tree.stashed_bodies
            and not usefulness_check(ctx, parent, node)
        ):
            return True
        ok = True
        for child in instantiate_children(ctx, node):
            if not explore_node(ctx, child):
                failed_from = child.id
                ok = False
                break
        if ok:
            return True
    node.status = NodeStatus.EXHAUSTED
    return False


def explore(ctx: EngineContext) -> bool:
    assert ctx.tree is not None
    return explore_node(ctx, ctx.tree.root)


def assemble(tree: ProofTree) -> str:
    """Fold every live verified node's definition into the root's final program."""
    root = tree.root
    assert root.final_code is not None
    program = root.final_code
    live = []
    stack = [root]
    while stack:
        n = stack.pop()
        live.append(n)
        stack.extend(reversed([tree.nodes[c] for c in n.children if tree.nodes[c].useful]))
    for n in live[1:]:
        if n.final_code is None:
            continue
        d = syntax.find_definition(n.final_code, n.name)
        if d is None:
            continue
        text = d.text(n.final_code)
        if syntax.find_definition(program, n.name) is not None:
            program = syntax.replace_definition(program, n.name, text)
        else:
            program = program.rstrip("\n") + "\n\n" + text + "\n"
    return program
