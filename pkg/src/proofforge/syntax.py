"""Lightweight structural view of Dafny source text.

This is not a Dafny parser. It tokenizes, finds top-level declarations and
splits method bodies into statements, which is all the transformations in
this package need. Offsets are character offsets into the original text so
edits can be spliced back without disturbing formatting.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

from .model import MethodSignature, ProofForgeError


class DafnySyntaxError(ProofForgeError):
    pass


# ---------------------------------------------------------------------------
# Tokens
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Token:
    kind: str  # ident | number | string | char | op | attr
    text: str
    start: int
    end: int


_OPERATORS = sorted(
    [
        "<==>", "==>", "<==", "-->", "~>", "->", "!!", "==", "!=", "<=", ">=", "&&",
        "||", ":=", "::", ":|", "..", "=>", "#[", "!in",
    ],
    key=len,
    reverse=True,
)


def _ident_start(c: str) -> bool:
    return c.isalpha() or c == "_"


def _ident_part(c: str) -> bool:
    return c.isalnum() or c in "_'?"


def tokenize(text: str) -> list[Token]:
    """Split Dafny text into tokens, dropping comments and whitespace."""
    tokens: list[Token] = []
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
            continue
        if text.startswith("//", i):
            j = text.find("\n", i)
            i = n if j < 0 else j
            continue
        if text.startswith("/*", i):
            depth, j = 1, i + 2
            while j < n and depth:
                if text.startswith("/*", j):
                    depth, j = depth + 1, j + 2
                elif text.startswith("*/", j):
                    depth, j = depth - 1, j + 2
                else:
                    j += 1
            if depth:
                raise DafnySyntaxError(f"unterminated comment at offset {i}")
            i = j
            continue
        if c == '"' or (c == "@" and text.startswith('@"', i)):
            verbatim = c == "@"
            j = i + (2 if verbatim else 1)
            while j < n:
                if verbatim and text.startswith('""', j):
                    j += 2
                    continue
                if not verbatim and text[j] == "\\":
                    j += 2
                    continue
                if text[j] == '"':
                    break
                if not verbatim and text[j] == "\n":
                    raise DafnySyntaxError(f"unterminated string at offset {i}")
                j += 1
            if j >= n:
                raise DafnySyntaxError(f"unterminated string at offset {i}")
            tokens.append(Token("string", text[i : j + 1], i, j + 1))
            i = j + 1
            continue
        if c == "'":
            # char literal: 'a', '\n', '\''
            j = i + 1
            if j < n and text[j] == "\\":
                j += 2
                while j < n and text[j] != "'" and j - i < 12:
                    j += 1
            else:
                j += 1
            if j < n and text[j] == "'":
                tokens.append(Token("char", text[i : j + 1], i, j + 1))
                i = j + 1
                continue
            raise DafnySyntaxError(f"bad character literal at offset {i}")
        if _ident_start(c):
            j = i + 1
            while j < n and _ident_part(text[j]):
                j += 1
            tokens.append(Token("ident", text[i:j], i, j))
            i = j
            continue
        if c.isdigit():
            j = i + 1
            if c == "0" and j < n and text[j] in "xX":
                j += 1
                while j < n and (text[j] in "0123456789abcdefABCDEF_"):
                    j += 1
            else:
                while j < n and (text[j].isdigit() or text[j] == "_"):
                    j += 1
                if j + 1 < n and text[j] == "." and text[j + 1].isdigit():
                    j += 1
                    while j < n and (text[j].isdigit() or text[j] == "_"):
                        j += 1
            tokens.append(Token("number", text[i:j], i, j))
            i = j
            continue
        if text.startswith("{:", i):
            tokens.append(Token("attr", "{:", i, i + 2))
            i += 2
            continue
        for op in _OPERATORS:
            if text.startswith(op, i):
                tokens.append(Token("op", op, i, i + len(op)))
                i += len(op)
                break
        else:
            tokens.append(Token("op", c, i, i + 1))
            i += 1
    return tokens


def token_texts(text: str) -> list[str]:
    return [t.text for t in tokenize(text)]


class LineIndex:
    """Offset <-> (1-based line, 1-based column) conversion."""

    def __init__(self, text: str):
        self.text = text
        self.starts = [0] + [i + 1 for i, c in enumerate(text) if c == "\n"]

    def line_of(self, offset: int) -> int:
        return bisect.bisect_right(self.starts, offset)

    def position(self, offset: int) -> tuple[int, int]:
        line = self.line_of(offset)
        return line, offset - self.starts[line - 1] + 1

    def line_start(self, line: int) -> int:
        return self.starts[max(0, min(line, len(self.starts)) - 1)]

    def line_end(self, line: int) -> int:
        """Offset of the newline ending ``line`` (or len(text))."""
        if line < len(self.starts):
            return self.starts[line] - 1
        return len(self.text)

    def line_text(self, line: int) -> str:
        return self.text[self.line_start(line) : self.line_end(line)]


def full_line_span(text: str, start: int, end: int) -> tuple[int, int]:
    """Grow [start, end) to whole lines when only whitespace surrounds it.

    Returns the original span when other code shares the line.
    """
    ls = text.rfind("\n", 0, start) + 1
    if text[ls:start].strip():
        return start, end
    le = text.find("\n", end)
    le = len(text) if le < 0 else le
    if text[end:le].strip():
        return start, end
    return ls, min(le + 1, len(text))


def indentation_at(text: str, offset: int) -> str:
    ls = text.rfind("\n", 0, offset) + 1
    line = text[ls:]
    return line[: len(line) - len(line.lstrip(" \t"))]


def apply_edits(text: str, edits: Iterable[tuple[int, int, str]]) -> str:
    """Apply non-overlapping (start, end, replacement) edits."""
    ordered = sorted(edits, key=lambda e: (e[0], e[1]))
    out, pos = [], 0
    for start, end, repl in ordered:
        if start < pos:
            raise ValueError(f"overlapping edits at offset {start}")
        out.append(text[pos:start])
        out.append(repl)
        pos = end
    out.append(text[pos:])
    return "".join(out)


# ---------------------------------------------------------------------------
# Expression helpers
# ---------------------------------------------------------------------------

OPEN = {"(": ")", "[": "]", "{": "}", "attr": "}"}
CLOSE = {")", "]", "}"}

# identifiers that never end an expression, so a following '{' opens a set display
_NON_ENDING_WORDS = frozenset(
    """in then else if requires ensures invariant decreases modifies reads returns
    by var assert assume case match forall exists set iset map imap multiset calc
    to downto is as new not while for print return yield expect reveal label
    and or""".split()
)
_ENDING_OPS = frozenset({")", "]", "}", "|", ">"})


def ends_expression(prev: Token | None) -> bool:
    if prev is None:
        return False
    if prev.kind in ("number", "string", "char"):
        return True
    if prev.kind == "ident":
        return prev.text not in _NON_ENDING_WORDS
    return prev.text in _ENDING_OPS or prev.text == "*"


def match_close(tokens: Sequence[Token], i: int) -> int:
    """Index of the token closing the bracket opened at ``tokens[i]``."""
    depth = 0
    for j in range(i, len(tokens)):
        t = tokens[j]
        if t.kind == "attr" or (t.kind == "op" and t.text in ("(", "[", "{", "#[")):
            depth += 1
        elif t.kind == "op" and t.text in CLOSE:
            depth -= 1
            if depth == 0:
                return j
    raise DafnySyntaxError(f"unbalanced bracket at offset {tokens[i].start}")


def _is_open(t: Token) -> bool:
    return t.kind == "attr" or (t.kind == "op" and t.text in ("(", "[", "{", "#["))


def _is_close(t: Token) -> bool:
    return t.kind == "op" and t.text in CLOSE


# ---------------------------------------------------------------------------
# Declarations
# ---------------------------------------------------------------------------

CALLABLE_KEYWORDS = ("method", "lemma", "function", "predicate", "constructor")
MODIFIER_WORDS = frozenset({"ghost", "static", "opaque", "twostate", "least", "greatest", "abstract", "inductive", "copredicate", "colemma"})
CONTAINER_KEYWORDS = frozenset({"module", "class", "trait"})
OTHER_DECL_WORDS = frozenset(
    {"datatype", "codatatype", "type", "newtype", "const", "var", "import", "include", "export", "iterator"}
)
DECL_START_WORDS = frozenset(CALLABLE_KEYWORDS) | MODIFIER_WORDS | CONTAINER_KEYWORDS | OTHER_DECL_WORDS
CLAUSE_WORDS = ("requires", "ensures", "decreases", "reads", "modifies")


@dataclass(frozen=True)
class Definition:
    kind: str  # method | lemma | function | predicate | constructor
    name: str
    start: int  # first modifier or keyword
    keyword_start: int
    header_end: int  # start of body '{' or end of declaration
    body_start: int | None
    body_end: int | None  # exclusive, just past '}'
    end: int
    modifiers: tuple[str, ...] = ()
    container: str = ""

    @property
    def has_body(self) -> bool:
        return self.body_start is not None

    def text(self, source: str) -> str:
        return source[self.start : self.end]

    def header(self, source: str) -> str:
        return source[self.start : self.header_end].rstrip()

    def body(self, source: str) -> str | None:
        if self.body_start is None:
            return None
        return source[self.body_start : self.body_end]


def _skip_attributes(tokens: Sequence[Token], i: int) -> int:
    while i < len(tokens) and tokens[i].kind == "attr":
        i = match_close(tokens, i) + 1
    return i


def _find_body_open(tokens: Sequence[Token], i: int, stop_words: frozenset[str]) -> tuple[int | None, int]:
    """Scan a header from index i. Returns (index of body '{' or None, index where header stops)."""
    depth = 0
    prev: Token | None = None
    j = i
    while j < len(tokens):
        t = tokens[j]
        if depth == 0 and t.kind == "ident" and t.text in stop_words and j > i:
            return None, j
        if depth == 0 and t.kind == "op" and t.text == "}":
            return None, j
        if depth == 0 and t.kind == "op" and t.text == "{" and ends_expression(prev):
            return j, j
        if t.kind == "attr":
            j = match_close(tokens, j) + 1
            continue
        if _is_open(t):
            depth += 1
        elif _is_close(t):
            depth -= 1
        prev = t
        j += 1
    return None, j


def scan_definitions(source: str, tokens: Sequence[Token] | None = None) -> list[Definition]:
    """All method/lemma/function/predicate declarations, in source order."""
    toks = tokenize(source) if tokens is None else list(tokens)
    defs: list[Definition] = []
    stop_words = DECL_START_WORDS - {"var"}

    def scan(i: int, end: int, container: str) -> None:
        while i < end:
            t = toks[i]
            if t.kind == "op" and t.text == "}":
                i += 1
                continue
            start_tok = i
            modifiers = []
            while i < end and (toks[i].kind == "attr" or (toks[i].kind == "ident" and toks[i].text in MODIFIER_WORDS)):
                if toks[i].kind == "attr":
                    i = match_close(toks, i) + 1
                else:
                    modifiers.append(toks[i].text)
                    i += 1
            if i >= end:
                return
            t = toks[i]
            if t.kind == "ident" and (t.text in CALLABLE_KEYWORDS or t.text in ("inductive", "copredicate", "colemma")):
                kind = t.text
                kw_start = t.start
                i += 1
                if kind in ("function", "predicate") and i < end and toks[i].text == "method":
                    i += 1
                i = _skip_attributes(toks, i)
                name = ""
                if i < end and toks[i].kind == "ident":
                    name = toks[i].text
                    i += 1
                body_idx, stop = _find_body_open(toks, i, stop_words)
                if body_idx is not None:
                    close = match_close(toks, body_idx)
                    header_end = toks[body_idx].start
                    body_start, body_end = toks[body_idx].start, toks[close].end
                    next_i = close + 1
                    decl_end = body_end
                else:
                    next_i = stop
                    decl_end = toks[stop - 1].end if stop > 0 else t.end
                    header_end = decl_end
                    body_start = body_end = None
                defs.append(
                    Definition(
                        kind="lemma" if kind in ("colemma",) else kind,
                        name=name,
                        start=toks[start_tok].start,
                        keyword_start=kw_start,
                        header_end=header_end,
                        body_start=body_start,
                        body_end=body_end,
                        end=decl_end,
                        modifiers=tuple(modifiers),
                        container=container,
                    )
                )
                i = next_i
                continue
            if t.kind == "ident" and t.text in CONTAINER_KEYWORDS:
                # module/class/trait Name ... {  members  }
                j = i + 1
                while j < end and not (toks[j].kind == "op" and toks[j].text == "{"):
                    j += 1
                if j >= end:
                    return
                close = match_close(toks, j)
                name = toks[i + 1].text if i + 1 < end else ""
                scan(j + 1, close, f"{container}.{name}" if container else name)
                i = close + 1
                continue
            # anything else: skip to the next declaration start at depth 0
            i += 1
            depth = 0
            while i < end:
                tk = toks[i]
                if depth == 0 and tk.kind == "ident" and tk.text in stop_words:
                    break
                if depth == 0 and tk.kind == "op" and tk.text == "}":
                    break
                if _is_open(tk):
                    depth += 1
                elif _is_close(tk):
                    depth -= 1
                i += 1

    scan(0, len(toks), "")
    return defs


def find_definition(source: str, name: str) -> Definition | None:
    for d in scan_definitions(source):
        if d.name == name:
            return d
    return None


def definition_names(source: str) -> dict[str, Definition]:
    return {d.name: d for d in scan_definitions(source)}


def lemma_names(source: str) -> set[str]:
    return {d.name for d in scan_definitions(source) if d.kind == "lemma"}


def replace_definition(source: str, name: str, new_text: str) -> str:
    d = find_definition(source, name)
    if d is None:
        raise KeyError(name)
    return source[: d.start] + new_text.strip("\n") + source[d.end :]


def without_body(source: str, definition: Definition) -> str:
    """The declaration text of ``definition`` with its body removed."""
    return source[definition.start : definition.header_end].rstrip()


# ---------------------------------------------------------------------------
# Signatures
# ---------------------------------------------------------------------------


def _split_top(tokens: Sequence[Token], text: str, sep: str = ",") -> list[str]:
    """Split a token run on ``sep`` at bracket depth 0 (angle brackets count)."""
    parts, depth, angle, cur_start = [], 0, 0, None
    out: list[tuple[int, int]] = []
    for t in tokens:
        if cur_start is None:
            cur_start = t.start
        if _is_open(t):
            depth += 1
        elif _is_close(t):
            depth -= 1
        elif t.text == "<" and depth == 0:
            angle += 1
        elif t.text == ">" and depth == 0 and angle:
            angle -= 1
        if t.text == sep and depth == 0 and angle == 0:
            out.append((cur_start, t.start))
            cur_start = None
    if tokens and cur_start is not None:
        out.append((cur_start, tokens[-1].end))
    for a, b in out:
        piece = " ".join(text[a:b].split())
        if piece:
            parts.append(piece)
    return parts


def _parse_formals(tokens: Sequence[Token], text: str) -> tuple[tuple[str, str], ...]:
    formals = []
    for piece in _split_top(tokens, text):
        words = piece.split(":", 1)
        if len(words) != 2:
            raise DafnySyntaxError(f"cannot parse formal parameter {piece!r}")
        name = words[0].split()[-1]
        formals.append((name, words[1].strip()))
    return tuple(formals)


def parse_signature(source: str, definition: Definition) -> MethodSignature:
    toks = [t for t in tokenize(source[: definition.header_end]) if t.start >= definition.keyword_start]
    i = 1
    kind = toks[0].text
    if kind in ("function", "predicate") and i < len(toks) and toks[i].text == "method":
        i += 1
    i = _skip_attributes(toks, i)
    name = toks[i].text
    i += 1
    if i < len(toks) and toks[i].text == "<":
        depth = 0
        while i < len(toks):
            if toks[i].text == "<":
                depth += 1
            elif toks[i].text == ">":
                depth -= 1
                if depth == 0:
                    i += 1
                    break
            i += 1
    if i >= len(toks) or toks[i].text != "(":
        raise DafnySyntaxError(f"expected parameter list for {name}")
    close = match_close(toks, i)
    params = _parse_formals(toks[i + 1 : close], source)
    i = close + 1
    returns: tuple[tuple[str, str], ...] = ()
    if i < len(toks) and toks[i].text == "returns":
        close = match_close(toks, i + 1)
        returns = _parse_formals(toks[i + 2 : close], source)
        i = close + 1
    elif i < len(toks) and toks[i].text == ":" and kind in ("function", "predicate"):
        j = i + 1
        if j < len(toks) and toks[j].text == "(":
            close = match_close(toks, j)
            returns = _parse_formals(toks[j + 1 : close], source)
            i = close + 1
        else:
            k = j
            while k < len(toks) and not (toks[k].kind == "ident" and toks[k].text in CLAUSE_WORDS):
                k += 1
            rtype = " ".join(source[toks[j].start : toks[k - 1].end].split())
            returns = (("", rtype),)
            i = k
    clauses: dict[str, list[str]] = {w: [] for w in CLAUSE_WORDS}
    while i < len(toks):
        kw = toks[i].text
        if kw not in CLAUSE_WORDS:
            raise DafnySyntaxError(f"unexpected {kw!r} in header of {name}")
        j = i + 1
        depth = 0
        while j < len(toks):
            t = toks[j]
            if depth == 0 and t.kind == "ident" and t.text in CLAUSE_WORDS:
                break
            if _is_open(t):
                depth += 1
            elif _is_close(t):
                depth -= 1
            j += 1
        if j > i + 1:
            clauses[kw].append(" ".join(source[toks[i + 1].start : toks[j - 1].end].split()))
        i = j
    sig_kind = {"constructor": "method"}.get(kind, kind)
    if sig_kind not in ("method", "lemma", "function", "predicate"):
        sig_kind = "lemma"
    return MethodSignature(
        name=name,
        parameters=params,
        returns=returns,
        requires_clauses=tuple(clauses["requires"]),
        ensures_clauses=tuple(clauses["ensures"]),
        decreases_clauses=tuple(clauses["decreases"]),
        kind=sig_kind,
        modifiers=tuple(m for m in definition.modifiers if m in ("ghost", "static", "opaque", "twostate")),
    )


def signature_of(source: str, name: str) -> MethodSignature:
    d = find_definition(source, name)
    if d is None:
        raise KeyError(name)
    return parse_signature(source, d)


def check_structure(source: str) -> list[str]:
    """Cheap syntactic sanity check; returns a list of problems (empty = ok)."""
    problems = []
    try:
        toks = tokenize(source)
    except DafnySyntaxError as exc:
        return [str(exc)]
    depth = 0
    for t in toks:
        if _is_open(t):
            depth += 1
        elif _is_close(t):
            depth -= 1
            if depth < 0:
                return [f"unbalanced closing bracket at offset {t.start}"]
    if depth:
        return ["unbalanced brackets"]
    try:
        defs = scan_definitions(source, toks)
        seen = set()
        for d in defs:
            if not d.name:
                continue
            if d.name in seen and not d.container:
                problems.append(f"duplicate definition {d.name}")
            seen.add(d.name)
            parse_signature(source, d)
            if d.has_body and d.kind in ("method", "lemma", "constructor"):
                parse_body(source, d)
    except DafnySyntaxError as exc:
        problems.append(str(exc))
    return problems


# ---------------------------------------------------------------------------
# Statements
# ---------------------------------------------------------------------------

ANNOTATION_STATEMENTS = frozenset({"assert", "assume", "calc", "reveal", "ghost-var"})
LOOP_SPEC_WORDS = frozenset({"invariant", "decreases", "modifies"})


@dataclass
class Spec:
    keyword: str
    start: int
    end: int

    def text(self, source: str) -> str:
        return source[self.start : self.end]

    def expression(self, source: str) -> str:
        return " ".join(source[self.start : self.end].split()[1:])


@dataclass
class Stmt:
    kind: str
    start: int
    end: int
    tokens: list[Token] = field(default_factory=list, repr=False)
    body: list["Stmt"] = field(default_factory=list)  # loops, forall, blocks
    branches: list[list["Stmt"]] = field(default_factory=list)  # if: then / else parts
    specs: list[Spec] = field(default_factory=list)
    header_end: int | None = None  # offset of a loop's body '{'
    body_open: int | None = None
    body_close: int | None = None  # offset of the closing '}'

    def text(self, source: str) -> str:
        return source[self.start : self.end]

    @property
    def is_loop(self) -> bool:
        return self.kind in ("while", "for")

    def walk(self) -> Iterator["Stmt"]:
        yield self
        for s in self.body:
            yield from s.walk()
        for branch in self.branches:
            for s in branch:
                yield from s.walk()

    def callee(self) -> str | None:
        """Name called by a bare call statement ``Name(args);``."""
        if self.kind != "call" or not self.tokens:
            return None
        toks = self.tokens
        i = 0
        while i + 2 < len(toks) and toks[i].kind == "ident" and toks[i + 1].text == ".":
            i += 2
        if toks[i].kind == "ident" and i + 1 < len(toks) and toks[i + 1].text == "(":
            return toks[i].text
        return None


class _StmtParser:
    def __init__(self, source: str, tokens: Sequence[Token]):
        self.src = source
        self.toks = tokens

    def error(self, i: int, msg: str) -> DafnySyntaxError:
        off = self.toks[min(i, len(self.toks) - 1)].start if self.toks else 0
        line = self.src.count("\n", 0, off) + 1
        return DafnySyntaxError(f"line {line}: {msg}")

    def block(self, i: int) -> tuple[list[Stmt], int]:
        """Parse statements inside the block opened at toks[i]; returns (stmts, index of '}')."""
        if self.toks[i].text != "{":
            raise self.error(i, "expected '{'")
        j = i + 1
        out = []
        while j < len(self.toks) and self.toks[j].text != "}":
            stmt, j = self.statement(j)
            out.append(stmt)
        if j >= len(self.toks):
            raise self.error(i, "unterminated block")
        return out, j

    def to_semicolon(self, i: int) -> int:
        depth = 0
        j = i
        while j < len(self.toks):
            t = self.toks[j]
            if _is_open(t):
                depth += 1
            elif _is_close(t):
                if depth == 0:
                    raise self.error(j, "missing ';'")
                depth -= 1
            elif depth == 0 and t.text == ";":
                return j
            j += 1
        raise self.error(i, "missing ';'")

    def simple(self, kind: str, i: int) -> tuple[Stmt, int]:
        j = self.to_semicolon(i)
        return Stmt(kind, self.toks[i].start, self.toks[j].end, list(self.toks[i : j + 1])), j + 1

    def header_and_body(self, i: int, spec_words: frozenset[str]) -> tuple[list[Spec], int]:
        """From toks[i] (just after the keyword), find loop specs and the body '{'."""
        depth = 0
        prev: Token | None = None
        specs: list[Spec] = []
        cur: tuple[str, int] | None = None
        last_end = None
        j = i
        while j < len(self.toks):
            t = self.toks[j]
            if depth == 0 and t.kind == "ident" and t.text in spec_words:
                if cur is not None:
                    specs.append(Spec(cur[0], cur[1], last_end))
                cur = (t.text, t.start)
            elif depth == 0 and t.text == "{" and t.kind == "op" and ends_expression(prev):
                if cur is not None:
                    specs.append(Spec(cur[0], cur[1], last_end))
                return specs, j
            if t.kind == "attr":
                j = match_close(self.toks, j) + 1
                prev = self.toks[j - 1]
                last_end = prev.end
                continue
            if _is_open(t):
                depth += 1
            elif _is_close(t):
                if depth == 0:
                    break
                depth -= 1
            prev = t
            last_end = t.end
            j += 1
        raise self.error(i, "loop without a body")

    def statement(self, i: int) -> tuple[Stmt, int]:
        t = self.toks[i]
        w = t.text if t.kind == "ident" else None
        if t.kind == "op" and t.text == "{":
            body, close = self.block(i)
            return Stmt("block", t.start, self.toks[close].end, body=body, body_open=t.start, body_close=self.toks[close].start), close + 1
        if t.kind == "op" and t.text == ";":
            return Stmt("empty", t.start, t.end, [t]), i + 1
        if w == "label":
            j = i + 1
            while j < len(self.toks) and self.toks[j].text != ":":
                j += 1
            inner, k = self.statement(j + 1)
            return Stmt(inner.kind, t.start, inner.end, inner.tokens, inner.body, inner.branches, inner.specs,
                        inner.header_end, inner.body_open, inner.body_close), k
        if w == "ghost" and i + 1 < len(self.toks) and self.toks[i + 1].text == "var":
            return self.simple("ghost-var", i)
        if w == "var":
            return self.simple("var", i)
        if w == "assert":
            depth = 0
            j = i + 1
            while j < len(self.toks):
                tk = self.toks[j]
                if _is_open(tk):
                    depth += 1
                elif _is_close(tk):
                    depth -= 1
                elif depth == 0 and tk.text == ";":
                    return Stmt("assert", t.start, tk.end, list(self.toks[i : j + 1])), j + 1
                elif depth == 0 and tk.kind == "ident" and tk.text == "by" and j + 1 < len(self.toks) and self.toks[j + 1].text == "{":
                    body, close = self.block(j + 1)
                    return (
                        Stmt("assert", t.start, self.toks[close].end, list(self.toks[i : close + 1]), body=body,
                             body_open=self.toks[j + 1].start, body_close=self.toks[close].start),
                        close + 1,
                    )
                j += 1
            raise self.error(i, "unterminated assert")
        if w in ("assume", "expect", "print", "reveal", "return", "break", "continue", "yield", "modify"):
            return self.simple(w, i)
        if w == "if":
            return self.if_stmt(i)
        if w in ("while", "for"):
            if i + 1 < len(self.toks) and self.toks[i + 1].text == "{":
                raise self.error(i, "guarded-alternative loops are not supported")
            specs, open_idx = self.header_and_body(i + 1, LOOP_SPEC_WORDS)
            body, close = self.block(open_idx)
            return (
                Stmt(w, t.start, self.toks[close].end, list(self.toks[i:open_idx]), body=body, specs=specs,
                     header_end=self.toks[open_idx].start, body_open=self.toks[open_idx].start,
                     body_close=self.toks[close].start),
                close + 1,
            )
        if w == "forall":
            specs, open_idx = self.header_and_body(i + 1, frozenset({"ensures"}))
            body, close = self.block(open_idx)
            return (
                Stmt("forall", t.start, self.toks[close].end, list(self.toks[i : close + 1]), body=body, specs=specs,
                     header_end=self.toks[open_idx].start, body_open=self.toks[open_idx].start,
                     body_close=self.toks[close].start),
                close + 1,
            )
        if w in ("calc", "match"):
            j = i + 1
            prev = t
            while j < len(self.toks) and not (self.toks[j].text == "{" and (w == "calc" or ends_expression(prev))):
                prev = self.toks[j]
                j += 1
            if j >= len(self.toks):
                raise self.error(i, f"{w} without a block")
            close = match_close(self.toks, j)
            return Stmt(w, t.start, self.toks[close].end, list(self.toks[i : close + 1])), close + 1
        stmt, j = self.simple("call", i)
        depth = 0
        for tk in stmt.tokens:
            if _is_open(tk):
                depth += 1
            elif _is_close(tk):
                depth -= 1
            elif depth == 0 and tk.text in (":=", ":|"):
                stmt.kind = "assign"
                break
        return stmt, j

    def if_stmt(self, i: int) -> tuple[Stmt, int]:
        t = self.toks[i]
        if i + 1 < len(self.toks) and self.toks[i + 1].text == "{":
            close = match_close(self.toks, i + 1)
            return Stmt("if", t.start, self.toks[close].end, list(self.toks[i : close + 1])), close + 1
        _, open_idx = self.header_and_body(i + 1, frozenset())
        then, close = self.block(open_idx)
        branches = [then]
        end_idx = close
        j = close + 1
        if j < len(self.toks) and self.toks[j].text == "else":
            if self.toks[j + 1].text == "if":
                nested, k = self.if_stmt(j + 1)
                branches.append([nested])
                return Stmt("if", t.start, nested.end, list(self.toks[i:open_idx]), branches=branches,
                            header_end=self.toks[open_idx].start), k
            els, close2 = self.block(j + 1)
            branches.append(els)
            end_idx = close2
            j = close2 + 1
        return Stmt("if", t.start, self.toks[end_idx].end, list(self.toks[i:open_idx]), branches=branches,
                    header_end=self.toks[open_idx].start), j


def parse_block_at(source: str, open_offset: int) -> list[Stmt]:
    toks = tokenize(source)
    idx = next((k for k, t in enumerate(toks) if t.start == open_offset), None)
    if idx is None or toks[idx].text != "{":
        raise DafnySyntaxError(f"no block opens at offset {open_offset}")
    stmts, _ = _StmtParser(source, toks).block(idx)
    return stmts


def parse_body(source: str, definition: Definition) -> list[Stmt]:
    if definition.body_start is None:
        return []
    return parse_block_at(source, definition.body_start)


def walk_statements(stmts: Iterable[Stmt]) -> Iterator[Stmt]:
    for s in stmts:
        yield from s.walk()


def count_loops(stmts: Iterable[Stmt]) -> int:
    return sum(1 for s in walk_statements(stmts) if s.is_loop)


def loop_depth(stmts: Iterable[Stmt]) -> int:
    best = 0
    for s in stmts:
        inner = [*s.body, *(x for b in s.branches for x in b)]
        d = loop_depth(inner) + (1 if s.is_loop else 0)
        best = max(best, d)
    return best


def is_annotation(stmt: Stmt, lemmas: set[str]) -> bool:
    if stmt.kind in ANNOTATION_STATEMENTS:
        return True
    if stmt.kind == "forall":
        return not any(t.text == ":=" for t in stmt.tokens)
    if stmt.kind == "call":
        return stmt.callee() in lemmas
    return False


# ---------------------------------------------------------------------------
# Identifier substitution and free variables
# ---------------------------------------------------------------------------

BINDER_WORDS = frozenset({"forall", "exists", "set", "iset", "map", "imap"})
BUILTIN_WORDS = frozenset(
    """true false null this old fresh unchanged allocated if then else in match case
    int nat bool char real string seq set iset multiset map imap array object
    forall exists var returns and or not is as new fn ghost""".split()
)


def _binder_scopes(tokens: Sequence[Token]) -> list[tuple[int, int, set[str]]]:
    """(first, last, names) token index ranges bound by quantifiers/comprehensions."""
    scopes = []
    for i, t in enumerate(tokens):
        if t.kind != "ident" or t.text not in BINDER_WORDS:
            continue
        if i + 1 < len(tokens) and tokens[i + 1].text in ("{", "["):
            continue  # set/map display, not a comprehension
        names: set[str] = set()
        j = i + 1
        expect_name = True
        angle = 0
        while j < len(tokens) and tokens[j].text not in ("::", "|", "{:"):
            tk = tokens[j]
            if tk.text == "<":
                angle += 1
            elif tk.text == ">":
                angle -= 1
            elif angle == 0 and tk.text == ",":
                expect_name = True
            elif angle == 0 and tk.text == ":":
                expect_name = False
            elif expect_name and tk.kind == "ident" and angle == 0:
                names.add(tk.text)
                expect_name = False
            j += 1
            if tokens[j - 1].text == ";":
                break
        # scope ends where the enclosing bracket closes
        depth = 0
        k = j
        while k < len(tokens):
            tk = tokens[k]
            if _is_open(tk):
                depth += 1
            elif _is_close(tk):
                if depth == 0:
                    break
                depth -= 1
            elif depth == 0 and tk.text == ";":
                break
            k += 1
        scopes.append((i + 1, k - 1, names))
    return scopes


def substitute_identifiers(text: str, mapping: dict[str, str]) -> str:
    """Replace free occurrences of identifiers; bound names and fields are left alone."""
    if not mapping:
        return text
    toks = tokenize(text)
    scopes = _binder_scopes(toks)
    edits = []
    for i, t in enumerate(toks):
        if t.kind != "ident" or t.text not in mapping:
            continue
        if i > 0 and toks[i - 1].text == ".":
            continue
        if any(a <= i <= b and t.text in names for a, b, names in scopes):
            continue
        repl = mapping[t.text]
        if not _is_atomic(repl):
            repl = f"({repl})"
        edits.append((t.start, t.end, repl))
    return apply_edits(text, edits)


def _is_atomic(expr: str) -> bool:
    toks = tokenize(expr)
    if len(toks) <= 1:
        return True
    if toks[0].kind == "ident" and len(toks) >= 2 and toks[1].text in ("(", "["):
        return match_close(toks, 1) == len(toks) - 1
    return toks[0].text == "(" and match_close(toks, 0) == len(toks) - 1


def free_identifiers(text: str) -> set[str]:
    """Identifiers that are neither bound, field selections, nor keywords."""
    toks = tokenize(text)
    scopes = _binder_scopes(toks)
    out = set()
    for i, t in enumerate(toks):
        if t.kind != "ident" or t.text in BUILTIN_WORDS:
            continue
        if i > 0 and toks[i - 1].text == ".":
            continue
        if any(a <= i <= b and t.text in names for a, b, names in scopes):
            continue
        if i + 1 < len(toks) and toks[i + 1].text == ":" and any(a <= i + 1 <= b for a, b, _ in scopes):
            continue
        out.add(t.text)
    return out


def statement_key(source: str, stmt: Stmt, mapping: dict[str, str] | None = None) -> str:
    """Whitespace-insensitive identity of a statement's executable tokens."""
    if stmt.is_loop or stmt.kind == "if":
        header = source[stmt.start : stmt.header_end] if stmt.header_end else stmt.text(source)
        if stmt.specs:
            header = source[stmt.start : stmt.specs[0].start]
        text = header
    else:
        text = stmt.text(source)
    if mapping:
        text = substitute_identifiers(text, mapping)
    return " ".join(token_texts(text))
