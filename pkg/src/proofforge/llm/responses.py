"""Parsing model responses."""

from __future__ import annotations

import re
from dataclasses import dataclass

from ..model import ProofForgeError


class UnparseableVerdictError(ProofForgeError):
    pass


class EmptyResponseError(ProofForgeError):
    pass


_FENCE = re.compile(r"```[ \t]*([A-Za-z0-9_+-]*)[^\n]*\n(.*?)(?:```|\Z)", re.S)
_WORD = re.compile(r"[A-Za-z]+")


def parse_verdict(response_text: str) -> bool:
    """Yes/no answer: the leading word if it is a verdict, else a lone verdict token.

    A first line naming both verdicts ("yes or no ...") is ambiguous whatever it starts with.
    """
    words = [w.lower() for w in _WORD.findall(response_text)]
    if not words:
        raise UnparseableVerdictError("response contains no words")
    first_line = next((ln for ln in response_text.splitlines() if ln.strip()), "")
    on_first = {w.lower() for w in _WORD.findall(first_line)} & {"yes", "no"}
    if len(on_first) == 2:
        raise UnparseableVerdictError(f"both verdicts on the first line: {first_line[:80]!r}")
    if words[0] in ("yes", "no"):
        return words[0] == "yes"
    # first line often carries the answer after a short lead-in ("The answer is: NO.")
    if len(on_first) == 1:
        return on_first.pop() == "yes"
    found = set(words) & {"yes", "no"}
    if len(found) == 1:
        return found.pop() == "yes"
    raise UnparseableVerdictError(f"no unambiguous yes/no in response: {response_text[:80]!r}")


@dataclass(frozen=True)
class CodeBlock:
    code: str
    low_confidence: bool = False


def extract_code_blocks(response_text: str) -> list[str]:
    return [m.group(2).rstrip() + "\n" for m in _FENCE.finditer(response_text)]


def extract_code_block(response_text: str) -> CodeBlock:
    """First fenced block; the whole response, flagged, when there is no fence."""
    if not response_text.strip():
        raise EmptyResponseError("model returned an empty response")
    blocks = extract_code_blocks(response_text)
    if blocks:
        return CodeBlock(blocks[0])
    return CodeBlock(response_text.strip() + "\n", low_confidence=True)
