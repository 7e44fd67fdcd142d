"""Prompt templates, one per pipeline step."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping

from ..model import ProofForgeError

_PLACEHOLDER = re.compile(r"\$\{([a-z_][a-z0-9_]*)\}")
RESPONSE_SHAPES = ("boolean_verdict", "code_block", "signature_block", "free_text")


class RenderError(ProofForgeError):
    def __init__(self, template_id: str, missing: list[str]):
        super().__init__(f"template {template_id!r} is missing substitutions for: {', '.join(missing)}")
        self.missing = missing


@dataclass(frozen=True)
class RenderedPrompt:
    system: str
    user: str

    @property
    def text(self) -> str:
        return f"{self.system}\n\n{self.user}" if self.system else self.user


@dataclass(frozen=True)
class PromptTemplate:
    """``body`` uses ``${name}`` placeholders; every one must be listed in ``placeholders``."""

    template_id: str
    role_preamble: str
    body: str
    placeholders: tuple[str, ...]
    expected_response_shape: str

    def __post_init__(self) -> None:
        found = set(_PLACEHOLDER.findall(self.body))
        declared = set(self.placeholders)
        if found != declared:
            raise ValueError(
                f"template {self.template_id}: placeholders used {sorted(found)} but declared {sorted(declared)}"
            )
        if self.expected_response_shape not in RESPONSE_SHAPES:
            raise ValueError(f"unknown response shape {self.expected_response_shape!r}")

    def variant(self, suffix: str, role_preamble: str) -> "PromptTemplate":
        return PromptTemplate(
            f"{self.template_id}/{suffix}", role_preamble, self.body, self.placeholders, self.expected_response_shape
        )


def _normalize(text: str) -> str:
    return text.replace("\r\n", "\n").replace("\r", "\n")


def render_prompt(template: PromptTemplate, substitutions: Mapping[str, str]) -> RenderedPrompt:
    missing = [p for p in template.placeholders if p not in substitutions]
    if missing:
        raise RenderError(template.template_id, missing)
    user = _PLACEHOLDER.sub(lambda m: _normalize(str(substitutions[m.group(1)])), _normalize(template.body))
    return RenderedPrompt(_normalize(template.role_preamble), user)


DAFNY_EXPERT = (
    "You are an expert in the Dafny verification language. You write annotations "
    "(loop invariants, assertions, lemmas) that let the Dafny verifier prove programs correct. "
    "You never change a method's executable statements or its requires/ensures contract."
)

_YES_NO = "Answer strictly with a single word on the first line: yes or no."

DECOMPOSE_CODE = PromptTemplate(
    "decompose-code",
    DAFNY_EXPERT,
    """Refactor the method `${method}` below so that every method contains at most one loop.
Extract each loop (innermost first) into a new method named `${method}_loop<k>` starting at k=${first_index},
and rewrite `${method}` to call the extracted methods. Keep the signature and the requires/ensures
clauses of `${method}` exactly as they are. Give every extracted method requires/ensures clauses strong
enough to prove `${method}` from them.

Parameter passing strategy: ${strategy}
${strategy_description}

Program:
```dafny
${program}
```
${feedback}
Reply with one ```dafny code block containing `${method}` and all extracted methods, nothing else.""",
    ("method", "first_index", "strategy", "strategy_description", "program", "feedback"),
    "code_block",
)

CONSISTENCY_CHECK = PromptTemplate(
    "decomposition-consistency-check",
    DAFNY_EXPERT,
    """An original method was split into smaller methods. Check that each new method is verifiable on its own
and that the contracts of the extracted methods are strong enough to prove the original contract of the
rewritten method.

Original program:
```dafny
${original}
```

Decomposed program:
```dafny
${decomposed}
```
If the decomposition is not consistent, explain why after your answer.
""" + _YES_NO,
    ("original", "decomposed"),
    "boolean_verdict",
)

VERIFIABILITY_GATE = PromptTemplate(
    "verifiability-gate",
    "You are an expert in the Dafny verification language. You judge, at a high level, whether a "
    "proof goal is logically correct and can be verified.",
    """Consider the following goal in the context of the program below.

Goal:
```dafny
${signature}
```

Proof outline (may be empty):
${textual_proof}

Program:
```dafny
${code}
```
Is the goal logically correct and verifiable?
""" + _YES_NO,
    ("signature", "textual_proof", "code"),
    "boolean_verdict",
)

ASSERTION_JUDGE_PREAMBLE = (
    "You are an expert in the Dafny verification language. Dafny failed to prove an assertion. "
    "You judge whether the assertion is logically correct, so that a helper lemma could prove it."
)
INVARIANT_JUDGE_PREAMBLE = (
    "You are an expert in the Dafny verification language. Dafny failed to prove a loop invariant. "
    "You judge whether the invariant is logically correct, so that a helper lemma could prove it."
)
ASSERTION_JUDGE = VERIFIABILITY_GATE.variant("assertion", ASSERTION_JUDGE_PREAMBLE)
INVARIANT_JUDGE = VERIFIABILITY_GATE.variant("invariant", INVARIANT_JUDGE_PREAMBLE)

GENERATE_BODY = PromptTemplate(
    "generate-body-and-annotations",
    DAFNY_EXPERT,
    """Write a complete Dafny body for the declaration below, including every loop invariant, assertion and
helper lemma call needed to verify it. Keep the declaration's signature and contract unchanged.
Helper lemmas you introduce must be emitted as separate lemma declarations in the same block.

Declaration to implement:
```dafny
${signature}
```

Proof outline (may be empty):
${textual_proof}

Verified lemmas you may call:
${reusable}

Program (other declarations are already verified or assumed):
```dafny
${code}
```
${feedback}
Attempt ${attempt}. Reply with one ```dafny code block containing the full declaration.""",
    ("signature", "textual_proof", "reusable", "code", "feedback", "attempt"),
    "code_block",
)

AUGMENT_ANNOTATIONS = PromptTemplate(
    "augment-annotations",
    DAFNY_EXPERT,
    """Add the missing verification annotations (loop invariants, assertions, helper lemma calls) to
`${name}` so that Dafny verifies it. Do not change its executable statements or its contract.
Helper lemmas you introduce must be emitted as separate lemma declarations in the same block.

Current definition:
```dafny
${definition}
```

Proof outline (may be empty):
${textual_proof}

Verified lemmas you may call:
${reusable}

Program (other declarations are already verified or assumed):
```dafny
${code}
```
${feedback}
Attempt ${attempt}. Reply with one ```dafny code block containing the full annotated definition.""",
    ("name", "definition", "textual_proof", "reusable", "code", "feedback", "attempt"),
    "code_block",
)

REPAIR_FROM_DIAGNOSTICS = PromptTemplate(
    "repair-from-diagnostics",
    DAFNY_EXPERT,
    """Your previous version of `${name}` did not verify.

Previous version:
```dafny
${code}
```

Dafny reported:
${diagnostics}

Hint: ${hint}

Attempt ${attempt}. Reply with one ```dafny code block containing the corrected full definition of `${name}`.""",
    ("name", "code", "diagnostics", "hint", "attempt"),
    "code_block",
)

PROPOSE_SUBLEMMA_ASSERTION = PromptTemplate(
    "propose-sublemma-for-assertion",
    DAFNY_EXPERT,
    """Dafny cannot prove this assertion inside `${name}`:
    ${assertion}
Dafny reported: ${diagnostic}

Program:
```dafny
${code}
```

Propose one helper lemma whose postcondition lets Dafny prove the assertion.
Do not reuse any of these names: ${taken_names}
Reply with two ```dafny code blocks: first the lemma signature (no body), then the single call
statement to place in `assert ... by { <call> }`. Attempt ${attempt}.""",
    ("name", "assertion", "diagnostic", "code", "taken_names", "attempt"),
    "signature_block",
)

PROPOSE_SUBLEMMA_INVARIANT = PromptTemplate(
    "propose-sublemma-for-invariant",
    DAFNY_EXPERT,
    """Dafny cannot prove this loop invariant inside `${name}` (${failure}):
    ${invariant}
Dafny reported: ${diagnostic}

Loop:
```dafny
${loop}
```

Program:
```dafny
${code}
```

Propose one helper lemma stating that the invariant holds after one iteration of the loop, given that it
holds before (or, for an entry failure, that it holds initially). Its parameters capture the loop state.
Do not reuse any of these names: ${taken_names}
Reply with two ```dafny code blocks: first the lemma signature (no body), then the single call statement
that will be inserted ${placement}. Attempt ${attempt}.""",
    ("name", "failure", "invariant", "diagnostic", "loop", "code", "taken_names", "placement", "attempt"),
    "signature_block",
)

STRENGTHEN_CALLEE = PromptTemplate(
    "strengthen-callee-contract",
    DAFNY_EXPERT,
    """`${caller}` calls `${callee}`, but Dafny cannot prove the postcondition of `${caller}`:
${diagnostic}

The contract of `${callee}` is probably too weak. Current signature:
```dafny
${callee_signature}
```

Program:
```dafny
${code}
```
Attempt ${attempt}. Reply with one ```dafny code block containing only the strengthened signature of `${callee}`
(same name and parameters, no body).""",
    ("caller", "callee", "diagnostic", "callee_signature", "code", "attempt"),
    "signature_block",
)

MERGE_AND_RESTORE = PromptTemplate(
    "merge-and-restore",
    DAFNY_EXPERT,
    """The method `${method}` was split into several methods, which are now verified. Merge the verified
methods back into the original structure of `${method}`: keep the original executable statements exactly
and move the loop invariants, assertions and lemma calls onto the original loops, rewriting them in terms
of the original variables.

Original method:
```dafny
${original}
```

Verified modular program:
```dafny
${modular}
```

Mechanical draft (may be incomplete):
```dafny
${draft}
```
${feedback}
Attempt ${attempt}. Reply with one ```dafny code block containing the merged definition of `${method}`.""",
    ("method", "original", "modular", "draft", "feedback", "attempt"),
    "code_block",
)

TEMPLATES: dict[str, PromptTemplate] = {
    t.template_id: t
    for t in (
        DECOMPOSE_CODE,
        CONSISTENCY_CHECK,
        VERIFIABILITY_GATE,
        ASSERTION_JUDGE,
        INVARIANT_JUDGE,
        GENERATE_BODY,
        AUGMENT_ANNOTATIONS,
        REPAIR_FROM_DIAGNOSTICS,
        PROPOSE_SUBLEMMA_ASSERTION,
        PROPOSE_SUBLEMMA_INVARIANT,
        STRENGTHEN_CALLEE,
        MERGE_AND_RESTORE,
    )
}
