"""Randomized but reproducible search scenarios over a toy Dafny program.

The scripted model answers from a seeded RNG keyed on the full request, so a
given scenario always replays identically.  Candidates carry an
``// outcome: X`` marker that the mock verifier turns into Dafny-style output.
"""

from __future__ import annotations

import hashlib
import random
import re
from dataclasses import dataclass, field

from proofforge import syntax
from proofforge.engine import run_attempt
from proofforge.engine.context import VirtualClock
from proofforge.llm import LlmGateway
from proofforge.model import RunConfig, VerificationTask
from proofforge.transcript import EventKind, RunTranscript
from proofforge.verifier import ScriptedEntry, ScriptedMock

PROGRAM = """\
method Target(n: nat) returns (r: nat)
  ensures r == n
{
  r := 0;
  var i := 0;
  while i < n
  {
    i := i + 1;
    r := r + 1;
  }
}
"""

TARGET_BODY = """\
{{
  // outcome: {outcome}
  r := 0;
  var i := 0;
  while i < n
    invariant i <= n
    invariant r == i
  {{
    i := i + 1;
    r := r + 1;
    assert r == i;
  }}
}}"""

LEMMA_BODY = """\
{{
  // outcome: {outcome}
  assert x == x;
}}"""

OUTCOMES = ["ok", "assert", "invariant", "entry", "post", "timeout", "syntax", "mixed"]
OUTCOME_WEIGHTS = [34, 18, 12, 5, 10, 6, 5, 10]
_MARKER = re.compile(r"//\s*outcome:\s*(\w+)")
_CALL = re.compile(r"\bP\d+\(")


def _rng(*parts: object) -> random.Random:
    h = hashlib.sha256("\x1f".join(map(str, parts)).encode()).digest()
    return random.Random(int.from_bytes(h[:8], "big"))


def _fence(code: str) -> str:
    return "```dafny\n" + code.rstrip("\n") + "\n```\n"


@dataclass
class Responder:
    seed: int
    calls: int = 0

    def __call__(self, template_id: str, subs: dict, temperature: float) -> str:
        self.calls += 1
        rng = _rng(self.seed, template_id, temperature, sorted(subs.items()))
        base = template_id.split("/")[0]
        if base == "verifiability-gate" and "/" not in template_id:
            return rng.choices(["Yes", "No, the goal is false.", "Hard to tell."], [80, 12, 8])[0]
        if base == "verifiability-gate":
            return rng.choices(["Yes, it holds.", "No.", "Unclear."], [75, 20, 5])[0]
        if base in ("propose-sublemma-for-assertion", "propose-sublemma-for-invariant"):
            k = rng.randint(1, 6)
            sig = f"lemma P{k}(x: int)\n  ensures x * {k} == {k} * x\n"
            roll = rng.random()
            if roll < 0.1:
                return _fence(sig)
            if roll < 0.2:
                return _fence(sig) + _fence(f"Q{k}(i);")
            return _fence(sig) + _fence(f"P{k}(i);")
        if base in ("augment-annotations", "generate-body-and-annotations"):
            return self._candidate(rng, subs)
        raise KeyError(template_id)

    def _candidate(self, rng: random.Random, subs: dict) -> str:
        if rng.random() < 0.03:
            return ""
        outcome = rng.choices(OUTCOMES, OUTCOME_WEIGHTS)[0]
        if "name" in subs and subs["name"] == "Target":
            head = "method Target(n: nat) returns (r: nat)\n  ensures r == n\n"
            if rng.random() < 0.05:
                head = "method Target(n: nat) returns (r: nat)\n  ensures r >= n\n"
            text = head + TARGET_BODY.format(outcome=outcome)
        else:
            sig = subs.get("signature") or subs["definition"]
            d = syntax.scan_definitions(sig)[0]
            text = syntax.without_body(sig, d) + "\n" + LEMMA_BODY.format(outcome=outcome)
        if rng.random() < 0.2:
            k = rng.randint(1, 4)
            text += f"\n\nlemma H{k}(x: int)\n  ensures x - {k} + {k} == x\n"
        return _fence(text)


def _line_of(program: str, offset: int) -> int:
    return program.count("\n", 0, offset) + 1


def _first_line(program: str, d, pred) -> int | None:
    base = _line_of(program, d.start)
    for i, line in enumerate(d.text(program).splitlines()):
        if pred(line.strip()):
            return base + i
    return None


@dataclass
class MarkerVerifier:
    """Dafny-formatted verdicts derived from the outcome markers."""

    seed: int
    max_wall: float = 12.0

    def __call__(self, program: str) -> ScriptedEntry:
        wall = round(_rng(self.seed, program).uniform(0.5, self.max_wall), 2)
        if syntax.check_structure(program):
            return ScriptedEntry("x.dfy(1,0): Error: invalid syntax\n1 parse errors detected in x.dfy\n", 2, wall)
        errors: list[str] = []
        timeouts = 0
        for d in syntax.scan_definitions(program):
            if not d.has_body:
                continue
            text = d.text(program)
            m = _MARKER.search(text)
            outcome = m.group(1) if m else ("post" if d.name == "Target" else "ok")
            end_line = _line_of(program, d.end - 1)
            has_call = bool(_CALL.search(text))
            if outcome == "syntax":
                return ScriptedEntry(f"x.dfy({end_line},0): Error: rbrace expected\n1 parse errors detected in x.dfy\n", 2, wall)
            if outcome == "timeout":
                errors.append(f"x.dfy({_line_of(program, d.start)},7): Error: Verification of '{d.name}' timed out after 20 seconds")
                timeouts += 1
            if outcome in ("assert", "mixed"):
                line = _first_line(program, d, lambda s: s.startswith("assert ") and " by " not in s)
                if line:
                    errors.append(f"x.dfy({line},11): Error: assertion might not hold")
            if outcome in ("invariant", "entry", "mixed") and not has_call:
                line = _first_line(program, d, lambda s: s.startswith("invariant "))
                if line:
                    msg = ("this loop invariant could not be proved on entry" if outcome == "entry"
                           else "this invariant could not be proved to be maintained by the loop")
                    errors.append(f"x.dfy({line},14): Error: {msg}")
            if outcome == "post":
                errors.append(f"x.dfy({end_line},0): Error: a postcondition could not be proved on this return path")
        n_err = len(errors) - timeouts
        summary = f"Dafny program verifier finished with 1 verified, {n_err} errors" + (f", {timeouts} time outs" if timeouts else "")
        return ScriptedEntry("\n".join(errors + ["", summary]) + "\n", 4 if errors else 0, wall)


@dataclass
class Scenario:
    seed: int
    config: RunConfig
    llm_latency: float
    max_wall: float
    transcript: RunTranscript | None = None
    status: str | None = None
    extra: dict = field(default_factory=dict)


def make_scenario(seed: int) -> Scenario:
    rng = random.Random(seed)
    config = RunConfig(
        max_generation_attempts_t=rng.randint(1, 6),
        retry_budget_s=rng.randint(1, 3),
        temperature_step=rng.choice([0.3, 0.2, 0.5, 0.1]),
        initial_temperature=rng.choice([0.5, 0.5, 0.8, 0.3]),
        global_timeout_seconds=rng.choice([40, 120, 500, 500]),
        verifier_timeout_seconds=rng.choice([20, 8]),
        verify_at_k=1,
        decompose="never",
    )
    return Scenario(seed, config, rng.choice([0.0, 0.5, 3.0]), rng.choice([4.0, 12.0, 25.0]))


def run_scenario(seed: int) -> Scenario:
    sc = make_scenario(seed)
    llm = LlmGateway.scripted_with(Responder(seed))
    verifier = ScriptedMock(oracle=MarkerVerifier(seed, sc.max_wall), timeout=sc.config.verifier_timeout_seconds)
    result = run_attempt(VerificationTask(f"scenario-{seed}", PROGRAM), llm, verifier, sc.config,
                         clock=VirtualClock(llm_latency=sc.llm_latency))
    sc.transcript = result.transcript
    sc.status = result.status
    sc.extra["tree"] = result.tree
    return sc


# -- properties ---------------------------------------------------------------


def visits(transcript: RunTranscript) -> list[tuple[str, float, list]]:
    """(node, visit temperature, events inside the visit) per visit, in order."""
    out = []
    current = None
    for e in transcript.events:
        if e.kind is EventKind.VISIT_STARTED:
            current = (e.data["node"], e.data["temperature"], [])
            out.append(current)
        elif e.kind is EventKind.VISIT_ENDED:
            current = None
        elif current is not None:
            current[2].append(e)
    return out


def check_properties(sc: Scenario) -> list[str]:
    """Violations of the search-automaton bounds; empty when all hold."""
    from proofforge.model import temperature_schedule

    t = sc.transcript
    cfg = sc.config
    problems: list[str] = []
    per_node: dict[str, list[float]] = {}
    for node, temp, events in visits(t):
        per_node.setdefault(node, []).append(temp)
        charged = [e for e in events if e.kind is EventKind.LLM_CALL and e.data["node"] == node and e.data["charged"]]
        if len(charged) > cfg.max_generation_attempts_t:
            problems.append(f"{node}: {len(charged)} charged calls in one visit (t={cfg.max_generation_attempts_t})")
        for e in events:
            if e.kind is EventKind.LLM_CALL and e.data["node"] == node and e.data["temperature"] != temp:
                problems.append(f"{node}: call at {e.data['temperature']} during a visit at {temp}")
    for node, temps in per_node.items():
        if len(temps) > cfg.retry_budget_s:
            problems.append(f"{node}: {len(temps)} visits (s={cfg.retry_budget_s})")
        expected = [temperature_schedule(cfg, i) for i in range(len(temps))]
        if temps != expected:
            problems.append(f"{node}: temperatures {temps} != schedule {expected}")
    final = t.events[-1]
    if final.kind is not EventKind.FINAL_RESULT:
        problems.append("transcript does not end with FinalResult")
    if sum(1 for e in t.events if e.kind is EventKind.FINAL_RESULT) != 1:
        problems.append("FinalResult must appear exactly once")
    if final.data.get("reason") == "root-exhausted":
        root_visits = [v for v in visits(t) if v[0] == "n0"]
        ends = [e for e in t.events if e.kind is EventKind.VISIT_ENDED and e.data["node"] == "n0"]
        if len(root_visits) != cfg.retry_budget_s:
            problems.append(f"root exhausted after {len(root_visits)} visits (s={cfg.retry_budget_s})")
        if not ends or not _failed_last_exploration(t, "n0"):
            problems.append("root exhausted but its last exploration did not fail")
        tree = sc.extra.get("tree")
        if tree is not None and tree.root.status.value != "exhausted":
            problems.append(f"root status {tree.root.status.value} after exhaustion")
    deadline = cfg.global_timeout_seconds
    for e in t.events[:-1]:
        if e.time > deadline + 1e-9:
            problems.append(f"event {e.seq} ({e.kind.value}) at {e.time} after the {deadline}s deadline")
            break
    if final.data.get("status") == "aborted" and final.data.get("reason") != "global-timeout":
        problems.append("aborted without a global-timeout reason")
    return problems


def _failed_last_exploration(t: RunTranscript, node: str) -> bool:
    """The node's last visit failed, or a child created after it failed in turn."""
    starts = [e.seq for e in t.events if e.kind is EventKind.VISIT_STARTED and e.data["node"] == node]
    ends = [e for e in t.events if e.kind is EventKind.VISIT_ENDED and e.data["node"] == node]
    if not starts or not ends:
        return True
    if ends[-1].data["result"] != "verified":
        return True
    children = [e.data["node"] for e in t.events
                if e.kind is EventKind.NODE_CREATED and e.data["parent"] == node and e.seq > starts[-1]]
    return any(_failed_last_exploration(t, c) for c in children)
