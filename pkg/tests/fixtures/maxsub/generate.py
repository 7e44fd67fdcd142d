"""Regenerate the frozen MaxSub artifacts from the authored replies and the oracle.

    python3 -m tests.fixtures.maxsub.generate

Writes the cassette, verifier table, expected transcript and expected output
here, plus a three-task bench corpus under tests/fixtures/corpus.  The tests
only ever read these files; rerunning this script must leave them unchanged.
"""

from __future__ import annotations

import json
import shutil
from pathlib import Path

from proofforge.engine import run_task
from proofforge.engine.context import VirtualClock
from proofforge.llm import Cassette, LlmGateway
from proofforge.model import RunConfig, VerificationTask
from proofforge.verifier import ScriptedMock

from .oracle import maxsub_oracle
from .script import responder

HERE = Path(__file__).parent
CORPUS = HERE.parent / "corpus"
RECORDED_AT = "authored"
OUTLINE = (
    "Track the running sum of the current slice with an invariant, and prove that extending a\n"
    "slice by one element adds that element to its sum.\n"
)


def hard_responder(template_id: str, subs: dict, temperature: float) -> str:
    # the model never believes the goal is provable, so every visit is gate-rejected
    if template_id == "verifiability-gate":
        return "No. The postcondition looks too strong for this implementation."
    return responder(template_id, subs, temperature)


def record(task: VerificationTask, reply, config: RunConfig):
    llm = LlmGateway.scripted_with(reply)
    verifier = ScriptedMock(oracle=maxsub_oracle)
    result = run_task(task, llm, verifier, config, clock_factory=VirtualClock)
    return result, llm.to_cassette(RECORDED_AT).to_json(), verifier.to_json()


def write_task(name: str, program: str, cassette: str, table: str, expected: str, outline: str = "") -> None:
    d = CORPUS / name
    if d.exists():
        shutil.rmtree(d)
    d.mkdir(parents=True)
    (d / "program.dfy").write_text(program)
    (d / "cassette.json").write_text(cassette)
    (d / "verifier_table.json").write_text(table)
    (d / "expected").write_text(expected + "\n")
    if outline:
        (d / "outline.md").write_text(outline)


def main() -> None:
    program = (HERE / "maxsub.dfy").read_text()
    annotated = (HERE / "maxsub_annotated.dfy").read_text()
    config = RunConfig()

    result, cassette, table = record(VerificationTask("maxsub", program), responder, config)
    assert result.verified, [a.status for a in result.attempts]
    (HERE / "cassette.json").write_text(cassette)
    (HERE / "verifier_table.json").write_text(table)
    (HERE / "expected.verified.dfy").write_text(result.program)
    # the frozen transcript is the replay of the frozen cassette, so it names the cassette as source
    replay = LlmGateway("replay", cassette=Cassette.load(HERE / "cassette.json", mode="replay"))
    replayed = run_task(VerificationTask("maxsub", program), replay, ScriptedMock.from_file(HERE / "verifier_table.json"),
                        config, clock_factory=VirtualClock)
    assert replayed.program == result.program
    (HERE / "expected_transcript.json").write_text(replayed.attempts[0].transcript.canonical())

    r, c, t = record(VerificationTask("maxsub", program, OUTLINE), responder, config)
    assert r.verified
    write_task("maxsub", program, c, t, "verifiable", OUTLINE)

    r, c, t = record(VerificationTask("maxsub_annotated", annotated), responder, config)
    assert r.verified and r.attempts[0].transcript.totals()["llm_calls"] == 0
    write_task("maxsub_annotated", annotated, c, t, "verifiable")

    r, c, t = record(VerificationTask("maxsub_hard", program), hard_responder, config)
    assert not r.verified
    write_task("maxsub_hard", program, c, t, "known-hard")
    print(json.dumps({"written": sorted(p.name for p in CORPUS.iterdir())}))


if __name__ == "__main__":
    main()
