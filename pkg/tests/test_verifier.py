from __future__ import annotations

import json
import os
import stat
import sys
import textwrap

import pytest

from proofforge.model import DiagnosticKind, MethodSignature, VerifierStatus
from proofforge.verifier import (
    DafnySubprocess,
    DeclarationConflictError,
    ScriptedMock,
    UnknownProgramError,
    VerifierEnvironmentError,
    classify_diagnostics,
    declare_bodiless,
    program_digest,
    report_from_output,
    run_verifier,
)

from .conftest import FIXTURES

CORPUS = json.loads((FIXTURES / "diagnostics" / "corpus.json").read_text())


@pytest.mark.parametrize("case", CORPUS, ids=[c["name"] for c in CORPUS])
def test_diagnostic_corpus(case):
    diags = [d for d in classify_diagnostics(case["output"], case["exit_code"]) if d.severity == "error"]
    assert [{"kind": d.kind.value, "line": d.line} for d in diags] == case["expected"]


def test_status_mapping():
    assert report_from_output("\nDafny program verifier finished with 2 verified, 0 errors\n", 0).status is VerifierStatus.VERIFIED
    failed = report_from_output("a.dfy(3,4): Error: assertion might not hold\n", 4)
    assert failed.status is VerifierStatus.FAILED
    assert report_from_output("Segmentation fault\n", 139).status is VerifierStatus.CRASH
    killed = next(c for c in CORPUS if c["exit_code"] is None)
    assert report_from_output(killed["output"], None).status is VerifierStatus.TIMEOUT


def test_postcondition_keeps_the_ensures_line_as_related():
    case = next(c for c in CORPUS if c["name"] == "postcondition-return-path")
    (diag,) = [d for d in classify_diagnostics(case["output"], case["exit_code"]) if d.severity == "error"]
    assert diag.related and all(r.line != diag.line for r in diag.related)


def test_scripted_mock_lookup_and_miss():
    mock = ScriptedMock()
    mock.add("method A() {}\n")
    assert run_verifier("method A() {}\n", mock).verified
    with pytest.raises(UnknownProgramError):
        run_verifier("method B() {}\n", mock)
    with pytest.raises(ValueError):
        run_verifier("   \n", mock)


def test_scripted_mock_timeout_uses_recorded_wall_time():
    mock = ScriptedMock()
    mock.add("method A() {}\n", wall_time_seconds=30.0)
    report = mock.run("method A() {}\n", 20)
    assert report.status is VerifierStatus.TIMEOUT
    assert report.wall_time_seconds == 20.0
    assert mock.run("method A() {}\n", 40).verified


def test_scripted_mock_round_trip(tmp_path):
    mock = ScriptedMock()
    mock.add("method A() {}\n", "x.dfy(1,1): Error: assertion might not hold\n", 4, 1.5)
    path = tmp_path / "table.json"
    path.write_text(mock.to_json())
    again = ScriptedMock.from_file(path)
    assert again.to_json() == mock.to_json()
    assert again.run("method A() {}\n", 20).diagnostics[0].kind is DiagnosticKind.ASSERTION_FAILURE


def test_digest_is_exact_text():
    assert program_digest("a") != program_digest("a\n")


def test_missing_dafny_is_an_environment_error(monkeypatch):
    monkeypatch.setenv("PF_DAFNY_PATH", "/nonexistent/dafny")
    backend = DafnySubprocess.from_env()
    with pytest.raises(VerifierEnvironmentError):
        backend.run("method A() {}\n", 5)


def _fake_dafny(tmp_path, body: str):
    script = tmp_path / "dafny"
    script.write_text(f"#!{sys.executable}\n" + textwrap.dedent(body))
    script.chmod(script.stat().st_mode | stat.S_IEXEC)
    return str(script)


def test_subprocess_backend_with_stand_in_executable(tmp_path):
    exe = _fake_dafny(tmp_path, """\
        import sys
        if "--help" in sys.argv:
            print("--allow-warnings --verification-time-limit")
            sys.exit(0)
        path = sys.argv[2]
        print(f"{path}(2,9): Error: assertion might not hold")
        print("Dafny program verifier finished with 0 verified, 1 error")
        sys.exit(4)
    """)
    backend = DafnySubprocess(executable=exe)
    report = backend.run("method A() {\n  assert false;\n}\n", 10)
    assert report.status is VerifierStatus.FAILED
    assert report.errors[0].line == 2 and report.errors[0].file == "program.dfy"
    assert "--allow-warnings" in report.command and "--json-diagnostics" not in report.command
    assert report.command[report.command.index("--verification-time-limit") + 1] == "10"


@pytest.mark.skipif(os.name != "posix", reason="process groups")
def test_subprocess_backend_kills_at_deadline(tmp_path):
    exe = _fake_dafny(tmp_path, """\
        import sys, time
        if "--help" in sys.argv:
            sys.exit(0)
        time.sleep(30)
    """)
    report = DafnySubprocess(executable=exe).run("method A() {}\n", 1)
    assert report.status is VerifierStatus.TIMEOUT
    assert report.wall_time_seconds < 10


def test_declare_bodiless_is_idempotent():
    sig = MethodSignature("L", (("x", "int"),), (), (), ("x == x",))
    once = declare_bodiless("method M() {}\n", [sig])
    assert "lemma L(x: int)" in once
    assert declare_bodiless(once, [sig]) == once


def test_declare_bodiless_conflicts():
    sig = MethodSignature("L", (("x", "int"),), (), (), ("x == x",))
    with pytest.raises(DeclarationConflictError):
        declare_bodiless("lemma L(x: int) ensures x == x {}\n", [sig])
    with pytest.raises(DeclarationConflictError):
        declare_bodiless("lemma L(y: nat)\n", [sig])
