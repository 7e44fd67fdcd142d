from __future__ import annotations

from pathlib import Path

import pytest

from proofforge.llm import LlmGateway
from proofforge.verifier import ScriptedMock
from tests.fixtures.maxsub.oracle import maxsub_oracle
from tests.fixtures.maxsub.script import responder

FIXTURES = Path(__file__).parent / "fixtures"
MAXSUB = FIXTURES / "maxsub"


@pytest.fixture
def maxsub_program() -> str:
    return (MAXSUB / "maxsub.dfy").read_text()


@pytest.fixture
def maxsub_annotated() -> str:
    return (MAXSUB / "maxsub_annotated.dfy").read_text()


@pytest.fixture
def maxsub_llm() -> LlmGateway:
    return LlmGateway.scripted_with(responder)


@pytest.fixture
def maxsub_verifier() -> ScriptedMock:
    return ScriptedMock(oracle=maxsub_oracle)


def pytest_terminal_summary(terminalreporter):
    from tests import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(line)
