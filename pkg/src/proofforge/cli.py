"""Command-line entry point.

Exit codes: 0 verified / done, 1 failed or exhausted, 2 usage or configuration
error, 3 environment error (verifier or model unreachable).
"""

from __future__ import annotations

import json
import sys
from pathlib import Path
from typing import Any

import click

from . import refactor
from .bench import build_llm, build_verifier, clock_factory_for, load_config, report_json, run_bench
from .engine import run_task
from .llm import CassetteMissError, ProviderError
from .model import ConfigError, DecompositionPlan, ProofForgeError, VerificationTask
from .verifier import UnknownProgramError, VerifierEnvironmentError

EXIT_OK, EXIT_FAILED, EXIT_USAGE, EXIT_ENV = 0, 1, 2, 3

# a replay that asks for something never recorded means the recorded backend cannot answer
ENVIRONMENT_ERRORS = (VerifierEnvironmentError, ProviderError, CassetteMissError, UnknownProgramError)

STRATEGIES = click.Choice(["full-sharing", "decoupled", "fully-decoupled"])
MODES = click.Choice(["live", "record", "replay"])


class Abort(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _guard(fn):
    """Map library exceptions onto exit codes exactly once."""

    def wrapper(*args: Any, **kwargs: Any) -> None:
        try:
            code = fn(*args, **kwargs)
        except Abort as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(exc.code)
        except ConfigError as exc:
            click.echo(f"configuration error: {exc}", err=True)
            sys.exit(EXIT_USAGE)
        except ENVIRONMENT_ERRORS as exc:
            click.echo(f"environment error: {exc}", err=True)
            sys.exit(EXIT_ENV)
        except ProofForgeError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_FAILED)
        sys.exit(code or EXIT_OK)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _read(path: str) -> str:
    p = Path(path)
    if not p.is_file():
        raise Abort(EXIT_USAGE, f"input file not found: {path}")
    return p.read_text(encoding="utf-8")


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _emit(text: str, output: str | None) -> None:
    if output:
        _write(Path(output), text)
    else:
        click.echo(text, nl=False)


def _mode(mode: str | None, cassette: str | None) -> str:
    return mode or ("replay" if cassette else "live")


@click.group()
@click.version_option(package_name="artifact")
def main() -> None:
    """Verify Dafny programs with model-generated annotations and helper lemmas."""


@main.command()
@click.argument("input_file", metavar="INPUT")
@click.option("--mode", type=MODES, default=None, help="Model backend; defaults to replay when --cassette is given.")
@click.option("--cassette", type=click.Path(dir_okay=False), default=None)
@click.option("--verifier-table", type=click.Path(dir_okay=False), default=None,
              help="Recorded verifier verdicts to use instead of the Dafny executable.")
@click.option("--transcript", type=click.Path(dir_okay=False), default=None)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option("--outline", type=click.Path(dir_okay=False), default=None, help="Plain-text proof outline.")
@click.option("--strategy", type=STRATEGIES, default=None)
@click.option("--k", "k", type=int, default=None, help="Independent attempts (verify@k).")
@click.option("--global-timeout", type=int, default=None, help="Seconds per attempt.")
@click.option("--output", "-o", type=click.Path(dir_okay=False), default=None)
@_guard
def verify(input_file, mode, cassette, verifier_table, transcript, config_path, outline, strategy, k,
           global_timeout, output) -> int:
    """Run the full pipeline on INPUT and write INPUT.verified.dfy on success."""
    program = _read(input_file)
    config = load_config(config_path, strategy=strategy, verify_at_k=k, global_timeout_seconds=global_timeout)
    task = VerificationTask(Path(input_file).stem, program, _read(outline) if outline else "")
    llm = build_llm(_mode(mode, cassette), cassette, config)
    verifier = build_verifier(verifier_table, config)
    result = run_task(task, llm, verifier, config, clock_factory=clock_factory_for(verifier))
    if transcript:
        doc = {
            "task_id": task.task_id,
            "verified": result.verified,
            "attempts": [a.transcript.to_dict() for a in result.attempts],
        }
        _write(Path(transcript), json.dumps(doc, indent=2, sort_keys=True) + "\n")
    success = result.success
    if success is None:
        last = result.attempts[-1]
        click.echo(f"{task.task_id}: {last.status} after {len(result.attempts)} attempt(s)", err=True)
        return EXIT_FAILED
    out = Path(output) if output else Path(input_file).with_suffix(".verified.dfy")
    _write(out, success.program)
    if success.restoration and success.restoration.get("status") == "restoration-incomplete":
        _write(out.with_suffix(".mapping.json"), json.dumps(success.restoration, indent=2, sort_keys=True) + "\n")
    click.echo(f"{task.task_id}: verified (attempt {len(result.attempts)}, {success.lemma_count} lemma(s)) -> {out}")
    return EXIT_OK


@main.command()
@click.argument("input_file", metavar="INPUT")
@click.option("--output", "-o", type=click.Path(dir_okay=False), default=None)
@_guard
def strip(input_file, output) -> int:
    """Remove every proof annotation from INPUT."""
    _emit(refactor.strip_annotations(_read(input_file)), output)
    return EXIT_OK


@main.command()
@click.argument("input_file", metavar="INPUT")
@click.option("--strategy", type=STRATEGIES, default=None)
@click.option("--method", default=None, help="Method to split; defaults to the first with nested loops.")
@click.option("--mode", type=MODES, default=None)
@click.option("--cassette", type=click.Path(dir_okay=False), default=None)
@click.option("--verifier-table", type=click.Path(dir_okay=False), default=None)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option("--plan", "plan_path", type=click.Path(dir_okay=False), default=None,
              help="Where to save the plan for a later restore.")
@click.option("--output", "-o", type=click.Path(dir_okay=False), default=None)
@_guard
def decompose(input_file, strategy, method, mode, cassette, verifier_table, config_path, plan_path, output) -> int:
    """Split nested loops of INPUT into single-loop methods."""
    program = _read(input_file)
    config = load_config(config_path, strategy=strategy)
    llm = build_llm(_mode(mode, cassette), cassette, config)
    verifier = build_verifier(verifier_table, config)
    plan = refactor.decompose_until_consistent(program, config.strategy, llm, verifier, config=config, method=method)
    if plan_path:
        _write(Path(plan_path), json.dumps(plan.to_dict(), indent=2, sort_keys=True) + "\n")
    _emit(plan.program, output)
    return EXIT_OK


def _verified_input(path: str, original: str) -> str:
    p = Path(path)
    if p.is_dir():
        preferred = p / (Path(original).stem + ".verified.dfy")
        candidates = [preferred] if preferred.is_file() else sorted(p.glob("*.dfy"))
        if len(candidates) != 1:
            raise Abort(EXIT_USAGE, f"cannot pick a verified program in {p}")
        p = candidates[0]
    return _read(str(p))


@main.command()
@click.option("--original", required=True, type=click.Path(dir_okay=False))
@click.option("--verified", "verified_path", required=True, type=click.Path())
@click.option("--plan", "plan_path", type=click.Path(dir_okay=False), default=None)
@click.option("--mode", type=MODES, default=None)
@click.option("--cassette", type=click.Path(dir_okay=False), default=None)
@click.option("--verifier-table", type=click.Path(dir_okay=False), default=None)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option("--report", "report_path", type=click.Path(dir_okay=False), default=None)
@click.option("--output", "-o", type=click.Path(dir_okay=False), default=None)
@_guard
def restore(original, verified_path, plan_path, mode, cassette, verifier_table, config_path, report_path,
            output) -> int:
    """Merge a verified modular program back into the original method shape."""
    original_text = _read(original)
    verified_text = _verified_input(verified_path, original)
    config = load_config(config_path)
    if plan_path is None:
        # nothing was lifted: identity copy, no backend needed
        result = refactor.restore_code(original_text, verified_text, None, None, None, config=config)
    else:
        plan = DecompositionPlan.from_dict(json.loads(_read(plan_path)))
        llm = build_llm(_mode(mode, cassette), cassette, config)
        verifier = build_verifier(verifier_table, config)
        result = refactor.restore_code(original_text, verified_text, plan, llm, verifier, config=config)
    _emit(result.program, output)
    if report_path:
        _write(Path(report_path), result.report_json())
    return EXIT_OK if result.complete else EXIT_FAILED


@main.command()
@click.argument("corpus", type=click.Path())
@click.option("--k", "k", type=int, default=None)
@click.option("--report", "report_path", type=click.Path(dir_okay=False), default=None)
@click.option("--mode", type=MODES, default="replay", show_default=True)
@click.option("--verifier-table", type=click.Path(dir_okay=False), default=None)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option("--jobs", type=int, default=1, show_default=True)
@click.option("--global-timeout", type=int, default=None, help="Per-corpus override of the attempt timeout.")
@_guard
def bench(corpus, k, report_path, mode, verifier_table, config_path, jobs, global_timeout) -> int:
    """Run every task directory under CORPUS and report verify@k."""
    config = load_config(config_path, verify_at_k=k, global_timeout_seconds=global_timeout)
    report = run_bench(corpus, config, mode=mode, verifier_table=verifier_table, jobs=jobs)
    _emit(report_json(report), report_path)
    rate = report["verify_at_k"]
    click.echo(f"verify@{report['k']}: {rate['percent']} ({rate['successes']}/{rate['tasks']})", err=True)
    return EXIT_OK


if __name__ == "__main__":
    main()
