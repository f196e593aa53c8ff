"""Command-line front end.

Exit codes: 0 success, 1 a check or expectation failed, 2 usage error,
3 unreadable or malformed input file.
"""
from __future__ import annotations

import argparse
import sys
from importlib import resources
from pathlib import Path
from typing import Optional

from . import lotr, verifier
from .costs import EVENTS, CostModel
from .scenario import (
    ScenarioError,
    ScenarioSyntaxError,
    compare_mechanisms,
    parse_scenario,
    run_scenario,
)

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_FILE = 0, 1, 2, 3
DATA = resources.files("lotrsim") / "data"


class InputFileError(Exception):
    pass


def _read(path: str, packaged: str) -> tuple[str, str]:
    """Read ``path``; a bare name that is not on disk falls back to the shipped copy."""
    p = Path(path)
    if not p.exists() and p.name == path:
        shipped = DATA / packaged / path
        if shipped.is_file():
            return shipped.read_text(encoding="utf-8"), path
    try:
        return p.read_text(encoding="utf-8"), p.name
    except (OSError, UnicodeDecodeError) as exc:
        raise InputFileError(f"cannot read {path}: {exc}") from None


def _parse(path: str, packaged: str):
    text, name = _read(path, packaged)
    try:
        return parse_scenario(text, name)
    except ScenarioSyntaxError as exc:
        raise InputFileError(f"{name}: {exc}") from None


def load_config(path: str):
    """Canonical setup with the config file's directives applied on top."""
    report = run_scenario(_parse(path, "configs"))
    if not report.passed:
        raise InputFileError(f"{path}: config did not apply cleanly\n{report.text()}")
    return report.state, report.handle


def cmd_verify(args) -> int:
    if args.config:
        state, handle = load_config(args.config)
    else:
        state, handle = lotr.canonical_setup()
    verdicts = verifier.verify_all(state, handle)
    for v in verdicts:
        print(v.line())
        for w in v.warnings:
            print(f"  warning: {w}")
    holds = all(v.holds for v in verdicts)
    detected = True
    if holds:
        for result in verifier.run_mutation_suite(state, handle):
            print(result.line())
            detected &= result.detected
    else:
        print("mutation suite skipped: the configuration already fails")
    return EXIT_OK if holds and detected else EXIT_FAIL


def cmd_run(args) -> int:
    report = run_scenario(_parse(args.file, "scenarios"))
    sys.stdout.write(report.text())
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_dump_ldt(args) -> int:
    state, _ = lotr.canonical_setup()
    sys.stdout.write(lotr.dump_ldt(state))
    return EXIT_OK


def _weight(text: str) -> tuple[str, float]:
    name, sep, value = text.partition("=")
    if not sep or name not in EVENTS:
        raise argparse.ArgumentTypeError(f"expected NAME=VALUE with NAME in {', '.join(EVENTS)}")
    try:
        number = float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"weight {name} is not a number: {value!r}") from None
    if number <= 0:
        raise argparse.ArgumentTypeError(f"weight {name} must be positive")
    return name, number


def cmd_bench(args) -> int:
    workload = _parse(args.workload, "workloads")
    model = CostModel().with_overrides(dict(args.weight))
    try:
        table = compare_mechanisms(workload, model)
    except ScenarioError as exc:
        raise InputFileError(str(exc)) from None
    sys.stdout.write(table.render())
    return EXIT_OK if table.ordered() else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lotrsim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="check the memory and control-transfer requirements")
    p.add_argument("--config", help="directive file applied on top of the canonical layout")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("run", help="execute a scenario file")
    p.add_argument("file")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("dump-ldt", help="print the canonical LDT")
    p.set_defaults(func=cmd_dump_ldt)

    p = sub.add_parser("bench", help="step-count comparison of three protection mechanisms")
    p.add_argument("--workload", default="check_password.scn")
    p.add_argument("--weight", action="append", type=_weight, default=[], metavar="NAME=VALUE")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except InputFileError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FILE


if __name__ == "__main__":
    sys.exit(main())
