"""Command line front end.

    opspay run <script> [--seed N] [--trace PATH]   run a scenario script
    opspay audit <trace>                            re-check a recorded trace
    opspay demo                                     run the built-in honest day
    opspay attack <strategy|all> [--seed N]         run double-spend strategies

Exit codes: 0 clean, 1 violations found, 2 usage or parse errors. The
OPS_SEED environment variable overrides a script's seed line; --seed
overrides both.
"""
from __future__ import annotations

import argparse
import os
import sys
from typing import List, Optional

from ..errors import OpsError
from .attacks import STRATEGIES, AttackFailed, double_spend_suite, run_strategy
from .engine import SERVER_NAME, Auditor, Engine
from .scenario import DEMO_SCRIPT, ScenarioError, parse_scenario
from .trace import TraceEvent, dump_trace, load_trace


def _resolve_seed(cli_seed: Optional[int], script_seed: Optional[int]) -> int:
    if cli_seed is not None:
        return cli_seed
    env = os.environ.get("OPS_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise OpsError("bad scenario", f"OPS_SEED={env!r} is not an integer")
    if script_seed is not None:
        return script_seed
    return 0


def _print_outcome(eng: Engine, out) -> None:
    for ev in eng.events:
        if ev.kind == "final_online":
            print(f"online  {ev.actor}: {ev.amount}", file=out)
        elif ev.kind == "final_offline":
            note = f"  ({ev.note})" if ev.note else ""
            print(f"offline {ev.actor}: {ev.amount}{note}", file=out)
        elif ev.kind == "final_minted":
            print(f"minted: {ev.amount}  still in flight: {ev.aux}", file=out)
    for warning in eng.warnings:
        print(f"warning: {warning}", file=out)
    for violation in eng.violations:
        print(f"VIOLATION: {violation}", file=out)


def _cmd_run(args, out) -> int:
    try:
        text = open(args.script, "r", encoding="utf-8").read()
    except OSError as err:
        print(f"cannot read script: {err}", file=sys.stderr)
        return 2
    scenario = parse_scenario(text)
    eng = Engine(_resolve_seed(args.seed, scenario.seed))
    eng.run_scenario(scenario)
    if args.trace:
        with open(args.trace, "w", encoding="utf-8") as fh:
            fh.write(dump_trace(eng.events))
        print(f"trace: {args.trace} ({len(eng.events)} events)", file=out)
    _print_outcome(eng, out)
    return 1 if eng.violations else 0


def _cmd_demo(args, out) -> int:
    scenario = parse_scenario(DEMO_SCRIPT)
    eng = Engine(_resolve_seed(args.seed, scenario.seed))
    eng.run_scenario(scenario)
    for step in scenario.steps:
        print(f"  {step.text}", file=out)
    _print_outcome(eng, out)
    return 1 if eng.violations else 0


def _audit_events(events: List[TraceEvent]) -> tuple[List[str], List[str]]:
    """Independent refold of a trace: conservation at every step boundary,
    no server contact inside pay steps, finals matching the fold."""
    auditor = Auditor()
    problems: List[str] = []
    notes: List[str] = []
    in_pay_step = False
    step_no = 0

    def close_step() -> None:
        if step_no == 0:
            return
        failure = auditor.check_conservation()
        if failure is not None:
            problems.append(f"step {step_no}: conservation broken: {failure}")

    for ev in events:
        if ev.kind == "step":
            close_step()
            step_no = ev.aux
            in_pay_step = ev.note.startswith("pay ")
        elif ev.kind == "deliver" and in_pay_step and SERVER_NAME in (ev.actor, ev.peer):
            problems.append(f"step {step_no}: frame touched the server during a payment")
        elif ev.kind == "violation":
            problems.append(f"recorded at step {ev.step}: {ev.note}")
        elif ev.kind == "warning":
            notes.append(ev.note)
        elif ev.kind == "final_online":
            fold = auditor.online.get(ev.actor, 0)
            if fold != ev.amount:
                problems.append(f"final online of {ev.actor}: trace says {ev.amount}, fold says {fold}")
        elif ev.kind == "final_offline":
            fold = auditor.offline.get(ev.actor, 0)
            if fold != ev.amount:
                problems.append(f"final offline of {ev.actor}: trace says {ev.amount}, fold says {fold}")
        elif ev.kind == "final_minted":
            if auditor.minted != ev.amount:
                problems.append(f"final minted: trace says {ev.amount}, fold says {auditor.minted}")
        else:
            failure = auditor.consume(ev)
            if failure is not None:
                problems.append(f"step {step_no}: {failure}")
    close_step()
    return problems, notes


def _cmd_audit(args, out) -> int:
    try:
        text = open(args.trace, "r", encoding="utf-8").read()
    except OSError as err:
        print(f"cannot read trace: {err}", file=sys.stderr)
        return 2
    events = load_trace(text)
    problems, notes = _audit_events(events)
    steps = sum(1 for ev in events if ev.kind == "step")
    print(f"{len(events)} events over {steps} steps", file=out)
    for note in notes:
        print(f"warning: {note}", file=out)
    for problem in problems:
        print(f"VIOLATION: {problem}", file=out)
    if not problems:
        print("audit clean: conservation held at every step", file=out)
    return 1 if problems else 0


def _cmd_attack(args, out) -> int:
    seed = args.seed if args.seed is not None else int(os.environ.get("OPS_SEED", "0"))
    if args.strategy == "all":
        report = double_spend_suite(seed)
        for line in report.checks:
            print(line, file=out)
        for violation in report.violations:
            print(f"VIOLATION: {violation}", file=out)
        return 0 if report.ok else 1
    if args.strategy not in STRATEGIES:
        known = ", ".join([*STRATEGIES, "all"])
        print(f"unknown strategy {args.strategy!r} (known: {known})", file=sys.stderr)
        return 2
    try:
        _eng, report = run_strategy(args.strategy, seed)
    except AttackFailed as err:
        print(f"VIOLATION: {err}", file=out)
        return 1
    for line in report.checks:
        print(line, file=out)
    for violation in report.violations:
        print(f"VIOLATION: {violation}", file=out)
    return 0 if report.ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="opspay", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a scenario script")
    p_run.add_argument("script")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--trace", default=None, help="write the event trace here")
    p_run.set_defaults(fn=_cmd_run)

    p_audit = sub.add_parser("audit", help="re-check a recorded trace")
    p_audit.add_argument("trace")
    p_audit.set_defaults(fn=_cmd_audit)

    p_demo = sub.add_parser("demo", help="run the built-in honest scenario")
    p_demo.add_argument("--seed", type=int, default=None)
    p_demo.set_defaults(fn=_cmd_demo)

    p_attack = sub.add_parser("attack", help="run a double-spend strategy")
    p_attack.add_argument("strategy")
    p_attack.add_argument("--seed", type=int, default=None)
    p_attack.set_defaults(fn=_cmd_attack)

    return parser


def main(argv: Optional[List[str]] = None, out=None) -> int:
    out = out if out is not None else sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.fn(args, out)
    except ScenarioError as err:
        print(f"scenario error: {err}", file=sys.stderr)
        return 2
    except OpsError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
