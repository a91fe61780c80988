"""Scenario script parsing.

A scenario is a line-oriented text script: one step per line, '#' starts a
comment, blank lines are ignored. Actor names are plain identifiers; the
name S is reserved for the server.

    seed 7
    actor A tee
    actor C plain
    register A
    setup_ta A
    mint A 100
    deposit A 40
    withdraw A 15
    pay A C 25
    claim C
    collect A
    go_offline A
    go_online A
    drop next DepositConfirmed
    tamper next PaymentTransfer byte 12 xor 255
    replay last PaymentTransfer
    reorder 3
    rollback_ta_store A
    crash A pay:persisted
    retry A
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import List, Optional

from ..errors import OpsError
from ..model import BODY_TYPES

NAME_RE = re.compile(r"^[A-Za-z][A-Za-z0-9_-]*$")

WIRE_KIND_NAMES = {t.__name__: k for k, t in BODY_TYPES.items()}

CRASH_POINTS = (
    "deposit:persisted",
    "withdraw:persisted",
    "pay:persisted",
    "withdraw:before-send",
)


class ScenarioError(OpsError):
    """Unparseable or inconsistent scenario script."""

    def __init__(self, detail: str, line: int = 0):
        super().__init__("bad scenario", f"line {line}: {detail}" if line else detail)
        self.line = line


@dataclass(frozen=True)
class Step:
    op: str
    args: tuple
    line: int
    text: str


@dataclass
class Scenario:
    seed: Optional[int] = None
    steps: List[Step] = field(default_factory=list)


def _actor_name(tok: str, line: int) -> str:
    if tok == "S":
        raise ScenarioError("the name S is reserved for the server", line)
    if not NAME_RE.match(tok):
        raise ScenarioError(f"bad actor name {tok!r}", line)
    return tok


def _amount(tok: str, line: int) -> int:
    if not tok.isdigit() or int(tok) < 1:
        raise ScenarioError(f"amount must be a positive integer, got {tok!r}", line)
    return int(tok)


def _wire_kind(tok: str, line: int):
    kind = WIRE_KIND_NAMES.get(tok)
    if kind is None:
        known = ", ".join(sorted(WIRE_KIND_NAMES))
        raise ScenarioError(f"unknown message kind {tok!r} (known: {known})", line)
    return kind


def parse_scenario(text: str) -> Scenario:
    scenario = Scenario()
    declared: set[str] = set()
    tee_actors: set[str] = set()

    def known(tok: str, line: int) -> str:
        name = _actor_name(tok, line)
        if name not in declared:
            raise ScenarioError(f"actor {name!r} used before declaration", line)
        return name

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        toks = line.split()
        op, rest = toks[0], toks[1:]

        if op == "seed":
            if scenario.steps or scenario.seed is not None:
                raise ScenarioError("seed must appear once, before any step", lineno)
            if len(rest) != 1 or not rest[0].isdigit():
                raise ScenarioError("usage: seed <non-negative integer>", lineno)
            scenario.seed = int(rest[0])
            continue

        if op == "actor":
            if not rest:
                raise ScenarioError("usage: actor <name> [tee|plain] [model=<id>]", lineno)
            name = _actor_name(rest[0], lineno)
            if name in declared:
                raise ScenarioError(f"actor {name!r} declared twice", lineno)
            tee = False
            model = "simdev-9"
            for tok in rest[1:]:
                if tok == "tee":
                    tee = True
                elif tok == "plain":
                    tee = False
                elif tok.startswith("model="):
                    model = tok[len("model=") :]
                    if not model:
                        raise ScenarioError("empty model id", lineno)
                else:
                    raise ScenarioError(f"unknown actor attribute {tok!r}", lineno)
            declared.add(name)
            if tee:
                tee_actors.add(name)
            scenario.steps.append(Step("actor", (name, tee, model), lineno, line))
            continue

        if op in ("register", "claim", "collect", "go_offline", "go_online", "retry"):
            if len(rest) != 1:
                raise ScenarioError(f"usage: {op} <actor>", lineno)
            scenario.steps.append(Step(op, (known(rest[0], lineno),), lineno, line))
            continue

        if op in ("setup_ta", "rollback_ta_store"):
            if len(rest) != 1:
                raise ScenarioError(f"usage: {op} <actor>", lineno)
            name = known(rest[0], lineno)
            if name not in tee_actors:
                raise ScenarioError(f"{op} requires a tee actor, {name!r} is plain", lineno)
            scenario.steps.append(Step(op, (name,), lineno, line))
            continue

        if op in ("mint", "deposit", "withdraw"):
            if len(rest) != 2:
                raise ScenarioError(f"usage: {op} <actor> <amount>", lineno)
            scenario.steps.append(
                Step(op, (known(rest[0], lineno), _amount(rest[1], lineno)), lineno, line)
            )
            continue

        if op == "pay":
            if len(rest) != 3:
                raise ScenarioError("usage: pay <payer> <receiver> <amount>", lineno)
            payer = known(rest[0], lineno)
            receiver = known(rest[1], lineno)
            if payer == receiver:
                raise ScenarioError("payer and receiver must differ", lineno)
            scenario.steps.append(
                Step("pay", (payer, receiver, _amount(rest[2], lineno)), lineno, line)
            )
            continue

        if op == "drop":
            if len(rest) != 2 or rest[0] != "next":
                raise ScenarioError("usage: drop next <MessageKind>", lineno)
            scenario.steps.append(Step("drop", (_wire_kind(rest[1], lineno),), lineno, line))
            continue

        if op == "tamper":
            # tamper next <Kind> byte <i> xor <v>
            if (
                len(rest) != 6
                or rest[0] != "next"
                or rest[2] != "byte"
                or rest[4] != "xor"
                or not rest[3].isdigit()
                or not rest[5].isdigit()
            ):
                raise ScenarioError("usage: tamper next <MessageKind> byte <i> xor <v>", lineno)
            kind = _wire_kind(rest[1], lineno)
            offset, mask = int(rest[3]), int(rest[5])
            if not 1 <= mask <= 255:
                raise ScenarioError("xor mask must be in 1..255", lineno)
            scenario.steps.append(Step("tamper", (kind, offset, mask), lineno, line))
            continue

        if op == "replay":
            if len(rest) != 2 or rest[0] != "last":
                raise ScenarioError("usage: replay last <MessageKind>", lineno)
            scenario.steps.append(Step("replay", (_wire_kind(rest[1], lineno),), lineno, line))
            continue

        if op == "reorder":
            if len(rest) != 1 or not rest[0].isdigit() or int(rest[0]) < 2:
                raise ScenarioError("usage: reorder <window of at least 2>", lineno)
            scenario.steps.append(Step("reorder", (int(rest[0]),), lineno, line))
            continue

        if op == "crash":
            if len(rest) != 2:
                raise ScenarioError("usage: crash <actor> <point>", lineno)
            name = known(rest[0], lineno)
            if rest[1] not in CRASH_POINTS:
                raise ScenarioError(
                    f"unknown crash point {rest[1]!r} (known: {', '.join(CRASH_POINTS)})", lineno
                )
            scenario.steps.append(Step("crash", (name, rest[1]), lineno, line))
            continue

        raise ScenarioError(f"unknown step {op!r}", lineno)

    return scenario


DEMO_SCRIPT = """\
# a day at desk scale: fund the offline purse, pay in person, settle up
seed 7
actor A tee
actor B tee
register A
register B
setup_ta A
setup_ta B
mint A 100
deposit A 40
pay A B 25
withdraw B 25
withdraw A 15
"""


def random_scenario(rng, n_actors: int = 3, n_steps: int = 20) -> Scenario:
    """Generate a plausible random script: provisioned actors, then a mix of
    funding, spending, settling, and adversary interference. Always parses."""
    names = [chr(ord("A") + i) for i in range(n_actors)]
    lines = []
    for i, name in enumerate(names):
        tee = i < 2 or rng.random() < 0.5  # at least two tee actors to pay from
        lines.append(f"actor {name} {'tee' if tee else 'plain'}")
    tee_names = [l.split()[1] for l in lines if l.endswith("tee")]
    for name in names:
        lines.append(f"register {name}")
    for name in tee_names:
        lines.append(f"setup_ta {name}")
    for name in names:
        lines.append(f"mint {name} {rng.randint(40, 120)}")

    kinds = ["DepositConfirmed", "PaymentTransfer", "PayConfirmed", "PayReq", "WithdrawReq"]
    for _ in range(n_steps):
        roll = rng.random()
        actor = rng.choice(names)
        tee = rng.choice(tee_names)
        if roll < 0.20:
            lines.append(f"deposit {tee} {rng.randint(1, 30)}")
        elif roll < 0.32:
            lines.append(f"withdraw {tee} {rng.randint(1, 30)}")
        elif roll < 0.60:
            receiver = rng.choice([n for n in names if n != tee])
            lines.append(f"pay {tee} {receiver} {rng.randint(1, 15)}")
        elif roll < 0.72:
            lines.append(f"claim {actor}")
        elif roll < 0.76:
            lines.append(f"collect {tee}")
        elif roll < 0.82:
            lines.append(f"drop next {rng.choice(kinds)}")
        elif roll < 0.87:
            lines.append(f"tamper next {rng.choice(kinds)} byte {rng.randint(0, 40)} xor {rng.randint(1, 255)}")
        elif roll < 0.91:
            lines.append(f"replay last {rng.choice(kinds)}")
        elif roll < 0.94:
            lines.append(f"reorder {rng.randint(2, 4)}")
        elif roll < 0.97:
            lines.append(f"go_offline {actor}")
            lines.append(f"deposit {tee} {rng.randint(1, 10)}")
            lines.append(f"go_online {actor}")
            lines.append(f"retry {tee}")
        else:
            lines.append(f"crash {tee} {rng.choice(CRASH_POINTS)}")
    return parse_scenario("\n".join(lines) + "\n")
