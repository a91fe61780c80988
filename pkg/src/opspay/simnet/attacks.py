"""Double-spend strategy catalogue.

Each strategy drives a small Engine world through an honest prelude, then
tries to extract the same value twice: replaying frames, resubmitting
settlement requests under fresh nonces, forwarding payment objects to the
wrong party, or rolling the secure store back to a richer snapshot. A
strategy counts as prevented only when every duplicate path was refused AND
the attacker's balances show zero net gain against the honest outcome.

double_spend_suite runs the whole catalogue and folds the results into one
AuditReport; any gain or conservation break lands in its violations.
"""
from __future__ import annotations

from typing import Callable, Dict, List, Tuple

from .. import codec, crypto
from ..errors import OpsError, StoreError
from ..model import AuthEnvelope, ClaimReq, MsgKind, WireMessage, WithdrawReq
from ..wallet import Wallet
from .engine import SERVER_NAME, AuditReport, Engine, SimActor

class AttackFailed(AssertionError):
    """The protocol let a duplicate through; raised so suites fail loudly."""

def forge_frame(wallet: Wallet, kind: MsgKind, body) -> bytes:
    """Sign a request exactly like the wallet would, but outside its pending
    discipline: the attacker controls the device and can mint fresh nonces."""
    nonce = wallet.state.next_nonce
    wallet.state.next_nonce += 1
    sig = crypto.sign(codec.signed_request(kind, body, nonce), wallet.state.keys.sk)
    return codec.encode(WireMessage(kind, body, AuthEnvelope(wallet.vk, nonce, sig)))

def _bootstrap(seed: int, b_tee: bool) -> Engine:
    """A funded payer A (tee), a receiver B, and a bystander C (plain)."""
    eng = Engine(seed)
    eng.run_step_list(
        [
            ("actor", ("A", True, "simdev-9")),
            ("actor", ("B", b_tee, "simdev-9")),
            ("actor", ("C", False, "simdev-9")),
            ("register", ("A",)),
            ("register", ("B",)),
            ("register", ("C",)),
            ("setup_ta", ("A",)),
        ]
        + ([("setup_ta", ("B",))] if b_tee else [])
        + [
            ("mint", ("A", 9)),
            ("deposit", ("A", 6)),
        ]
    )
    return eng

def _online(eng: Engine, name: str) -> int:
    return eng.server.state.online_balances.get(eng.actors[name].wallet.vk, 0)

def _offline(eng: Engine, name: str) -> int:
    ta = eng.actors[name].ta
    assert ta is not None
    return ta.get_balance().balance

def _last_abort(eng: Engine, kinds: Tuple[str, ...] = ("server_abort", "wallet_abort", "ta_abort", "store_abort")) -> str:
    for ev in reversed(eng.events):
        if ev.kind in kinds:
            return ev.note
    return ""

def _expect(condition: bool, what: str) -> None:
    if not condition:
        raise AttackFailed(what)

# --- the eight strategies ---

def claim_claim(seed: int) -> Tuple[Engine, str]:
    """Claim the same payment twice: once honestly, once on a fresh nonce."""
    eng = _bootstrap(seed, b_tee=False)
    eng.run_step_list([("pay", ("A", "B", 3)), ("claim", ("B",))])
    b = eng.actors["B"]
    _expect(_online(eng, "B") == 3, "honest claim should credit B once")
    payment = b.wallet.state.claimed[0]
    eng.inject("B", SERVER_NAME, forge_frame(b.wallet, MsgKind.CLAIM_REQ, ClaimReq(payment)))
    abort = _last_abort(eng)
    _expect(abort == "already claimed", f"second claim aborted with {abort!r}")
    _expect(_online(eng, "B") == 3, "second claim must not credit again")
    return eng, "second claim refused: already claimed"

def collect_collect(seed: int) -> Tuple[Engine, str]:
    """Collect the same payment into the receiving enclave twice."""
    eng = _bootstrap(seed, b_tee=True)
    eng.run_step_list([("pay", ("A", "B", 3))])
    _expect(_offline(eng, "B") == 3, "honest transfer should collect once")
    eng.replay(MsgKind.PAYMENT_TRANSFER)  # full frame replay at the wallet
    _expect(_offline(eng, "B") == 3, "replayed transfer must not collect again")
    b = eng.actors["B"]
    try:
        b.ta.collect(b.accepted[-1])  # straight at the enclave
        raise AttackFailed("direct second collect was accepted")
    except OpsError as err:
        _expect(err.code == "already collected", f"direct collect aborted with {err.code!r}")
    _expect(_offline(eng, "B") == 3, "enclave balance moved on a refused collect")
    return eng, "replay and direct re-collect both refused: already collected"

def claim_collect(seed: int) -> Tuple[Engine, str]:
    """Collect a payment offline, then try to claim the same one online."""
    eng = _bootstrap(seed, b_tee=True)
    eng.run_step_list([("pay", ("A", "B", 3))])
    _expect(_offline(eng, "B") == 3, "honest transfer should collect once")
    b = eng.actors["B"]
    payment = b.accepted[-1]
    eng.inject("B", SERVER_NAME, forge_frame(b.wallet, MsgKind.CLAIM_REQ, ClaimReq(payment)))
    abort = _last_abort(eng)
    _expect(abort == "must be collected, not claimed", f"claim of enclave payment aborted with {abort!r}")
    _expect(_online(eng, "B") == 0, "claim of a collected payment must not credit")
    _expect(_offline(eng, "B") == 3, "offline value must be untouched")
    return eng, "claim of an enclave-addressed payment refused: must be collected"

def replay_deposit(seed: int) -> Tuple[Engine, str]:
    """Replay a deposit confirmation at the enclave and the request at the
    server; neither side may move value twice."""
    eng = _bootstrap(seed, b_tee=False)  # bootstrap already deposited 6 to A
    online0, offline0 = _online(eng, "A"), _offline(eng, "A")
    eng.replay(MsgKind.DEPOSIT_CONFIRMED)  # confirmation replay at the enclave
    _expect(_offline(eng, "A") == offline0, "replayed confirmation must not credit the enclave")
    eng.replay(MsgKind.DEPOSIT_REQ)  # request replay at the server: cached response
    _expect(_online(eng, "A") == online0, "replayed request must not debit the account")
    _expect(_offline(eng, "A") == offline0, "cached confirmation must stay a no-op")
    return eng, "confirmation and request replays were both no-ops"

def replay_withdraw(seed: int) -> Tuple[Engine, str]:
    """Replay a withdraw request verbatim, then re-sign its body fresh."""
    eng = _bootstrap(seed, b_tee=False)
    eng.run_step_list([("withdraw", ("A", 2))])
    a = eng.actors["A"]
    online0, offline0 = _online(eng, "A"), _offline(eng, "A")
    eng.replay(MsgKind.WITHDRAW_REQ)  # verbatim: answered from the response cache
    _expect(_online(eng, "A") == online0, "verbatim replay must not credit again")
    wd = eng.frame_log[MsgKind.WITHDRAW_REQ]
    body = codec.decode(wd[2], WireMessage).body
    fresh = forge_frame(a.wallet, MsgKind.WITHDRAW_REQ, WithdrawReq(body.amount, body.counter, body.sig))
    eng.inject("A", SERVER_NAME, fresh)  # same confirmation, fresh envelope
    abort = _last_abort(eng)
    _expect(abort == "counter out of sync", f"re-signed replay aborted with {abort!r}")
    _expect(_online(eng, "A") == online0, "re-signed replay must not credit again")
    _expect(_offline(eng, "A") == offline0, "enclave must be untouched by replays")
    return eng, "verbatim replay cached, re-signed replay refused: counter out of sync"

def replay_payment(seed: int) -> Tuple[Engine, str]:
    """Deliver one payment object to its receiver again, idle and mid-request."""
    eng = _bootstrap(seed, b_tee=True)
    eng.run_step_list([("pay", ("A", "B", 2))])
    _expect(_offline(eng, "B") == 2, "honest transfer should collect once")
    eng.replay(MsgKind.PAYMENT_TRANSFER)  # receiver idle
    _expect(_offline(eng, "B") == 2, "idle replay must not credit again")
    b = eng.actors["B"]
    b.wallet.request_payment(2)  # receiver now expects a fresh payment
    eng.replay(MsgKind.PAYMENT_TRANSFER)
    abort = _last_abort(eng)
    _expect(abort == "already received", f"mid-request replay aborted with {abort!r}")
    _expect(_offline(eng, "B") == 2, "mid-request replay must not credit again")
    b.wallet.expected_payment = None  # drop the dangling request
    return eng, "replays while idle and mid-request both refused"

def forward_payment(seed: int) -> Tuple[Engine, str]:
    """Hand a payment addressed to B over to C, at C's wallet and at the server."""
    eng = _bootstrap(seed, b_tee=False)
    eng.run_step_list([("pay", ("A", "B", 2))])
    transfer = eng.frame_log[MsgKind.PAYMENT_TRANSFER]
    c = eng.actors["C"]
    c.wallet.request_payment(2)  # C is even expecting this exact amount
    eng.inject("B", "C", transfer[2])
    abort = _last_abort(eng)
    _expect(abort == "not addressed to me", f"forwarded transfer aborted with {abort!r}")
    payment = codec.decode(transfer[2], WireMessage).body.payment
    c.wallet.expected_payment = None
    eng.inject("C", SERVER_NAME, forge_frame(c.wallet, MsgKind.CLAIM_REQ, ClaimReq(payment)))
    _expect(_online(eng, "C") == 0, "submitting another's payment must not credit the courier")
    _expect(_online(eng, "B") == 2, "the named receiver owns the claim regardless of courier")
    return eng, "forwarded transfer refused; server credit goes to the named receiver only"

def rollback(seed: int) -> Tuple[Engine, str]:
    """Spend, restore the richer store snapshot, spend again."""
    eng = _bootstrap(seed, b_tee=True)
    eng.run_step_list([("pay", ("A", "B", 3))])
    _expect(_offline(eng, "B") == 3, "honest transfer should collect once")
    eng.run_step_list([("rollback_ta_store", ("A",)), ("pay", ("A", "B", 3))])
    abort = _last_abort(eng)
    _expect(abort == "rollback detected", f"post-rollback spend aborted with {abort!r}")
    _expect(_offline(eng, "B") == 3, "no second payment may exist after rollback")
    a = eng.actors["A"]
    try:
        a.ta.get_balance()
        raise AttackFailed("rolled-back store still readable")
    except StoreError as err:
        _expect(err.code == "rollback detected", f"store read failed with {err.code!r}")
    return eng, "stale snapshot detected before any value moved"

STRATEGIES: Dict[str, Callable[[int], Tuple[Engine, str]]] = {
    "claim-claim": claim_claim,
    "collect-collect": collect_collect,
    "claim-collect": claim_collect,
    "replay-deposit": replay_deposit,
    "replay-withdraw": replay_withdraw,
    "replay-payment": replay_payment,
    "forward-payment": forward_payment,
    "rollback": rollback,
}

def run_strategy(name: str, seed: int = 0) -> Tuple[Engine, AuditReport]:
    """One strategy end to end; its engine's report gains a check line."""
    eng, detail = STRATEGIES[name](seed)
    eng.finish()
    report = eng.report()
    report.checks.append(f"{name}: prevented ({detail})")
    return eng, report

def double_spend_suite(seed: int = 0) -> AuditReport:
    """Run the whole catalogue on worlds derived from one seed and fold the
    outcomes. Any let-through, net gain, or conservation break is a violation."""
    violations: List[str] = []
    warnings: List[str] = []
    checks: List[str] = []
    minted = online = offline = inflight = 0
    for i, name in enumerate(STRATEGIES):
        try:
            _eng, report = run_strategy(name, seed * len(STRATEGIES) + i)
        except AttackFailed as err:
            violations.append(f"{name}: {err}")
            checks.append(f"{name}: NOT PREVENTED")
            continue
        violations.extend(f"{name}: {v}" for v in report.violations)
        warnings.extend(f"{name}: {w}" for w in report.warnings)
        checks.extend(report.checks)
        minted += report.minted
        online += report.online
        offline += report.offline
        inflight += report.inflight
    return AuditReport(minted, online, offline, inflight, violations, warnings, checks)
