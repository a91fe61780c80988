"""In-memory protocol network with an adversarial message layer.

One Engine hosts the server and any number of wallet actors, delivers
encoded frames through a FIFO queue, and records every observable event in
a trace. An independent Auditor folds the semantic events into its own
ledger and checks value conservation exactly after every step; the engine
additionally cross-checks the fold against god-view server and enclave
state. Scenario scripts or direct method calls drive the same machinery.

The adversary owns the network: one-shot drop and tamper rules, replay of
any previously delivered frame, reordering windows, secure-store rollback,
and crash injection at the persistence points.
"""
from __future__ import annotations

import random
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .. import codec
from ..device import DeviceIdentity, OemAuthority
from ..errors import CodecError, OpsError, StoreError
from ..model import MsgKind, Payment, PaymentKey, WireMessage
from ..server import Server
from ..ta import SecureStore, TrustedApp
from ..wallet import Wallet
from .scenario import Scenario, Step
from .trace import TraceEvent

SERVER_NAME = "S"

# wire tag byte for WireMessage; the kind byte follows it in every frame
_WIRE_TAG = 4


class SimCrash(Exception):
    """Injected fault at a persistence point; the device survives, the
    in-flight operation does not."""

    def __init__(self, point: str):
        super().__init__(point)
        self.point = point


@dataclass
class AuditReport:
    """Outcome of folding a run's events: final totals plus everything that
    looked wrong (violations) or merely lossy (warnings)."""

    minted: int
    online: int
    offline: int
    inflight: int
    violations: List[str]
    warnings: List[str]
    checks: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


@dataclass
class SimActor:
    name: str
    tee: bool
    model: str
    wallet: Wallet
    device: Optional[DeviceIdentity] = None
    ta: Optional[TrustedApp] = None
    connected: bool = True
    armed_fault: Optional[str] = None
    rolled_back: bool = False
    pay_index_mirror: int = 0  # engine-side count of payments the TA signed
    accepted: List[Payment] = field(default_factory=list)
    blob_history: List[bytes] = field(default_factory=list)


class Auditor:
    """Event-fold ledger, independent of protocol state.

    Value lives in exactly one of: an online account, an offline purse, or
    one of three in-flight pools (issued-unapplied deposit confirmations,
    issued-unaccepted withdraw confirmations, live payments). Minted supply
    must equal the sum of all five after every step, exactly.
    """

    def __init__(self) -> None:
        self.minted = 0
        self.online: Dict[str, int] = {}
        self.offline: Dict[str, int] = {}
        self.deposit_inflight: Dict[Tuple[str, int], int] = {}
        self.withdraw_inflight: Dict[Tuple[str, int], int] = {}
        self.live_payments: Dict[PaymentKey, int] = {}
        self.settled: set = set()

    def _key(self, ev: TraceEvent) -> PaymentKey:
        return codec.decode(ev.data, PaymentKey)

    def consume(self, ev: TraceEvent) -> Optional[str]:
        """Fold one semantic event; returns a violation message or None."""
        k = ev.kind
        if k == "mint":
            self.minted += ev.amount
            self.online[ev.actor] = self.online.get(ev.actor, 0) + ev.amount
        elif k == "deposit_issued":
            slot = (ev.actor, ev.aux)
            if slot in self.deposit_inflight or slot in self.settled:
                return None  # cached re-issue of the same confirmation
            self.online[ev.actor] = self.online.get(ev.actor, 0) - ev.amount
            self.deposit_inflight[slot] = ev.amount
            if self.online[ev.actor] < 0:
                return f"online balance of {ev.actor} went negative"
        elif k == "deposit_applied":
            slot = (ev.actor, ev.aux)
            if slot in self.settled:
                return None  # benign redelivery; the enclave applied it once
            if slot not in self.deposit_inflight:
                return f"deposit confirmation {slot} applied without being issued"
            self.offline[ev.actor] = self.offline.get(ev.actor, 0) + self.deposit_inflight.pop(slot)
            self.settled.add(slot)
        elif k == "withdraw_issued":
            slot = (ev.actor, ev.aux)
            if slot in self.withdraw_inflight or slot in self.settled:
                return None
            self.offline[ev.actor] = self.offline.get(ev.actor, 0) - ev.amount
            self.withdraw_inflight[slot] = ev.amount
            if self.offline[ev.actor] < 0:
                return f"offline balance of {ev.actor} went negative"
        elif k == "withdraw_accepted":
            slot = (ev.actor, ev.aux)
            if slot in self.settled:
                return None  # cached response re-issued; the server credited once
            if slot not in self.withdraw_inflight:
                return f"withdraw confirmation {slot} accepted without being issued"
            self.online[ev.actor] = self.online.get(ev.actor, 0) + self.withdraw_inflight.pop(slot)
            self.settled.add(slot)
        elif k in ("payment_created", "payment_burned"):
            key = self._key(ev)
            if key in self.live_payments or key in self.settled:
                return f"payment key {ev.actor}/{ev.aux} reused"
            self.offline[ev.actor] = self.offline.get(ev.actor, 0) - ev.amount
            self.live_payments[key] = ev.amount
            if self.offline[ev.actor] < 0:
                return f"offline balance of {ev.actor} went negative"
        elif k == "payment_collected":
            key = self._key(ev)
            if key not in self.live_payments:
                return f"payment {ev.aux} collected twice or never created"
            self.offline[ev.actor] = self.offline.get(ev.actor, 0) + self.live_payments.pop(key)
            self.settled.add(key)
        elif k == "payment_claimed":
            key = self._key(ev)
            if key in self.settled:
                return None  # cached response re-issued; settled exactly once
            if key not in self.live_payments:
                return f"payment {ev.aux} claimed twice or never created"
            receiver = ev.peer or ev.actor
            self.online[receiver] = self.online.get(receiver, 0) + self.live_payments.pop(key)
            self.settled.add(key)
        return None

    def sum_online(self) -> int:
        return sum(self.online.values())

    def sum_offline(self) -> int:
        return sum(self.offline.values())

    def sum_inflight(self) -> int:
        return (
            sum(self.deposit_inflight.values())
            + sum(self.withdraw_inflight.values())
            + sum(self.live_payments.values())
        )

    def check_conservation(self) -> Optional[str]:
        total = self.sum_online() + self.sum_offline() + self.sum_inflight()
        if total != self.minted:
            return f"minted {self.minted} but accounted {total}"
        return None

    def pending_counters(self, actor: str) -> Tuple[int, int]:
        """(unapplied deposits, unaccepted withdraws) for one actor."""
        dep = sum(1 for (a, _c) in self.deposit_inflight if a == actor)
        wd = sum(1 for (a, _c) in self.withdraw_inflight if a == actor)
        return dep, wd


class Engine:
    def __init__(self, seed: int, keep_frames: bool = True):
        self.rng = random.Random(seed)
        self.seed = seed
        self.keep_frames = keep_frames
        self.oem = OemAuthority.create(self.rng)
        self.server = Server(self.rng)
        self.server.trust_oem_root(self.oem.root_vk)
        self.actors: Dict[str, SimActor] = {}
        self.names_by_vk: Dict[bytes, str] = {}
        self.events: List[TraceEvent] = []
        self.auditor = Auditor()
        self.violations: List[str] = []
        self.warnings: List[str] = []
        self.queue: deque = deque()
        self.rules: List[tuple] = []  # one-shot ("drop", kind) / ("tamper", kind, off, mask)
        self.frame_log: Dict[MsgKind, Tuple[str, str, bytes]] = {}
        self.reorder_window = 0
        self.reorder_buffer: List[Tuple[str, str, bytes]] = []
        self.step_no = 0
        self.step_op = ""
        self.seq = 0

    # --- trace plumbing ---

    def _emit(
        self,
        kind: str,
        actor: str = "",
        peer: str = "",
        amount: int = 0,
        aux: int = 0,
        note: str = "",
        data: bytes = b"",
    ) -> None:
        ev = TraceEvent(self.seq, self.step_no, kind, actor, peer, amount, aux, note, data)
        self.seq += 1
        self.events.append(ev)
        problem = self.auditor.consume(ev)
        if problem is not None:
            self._violation(problem)

    def _violation(self, msg: str) -> None:
        self.violations.append(msg)
        ev = TraceEvent(self.seq, self.step_no, "violation", note=msg)
        self.seq += 1
        self.events.append(ev)

    def _warn(self, msg: str) -> None:
        self.warnings.append(msg)
        ev = TraceEvent(self.seq, self.step_no, "warning", note=msg)
        self.seq += 1
        self.events.append(ev)

    def _name_of(self, vk: bytes) -> str:
        return self.names_by_vk.get(vk, vk.hex()[:8])

    # --- network layer ---

    @staticmethod
    def _frame_kind(frame: bytes) -> Optional[MsgKind]:
        if len(frame) >= 3 and frame[1] == _WIRE_TAG:
            try:
                return MsgKind(frame[2])
            except ValueError:
                return None
        return None

    def _send(self, src: str, dst: str, frame: bytes) -> None:
        if SERVER_NAME in (src, dst):
            endpoint = dst if src == SERVER_NAME else src
            if self.step_op == "pay":
                self._violation("server contact during an offline payment step")
            if endpoint in self.actors and not self.actors[endpoint].connected:
                self._emit("blocked", actor=src, peer=dst, note="offline")
                return
        kind = self._frame_kind(frame)
        for i, rule in enumerate(self.rules):
            if rule[0] == "drop" and rule[1] == kind:
                del self.rules[i]
                self._emit("drop", actor=src, peer=dst, note=kind.name if kind else "?")
                return
            if rule[0] == "tamper" and rule[1] == kind:
                del self.rules[i]
                off = rule[2] % len(frame)
                frame = frame[:off] + bytes([frame[off] ^ rule[3]]) + frame[off + 1 :]
                self._emit(
                    "tamper", actor=src, peer=dst, aux=off, note=kind.name if kind else "?"
                )
                break
        if kind is not None:
            self.frame_log[kind] = (src, dst, frame)
        if self.reorder_window > 0:
            self.reorder_buffer.append((src, dst, frame))
            if len(self.reorder_buffer) >= self.reorder_window:
                self._flush_reorder()
            return
        self.queue.append((src, dst, frame))

    def _flush_reorder(self) -> None:
        if self.reorder_buffer:
            self._emit("reorder_flush", aux=len(self.reorder_buffer))
            for entry in reversed(self.reorder_buffer):
                self.queue.append(entry)
            self.reorder_buffer.clear()
        self.reorder_window = 0

    def _pump(self) -> None:
        while self.queue:
            src, dst, frame = self.queue.popleft()
            self._emit(
                "deliver",
                actor=src,
                peer=dst,
                aux=len(frame),
                data=frame if self.keep_frames else b"",
            )
            if dst == SERVER_NAME:
                outs = self._deliver_to_server(src, frame)
            else:
                outs = self._deliver_to_actor(dst, src, frame)
            for out_dst, out_frame in outs:
                self._send(dst, out_dst, out_frame)

    def _settle(self) -> None:
        self._pump()
        if self.reorder_buffer:
            self._flush_reorder()
            self._pump()

    def inject(self, src: str, dst: str, frame: bytes) -> None:
        """Hand-crafted frame entering the network; used by attack drivers."""
        self._send(src, dst, frame)
        self._settle()

    # --- endpoints ---

    def _deliver_to_server(self, src: str, frame: bytes) -> List[Tuple[str, bytes]]:
        try:
            msg = codec.decode(frame, WireMessage)
        except CodecError as err:
            self._emit("reject", actor=SERVER_NAME, peer=src, note=err.code)
            return []
        resp, err = self.server.handle_frame(frame)
        if err is not None:
            self._emit("server_abort", actor=SERVER_NAME, peer=src, note=err.code)
            actor = self.actors.get(src)
            if actor is not None and actor.wallet.state.pending_frame == frame:
                done = actor.wallet.on_server_abort(msg.kind, err)
                if done:
                    self._emit("completed_by_abort", actor=src, note=err.code)
            return []
        self._record_server_success(src, msg)
        return [(src, resp)] if resp is not None else []

    def _record_server_success(self, src: str, msg: WireMessage) -> None:
        if msg.kind is MsgKind.CLIENT_REGISTER:
            self._emit("registered", actor=src)
        elif msg.kind is MsgKind.TA_REGISTER:
            self._emit("ta_registered", actor=src)
        elif msg.kind is MsgKind.DEPOSIT_REQ:
            # the response carries the authoritative amount and counter, but
            # the request amount plus the server counter is identical; read
            # the freshly cached response for the actual confirmation
            cached = self.server.state.response_cache.get(self.actors[src].wallet.vk)
            body = codec.decode(cached[2], WireMessage).body
            self._emit("deposit_issued", actor=src, amount=body.amount, aux=body.counter)
        elif msg.kind is MsgKind.WITHDRAW_REQ:
            self._emit(
                "withdraw_accepted", actor=src, amount=msg.body.amount, aux=msg.body.counter
            )
        elif msg.kind is MsgKind.CLAIM_REQ:
            payment = msg.body.payment
            self._emit(
                "payment_claimed",
                actor=src,
                peer=self._name_of(payment.receiver.vk),
                amount=payment.amount,
                aux=payment.index,
                data=codec.encode(payment.key()),
            )

    def _deliver_to_actor(self, name: str, src: str, frame: bytes) -> List[Tuple[str, bytes]]:
        actor = self.actors[name]
        w = actor.wallet
        try:
            msg = codec.decode(frame, WireMessage)
        except CodecError as err:
            self._emit("reject", actor=name, peer=src, note=err.code)
            return []
        k = msg.kind
        try:
            if k is MsgKind.CLIENT_REGISTER_ACK:
                if w.state.cert is None and w.pending_kind() is MsgKind.CLIENT_REGISTER:
                    w.on_register_ack(msg.body)
                    self.names_by_vk[w.vk] = name
                else:
                    self._emit("ignored", actor=name, note="unsolicited registration ack")
            elif k is MsgKind.TA_REGISTER_ACK:
                if w.pending_kind() is MsgKind.TA_REGISTER:
                    w.on_ta_ack(msg.body)
                    assert actor.ta is not None
                    self.names_by_vk[actor.ta.cert().vk] = name
                else:
                    self._emit("ignored", actor=name, note="unsolicited TA ack")
            elif k is MsgKind.DEPOSIT_CONFIRMED:
                return self._apply_deposit_confirmation(actor, msg.body)
            elif k is MsgKind.WITHDRAW_CONFIRMED:
                if w.pending_kind() is MsgKind.WITHDRAW_REQ:
                    w.on_withdraw_confirmed()
                    self._emit("withdraw_confirmed", actor=name)
                else:
                    self._emit("ignored", actor=name, note="unsolicited withdraw ack")
            elif k is MsgKind.PAY_REQ:
                return self._make_payment(actor, src, msg.body)
            elif k is MsgKind.PAYMENT_TRANSFER:
                return self._accept_payment(actor, src, msg.body)
            elif k is MsgKind.PAY_CONFIRMED:
                w.on_pay_confirmed()
                self._emit("pay_acked", actor=name, peer=src)
            elif k is MsgKind.CLAIM_CONFIRMED:
                if w.pending_kind() is MsgKind.CLAIM_REQ:
                    w.on_claim_confirmed()
                    self._emit("claim_confirmed", actor=name)
                else:
                    self._emit("ignored", actor=name, note="unsolicited claim ack")
            else:
                self._emit("ignored", actor=name, note=f"{k.name} not expected by clients")
        except SimCrash as crash:
            self._emit("crashed", actor=name, note=crash.point)
            if crash.point == "deposit:persisted":
                # the enclave persisted the credit before the fault fired
                self._emit(
                    "deposit_applied", actor=name, amount=msg.body.amount, aux=msg.body.counter
                )
        except StoreError as err:
            self._emit("store_abort", actor=name, note=err.code)
        except OpsError as err:
            self._emit("wallet_abort", actor=name, peer=src, note=err.code)
        return []

    def _apply_deposit_confirmation(self, actor: SimActor, body) -> List[Tuple[str, bytes]]:
        actor.wallet.on_deposit_confirmed(body)
        self._emit("deposit_applied", actor=actor.name, amount=body.amount, aux=body.counter)
        return []

    def _make_payment(self, actor: SimActor, requester: str, body) -> List[Tuple[str, bytes]]:
        try:
            tframe = actor.wallet.make_payment(body, created_at=self.step_no)
        except SimCrash as crash:
            self._emit("crashed", actor=actor.name, note=crash.point)
            if crash.point == "pay:persisted":
                actor.pay_index_mirror += 1
                assert actor.ta is not None
                key = PaymentKey(actor.ta.cert().vk, actor.pay_index_mirror)
                self._emit(
                    "payment_burned",
                    actor=actor.name,
                    peer=requester,
                    amount=body.amount,
                    aux=actor.pay_index_mirror,
                    data=codec.encode(key),
                )
                self._warn(
                    f"payment of {body.amount} burned inside {actor.name}: "
                    "persisted but never released"
                )
            return []
        payment = codec.decode(tframe, WireMessage).body.payment
        actor.pay_index_mirror = payment.index
        self._emit(
            "payment_created",
            actor=actor.name,
            peer=self._name_of(payment.receiver.vk),
            amount=payment.amount,
            aux=payment.index,
            data=codec.encode(payment.key()),
        )
        return [(requester, tframe)]

    def _accept_payment(self, actor: SimActor, src: str, body) -> List[Tuple[str, bytes]]:
        outcome, ack = actor.wallet.on_payment(body)
        payment = body.payment
        if outcome == "accepted":
            actor.accepted.append(payment)
            kind = "payment_collected" if payment.receiver.kind.name == "TA" else "payment_accepted"
            self._emit(
                kind,
                actor=actor.name,
                peer=src,
                amount=payment.amount,
                aux=payment.index,
                data=codec.encode(payment.key()),
            )
        else:
            self._emit("duplicate_payment", actor=actor.name, peer=src, aux=payment.index)
        return [(src, ack)] if ack is not None else []

    # --- scenario steps ---

    def add_actor(self, name: str, tee: bool, model: str = "simdev-9") -> SimActor:
        if name in self.actors or name == SERVER_NAME:
            raise OpsError("bad scenario", f"actor name {name!r} taken")

        def hook(point: str, actor_name: str = name) -> None:
            a = self.actors[actor_name]
            if a.armed_fault == point:
                a.armed_fault = None
                raise SimCrash(point)

        wallet = Wallet(self.server.vk, self.rng, fault_hook=hook)
        actor = SimActor(name=name, tee=tee, model=model, wallet=wallet)
        if tee:
            actor.device = self.oem.make_device(model, self.rng)
            actor.ta = TrustedApp(
                actor.device, SecureStore(actor.device.store_secret), self.server.vk, fault_hook=hook
            )
        self.actors[name] = actor
        self.names_by_vk[wallet.vk] = name
        self._emit("actor", actor=name, note="tee" if tee else "plain")
        return actor

    def register(self, name: str) -> None:
        w = self.actors[name].wallet
        try:
            frame = w.begin_register()
        except OpsError as err:
            self._emit("wallet_abort", actor=name, note=err.code)
            return
        self._send(name, SERVER_NAME, frame)
        self._settle()

    def setup_ta(self, name: str) -> None:
        actor = self.actors[name]
        if actor.ta is None:
            self._emit("wallet_abort", actor=name, note="no TA")
            return
        try:
            frame = actor.wallet.begin_ta_setup(actor.ta, self.rng)
        except OpsError as err:
            self._emit("wallet_abort", actor=name, note=err.code)
            return
        self._send(name, SERVER_NAME, frame)
        self._settle()

    def mint(self, name: str, amount: int) -> None:
        actor = self.actors[name]
        try:
            self.server.mint(actor.wallet.vk, amount)
        except OpsError as err:
            self._emit("server_abort", actor=SERVER_NAME, peer=name, note=err.code)
            return
        self._emit("mint", actor=name, amount=amount)

    def deposit(self, name: str, amount: int) -> None:
        w = self.actors[name].wallet
        try:
            frame = w.begin_deposit(amount)
        except OpsError as err:
            self._emit("wallet_abort", actor=name, note=err.code)
            return
        self._send(name, SERVER_NAME, frame)
        self._settle()

    def withdraw(self, name: str, amount: int) -> None:
        actor = self.actors[name]
        w = actor.wallet
        try:
            frame = w.begin_withdraw(amount)
        except SimCrash as crash:
            self._emit("crashed", actor=name, note=crash.point)
            self._note_withdraw_issue(actor)
            if crash.point == "withdraw:persisted":
                self._warn(
                    f"withdraw confirmation lost inside {actor.name}: counter consumed, "
                    "value stranded in flight"
                )
            return
        except StoreError as err:
            self._emit("store_abort", actor=name, note=err.code)
            return
        except OpsError as err:
            self._emit("wallet_abort", actor=name, note=err.code)
            return
        body = codec.decode(frame, WireMessage).body
        self._emit("withdraw_issued", actor=name, amount=body.amount, aux=body.counter)
        self._send(name, SERVER_NAME, frame)
        self._settle()

    def _note_withdraw_issue(self, actor: SimActor) -> None:
        """After a crash inside begin_withdraw the enclave has debited; the
        confirmation survives either as the wallet's pending frame or as the
        enclave's unsettled record, so the fold can account the exact value."""
        if actor.wallet.pending_kind() is MsgKind.WITHDRAW_REQ:
            body = codec.decode(actor.wallet.state.pending_frame, WireMessage).body
            self._emit("withdraw_issued", actor=actor.name, amount=body.amount, aux=body.counter)
            return
        assert actor.ta is not None
        rec = actor.ta.unsettled_withdrawal()
        assert rec is not None
        self._emit("withdraw_issued", actor=actor.name, amount=rec.amount, aux=rec.counter)

    def pay(self, payer: str, receiver: str, amount: int) -> None:
        r_wallet = self.actors[receiver].wallet
        try:
            req_frame = r_wallet.request_payment(amount)
        except OpsError as err:
            self._emit("wallet_abort", actor=receiver, note=err.code)
            return
        self._send(receiver, payer, req_frame)
        self._settle()
        sender = self.actors[payer].wallet
        if sender.unacked_payment_frame is not None:
            # no confirmation came back; retransmit the identical frame once
            self._emit("retransmit", actor=payer, peer=receiver)
            self._send(payer, receiver, sender.unacked_payment_frame)
            self._settle()
            if sender.unacked_payment_frame is not None:
                self._warn(f"payment from {payer} to {receiver} never acknowledged")

    def claim(self, name: str) -> None:
        w = self.actors[name].wallet
        claimable = w.claimable()
        if not claimable:
            self._emit("note", actor=name, note="nothing to claim")
            return
        try:
            frame = w.begin_claim(claimable[0])
        except OpsError as err:
            self._emit("wallet_abort", actor=name, note=err.code)
            return
        self._send(name, SERVER_NAME, frame)
        self._settle()

    def collect(self, name: str) -> None:
        """Re-feed the most recently accepted payment to the enclave. The
        first acceptance already collected it, so this probes the double
        collect defense."""
        actor = self.actors[name]
        if actor.ta is None or not actor.accepted:
            self._emit("note", actor=name, note="nothing to collect")
            return
        payment = actor.accepted[-1]
        try:
            actor.ta.collect(payment)
            self._emit(
                "payment_collected",
                actor=name,
                amount=payment.amount,
                aux=payment.index,
                data=codec.encode(payment.key()),
            )
        except StoreError as err:
            self._emit("store_abort", actor=name, note=err.code)
        except OpsError as err:
            self._emit("ta_abort", actor=name, note=err.code)

    def go_offline(self, name: str) -> None:
        self.actors[name].connected = False
        self._emit("offline", actor=name)

    def go_online(self, name: str) -> None:
        self.actors[name].connected = True
        self._emit("online", actor=name)

    def retry(self, name: str) -> None:
        frame = self.actors[name].wallet.retry_pending()
        if frame is None:
            self._emit("note", actor=name, note="nothing to retry")
            return
        self._emit("retry", actor=name)
        self._send(name, SERVER_NAME, frame)
        self._settle()

    def arm_drop(self, kind: MsgKind) -> None:
        self.rules.append(("drop", kind))
        self._emit("armed", note=f"drop next {kind.name}")

    def arm_tamper(self, kind: MsgKind, offset: int, mask: int) -> None:
        self.rules.append(("tamper", kind, offset, mask))
        self._emit("armed", aux=offset, note=f"tamper next {kind.name}")

    def replay(self, kind: MsgKind) -> None:
        entry = self.frame_log.get(kind)
        if entry is None:
            self._emit("note", note=f"nothing to replay for {kind.name}")
            return
        src, dst, frame = entry
        self._emit("replay", actor=src, peer=dst, note=kind.name)
        self._send(src, dst, frame)
        self._settle()

    def reorder(self, window: int) -> None:
        self.reorder_window = window
        self.reorder_buffer = []
        self._emit("armed", aux=window, note="reorder window")

    def rollback_ta_store(self, name: str) -> None:
        actor = self.actors[name]
        if actor.ta is None:
            self._emit("note", actor=name, note="no TA store to roll back")
            return
        current = actor.ta.store.blob
        stale = next((b for b in reversed(actor.blob_history) if b != current), None)
        if stale is None:
            self._emit("note", actor=name, note="no older store snapshot differs")
            return
        actor.ta.store.blob = stale
        actor.rolled_back = True
        self._emit("rollback_injected", actor=name)

    def crash(self, name: str, point: str) -> None:
        self.actors[name].armed_fault = point
        self._emit("armed", actor=name, note=f"crash at {point}")

    # --- step loop ---

    _DISPATCH = {
        "actor": "add_actor",
        "register": "register",
        "setup_ta": "setup_ta",
        "mint": "mint",
        "deposit": "deposit",
        "withdraw": "withdraw",
        "pay": "pay",
        "claim": "claim",
        "collect": "collect",
        "go_offline": "go_offline",
        "go_online": "go_online",
        "retry": "retry",
        "drop": "arm_drop",
        "tamper": "arm_tamper",
        "replay": "replay",
        "reorder": "reorder",
        "rollback_ta_store": "rollback_ta_store",
        "crash": "crash",
    }

    def run_step(self, step: Step) -> None:
        self.step_no += 1
        self.step_op = step.op
        self._emit("step", aux=self.step_no, note=step.text)
        getattr(self, self._DISPATCH[step.op])(*step.args)
        self.step_op = ""
        self._settle()
        self._post_step_checks()

    def run_step_list(self, ops: List[tuple]) -> None:
        """Drive steps straight from (op, args) pairs; for tests and attacks."""
        for op, args in ops:
            text = " ".join(str(part) for part in (op, *args))
            self.run_step(Step(op, tuple(args), 0, text))

    def run_scenario(self, scenario: Scenario) -> int:
        for step in scenario.steps:
            self.run_step(step)
        self.finish()
        return 1 if self.violations else 0

    # --- invariant checks ---

    def _post_step_checks(self) -> None:
        problem = self.auditor.check_conservation()
        if problem is not None:
            self._violation(f"conservation broken: {problem}")
        else:
            self._emit("conservation", amount=self.auditor.minted, note="ok")
        self._cross_check_server()
        for actor in self.actors.values():
            self._cross_check_ta(actor)
            if actor.ta is not None and actor.ta.store.blob is not None:
                hist = actor.blob_history
                if not hist or hist[-1] != actor.ta.store.blob:
                    hist.append(actor.ta.store.blob)

    def _cross_check_server(self) -> None:
        god = {
            self._name_of(vk): bal for vk, bal in self.server.state.online_balances.items()
        }
        for name, expected in self.auditor.online.items():
            if god.get(name, 0) != expected:
                self._violation(
                    f"online balance mismatch for {name}: "
                    f"server has {god.get(name, 0)}, fold says {expected}"
                )

    def _cross_check_ta(self, actor: SimActor) -> None:
        if actor.ta is None or not actor.wallet.ta_active:
            return
        try:
            att = actor.ta.get_balance()
        except StoreError as err:
            if not actor.rolled_back:
                self._violation(f"store of {actor.name} unreadable: {err.code}")
            return
        expected = self.auditor.offline.get(actor.name, 0)
        if att.balance != expected:
            self._violation(
                f"offline balance mismatch for {actor.name}: "
                f"enclave has {att.balance}, fold says {expected}"
            )
        server_counter = self.server.state.sync_counters.get(actor.wallet.vk)
        if server_counter is None:
            return
        dep_pending, wd_pending = self.auditor.pending_counters(actor.name)
        if att.counter != server_counter - dep_pending + wd_pending:
            self._violation(
                f"counter desync for {actor.name}: enclave {att.counter}, "
                f"server {server_counter}, pending {dep_pending}+{wd_pending}"
            )
        else:
            self._emit("counter_check", actor=actor.name, aux=att.counter, note="ok")

    def report(self) -> AuditReport:
        return AuditReport(
            minted=self.auditor.minted,
            online=self.auditor.sum_online(),
            offline=self.auditor.sum_offline(),
            inflight=self.auditor.sum_inflight(),
            violations=list(self.violations),
            warnings=list(self.warnings),
        )

    def finish(self) -> None:
        """Final accounting: god-view balances plus stuck-value warnings."""
        stuck = self.auditor.sum_inflight()
        live = sum(self.auditor.live_payments.values())
        if self.auditor.deposit_inflight:
            self._warn(
                f"{sum(self.auditor.deposit_inflight.values())} units in "
                f"{len(self.auditor.deposit_inflight)} unapplied deposit confirmations"
            )
        if self.auditor.withdraw_inflight:
            self._warn(
                f"{sum(self.auditor.withdraw_inflight.values())} units in "
                f"{len(self.auditor.withdraw_inflight)} unsettled withdraw confirmations"
            )
        if live:
            self._warn(f"{live} units in {len(self.auditor.live_payments)} unsettled payments")
        for name, actor in self.actors.items():
            bal = self.server.state.online_balances.get(actor.wallet.vk, 0)
            self._emit("final_online", actor=name, amount=bal)
        for name, actor in self.actors.items():
            if actor.ta is None or not actor.wallet.ta_active:
                continue
            try:
                amount = actor.ta.get_balance().balance
                note = ""
            except StoreError as err:
                amount = self.auditor.offline.get(name, 0)
                note = f"store {err.code}; fold value shown"
            self._emit("final_offline", actor=name, amount=amount, note=note)
        self._emit("final_minted", amount=self.auditor.minted, aux=stuck)
