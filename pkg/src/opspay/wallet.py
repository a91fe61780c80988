"""Client-side untrusted application.

The wallet holds the account key, talks to the server over authed frames,
drives its trusted app for offline funds, and runs both halves of the
person-to-person payment exchange. It is a single-threaded state machine:
at most one server-bound operation is outstanding, and its encoded frame is
persisted before first send so a crashed or response-dropped operation can be
retried with the identical bytes.

Frames in, frames out: methods named begin_* build and return an encoded
request frame; on_* methods consume a decoded inbound message. Transport is
the caller's job (the simulator's in-memory channels or a TCP binding).
"""
from __future__ import annotations

from typing import Callable, Optional

from . import codec, crypto
from .errors import OpsError, ProtocolError
from .model import (
    AuthEnvelope,
    CertKind,
    Certificate,
    ClaimReq,
    ClientRegister,
    ClientRegisterAck,
    DepositConfirmed,
    DepositReq,
    MsgKind,
    PayConfirmed,
    Payment,
    PaymentTransfer,
    PayReq,
    TaRegister,
    TaRegisterAck,
    WalletState,
    WireMessage,
    WithdrawReq,
)
from .ta import TrustedApp


def pay_verify(payment: Payment, server_vk: bytes) -> bool:
    """Offline payment verification: valid TEE certificate on the sender and
    a valid sender signature over (amount, sender, receiver, index). Runs
    entirely from public material; no server round trip."""
    return crypto.pay_verify(payment, server_vk)


class Wallet:
    def __init__(self, server_vk: bytes, rng, fault_hook: Optional[Callable[[str], None]] = None):
        self.state = WalletState(keys=crypto.keygen(rng))
        self.server_vk = server_vk
        self.ta: Optional[TrustedApp] = None
        self.ta_active = False
        self.fault_hook = fault_hook
        # in-memory exchange tracking; failure here only stalls one payment
        self.expected_payment: Optional[tuple[int, Certificate]] = None
        self.unacked_payment_frame: Optional[bytes] = None

    # --- small helpers ---

    @property
    def vk(self) -> bytes:
        return self.state.keys.vk

    def _fault(self, point: str) -> None:
        if self.fault_hook is not None:
            self.fault_hook(point)

    def _require_cert(self) -> Certificate:
        if self.state.cert is None:
            raise ProtocolError("not registered", "client has no certificate")
        return self.state.cert

    def _require_ta(self) -> TrustedApp:
        if self.ta is None or not self.ta_active:
            raise ProtocolError("not activated", "no active trusted app")
        return self.ta

    def _authed_frame(self, kind: MsgKind, body: object) -> bytes:
        nonce = self.state.next_nonce
        self.state.next_nonce += 1
        sig = crypto.sign(codec.signed_request(kind, body, nonce), self.state.keys.sk)
        return codec.encode(WireMessage(kind, body, AuthEnvelope(self.vk, nonce, sig)))

    def _plain_frame(self, kind: MsgKind, body: object) -> bytes:
        return codec.encode(WireMessage(kind, body))

    def _set_pending(self, frame: bytes) -> None:
        if self.state.pending_frame is not None:
            raise ProtocolError("operation pending", "finish the outstanding request first")
        self.state.pending_frame = frame

    def pending_kind(self) -> Optional[MsgKind]:
        if self.state.pending_frame is None:
            return None
        return codec.decode(self.state.pending_frame, WireMessage).kind

    def retry_pending(self) -> Optional[bytes]:
        """The frame to send the server next: the outstanding request verbatim,
        or a rebuilt withdraw request when the trusted app holds a confirmation
        that never made it out (crash between its persist and our send)."""
        if self.state.pending_frame is not None:
            return self.state.pending_frame
        if self.ta_active and self.ta is not None:
            rec = self.ta.unsettled_withdrawal()
            if rec is not None:
                body = WithdrawReq(rec.amount, rec.counter, rec.sig)
                frame = self._authed_frame(MsgKind.WITHDRAW_REQ, body)
                self.state.pending_frame = frame
                return frame
        return None

    def _require_settled(self) -> None:
        if self.ta_active and self.ta is not None and self.ta.unsettled_withdrawal() is not None:
            raise ProtocolError("operation pending", "unsettled withdrawal, retry first")

    # --- registration ---

    def begin_register(self) -> bytes:
        if self.state.cert is not None:
            raise ProtocolError("already registered", "wallet already holds a certificate")
        frame = self._authed_frame(MsgKind.CLIENT_REGISTER, ClientRegister(self.vk))
        self._set_pending(frame)
        return frame

    def on_register_ack(self, ack: ClientRegisterAck) -> None:
        if self.state.cert is not None:
            return  # duplicate ack
        cert = ack.cert
        if cert.vk != self.vk or not crypto.cert_verify(cert, self.server_vk):
            raise ProtocolError("bad server cert", "issued certificate fails verification")
        self.state.cert = cert
        self.state.pending_frame = None

    def begin_ta_setup(self, ta: TrustedApp, rng) -> bytes:
        """Initialize the trusted app and request its registration. The TA
        must be provisioned on this device out of band; we attach it here."""
        self._require_cert()
        if self.ta_active:
            raise ProtocolError("already provisioned", "wallet already has an active trusted app")
        ta_vk, attestation = ta.init(rng)
        self.ta = ta
        body = TaRegister(ta.device.descriptor(), ta_vk, self.vk, attestation)
        frame = self._authed_frame(MsgKind.TA_REGISTER, body)
        self._set_pending(frame)
        return frame

    def on_ta_ack(self, ack: TaRegisterAck) -> None:
        if self.ta is None:
            raise ProtocolError("not activated", "no trusted app attached")
        self.ta.cert_init(ack.cert)
        self.ta_active = True
        self.state.pending_frame = None

    # --- deposit / withdraw rounds ---

    def begin_deposit(self, amount: int) -> bytes:
        self._require_cert()
        self._require_ta()
        self._require_settled()
        frame = self._authed_frame(MsgKind.DEPOSIT_REQ, DepositReq(amount))
        self._set_pending(frame)
        return frame

    def on_deposit_confirmed(self, conf: DepositConfirmed) -> None:
        """Apply a deposit confirmation to the TA. Exact redelivery of an
        already-applied confirmation is a no-op inside the TA, so completing
        a retried round is idempotent; anything else out of order aborts."""
        ta = self._require_ta()
        ta.deposit(conf.amount, conf.counter, conf.sig)
        if self.pending_kind() is MsgKind.DEPOSIT_REQ:
            self.state.pending_frame = None

    def begin_withdraw(self, amount: int) -> bytes:
        self._require_cert()
        ta = self._require_ta()
        if self.state.pending_frame is not None:
            raise ProtocolError("operation pending", "finish the outstanding request first")
        self._require_settled()
        confirmation = ta.withdraw(amount)
        body = WithdrawReq(confirmation.amount, confirmation.counter, confirmation.sig)
        frame = self._authed_frame(MsgKind.WITHDRAW_REQ, body)
        # the TA has already debited; losing this frame must not lose the money
        self.state.pending_frame = frame
        self._fault("withdraw:before-send")
        return frame

    def on_withdraw_confirmed(self) -> None:
        if self.ta is not None and self.ta_active:
            self.ta.withdrawal_settled()
        self.state.pending_frame = None

    # --- person-to-person payment ---

    def presented_cert(self) -> Certificate:
        """The certificate shown to payers: the TA's when one is active so the
        payment can be collected offline, else the account certificate."""
        cert = self._require_cert()
        if self.ta_active and self.ta is not None:
            return self.ta.cert()
        return cert

    def request_payment(self, amount: int) -> bytes:
        """Build the request frame shown to the payer, recording what we
        expect so the transfer can be checked on arrival."""
        if amount < 1:
            raise ProtocolError("bad amount", "requested amount must be at least 1")
        presented = self.presented_cert()
        self.expected_payment = (amount, presented)
        return self._plain_frame(MsgKind.PAY_REQ, PayReq(amount, presented))

    def make_payment(self, req: PayReq, created_at: Optional[int] = None) -> bytes:
        """Payer half: turn a payment request into a signed transfer."""
        ta = self._require_ta()
        if not crypto.any_cert_verify(req.receiver, self.server_vk):
            raise ProtocolError("bad receiver", "receiver certificate fails verification")
        payment = ta.pay(req.amount, req.receiver, created_at)
        frame = self._plain_frame(MsgKind.PAYMENT_TRANSFER, PaymentTransfer(payment))
        self.unacked_payment_frame = frame
        return frame

    def on_payment(self, transfer: PaymentTransfer) -> tuple[str, Optional[bytes]]:
        """Receiver half. Returns (outcome, ack frame or None); outcome is
        'accepted', 'duplicate' (re-acked), or raises on rejection."""
        payment = transfer.payment
        key = payment.key()
        ack = self._plain_frame(MsgKind.PAY_CONFIRMED, PayConfirmed())
        if self.expected_payment is None:
            if key in self.state.received_keys:
                return "duplicate", ack  # re-ack a transfer whose ack was lost
            raise ProtocolError("no matching request", "unsolicited payment transfer")
        amount, presented = self.expected_payment
        if not pay_verify(payment, self.server_vk):
            raise ProtocolError("invalid payment", "payment fails verification")
        if payment.receiver != presented:
            raise ProtocolError("not addressed to me", "receiver certificate mismatch")
        if payment.amount != amount:
            raise ProtocolError("amount mismatch", f"expected {amount}, got {payment.amount}")
        if key in self.state.received_keys:
            raise ProtocolError("already received", "payment already accepted")
        if payment.receiver.kind is CertKind.TA:
            # TEE receiver: collect inside the enclave before acknowledging
            self._require_ta().collect(payment)
            self.state.received_keys.add(key)
        else:
            self.state.received_keys.add(key)
            self.state.inbox.append(payment)
        self.expected_payment = None
        return "accepted", ack

    def on_pay_confirmed(self) -> None:
        self.unacked_payment_frame = None

    # --- claim ---

    def begin_claim(self, payment: Payment) -> bytes:
        self._require_cert()
        if payment not in self.state.inbox:
            raise ProtocolError("invalid payment", "payment is not in the inbox")
        frame = self._authed_frame(MsgKind.CLAIM_REQ, ClaimReq(payment))
        self._set_pending(frame)
        return frame

    def claimable(self) -> list[Payment]:
        return list(self.state.inbox)

    def _finish_claim(self) -> None:
        frame = self.state.pending_frame
        if frame is None:
            return
        msg = codec.decode(frame, WireMessage)
        if msg.kind is MsgKind.CLAIM_REQ:
            claimed = msg.body.payment
            self.state.inbox = [p for p in self.state.inbox if p.key() != claimed.key()]
            self.state.claimed.append(claimed)
        self.state.pending_frame = None

    def on_claim_confirmed(self) -> None:
        self._finish_claim()

    def on_server_abort(self, kind: MsgKind, err: OpsError) -> bool:
        """Server rejected our outstanding request. Returns True when the
        abort completes the operation (idempotent completion), False when it
        is a genuine failure (pending cleared, error recorded)."""
        if kind is MsgKind.CLAIM_REQ and err.code == "already claimed":
            self._finish_claim()
            return True
        if (
            kind is MsgKind.WITHDRAW_REQ
            and err.code == "counter out of sync"
            and self.pending_kind() is MsgKind.WITHDRAW_REQ
        ):
            # one round in flight at a time, so the server being past our
            # counter means this exact confirmation was already accepted
            if self.ta is not None and self.ta_active:
                self.ta.withdrawal_settled()
            self.state.pending_frame = None
            return True
        self.state.pending_frame = None
        return False

    # --- persistence ---

    def save(self) -> bytes:
        return codec.encode(self.state)

    def load(self, data: bytes) -> None:
        self.state = codec.decode(data, WalletState)
