"""Online ledger operator: registration authority, certificate issuer, and
settlement endpoint.

The server never trusts a bare request: every client-to-server message
carries an auth envelope (sender key, strictly increasing per-sender nonce,
signature over kind, body, and nonce). Successful responses are cached one
deep per sender so a client that lost a response can retry the identical
frame and get the identical answer instead of a double execution.
"""
from __future__ import annotations

from typing import Optional

from . import codec, crypto
from .errors import CodecError, OpsError, ProtocolError
from .model import (
    CertKind,
    ClaimConfirmed,
    ClaimReq,
    ClientRegister,
    ClientRegisterAck,
    DepositConfirmed,
    DepositReq,
    MAX_U64,
    MsgKind,
    ServerState,
    TaRegister,
    TaRegisterAck,
    WireMessage,
    WithdrawConfirmed,
    WithdrawReq,
)


class Server:
    def __init__(self, rng=None, keys=None, oem_roots=(), state: Optional[ServerState] = None):
        if state is not None:
            self.state = state
        else:
            if keys is None:
                keys = crypto.keygen(rng)
            self.state = ServerState(keys=keys, oem_roots=set(oem_roots))

    @property
    def vk(self) -> bytes:
        return self.state.keys.vk

    def trust_oem_root(self, root_vk: bytes) -> None:
        self.state.oem_roots.add(root_vk)

    # --- persistence ---

    def snapshot(self) -> bytes:
        return codec.encode(self.state)

    @classmethod
    def from_snapshot(cls, data: bytes) -> "Server":
        return cls(state=codec.decode(data, ServerState))

    # --- harness-only issuance, never reachable over the wire ---

    def mint(self, client_vk: bytes, amount: int) -> None:
        if client_vk not in self.state.registry:
            raise ProtocolError("unknown account", "mint target is not registered")
        if amount < 1:
            raise ProtocolError("bad amount", "mint amount must be at least 1")
        if self.state.online_balances[client_vk] + amount > MAX_U64:
            raise ProtocolError("balance overflow", "mint would overflow balance")
        self.state.online_balances[client_vk] += amount

    # --- wire entry point ---

    def handle_frame(self, frame: bytes) -> tuple[Optional[bytes], Optional[OpsError]]:
        """Process one encoded request frame. Returns (response frame, error);
        exactly one of the two is set, except that replayed stale requests
        produce (None, error) and retried cached requests produce the cached
        response."""
        try:
            msg = codec.decode(frame, WireMessage)
            response = self._dispatch(msg)
        except _CachedResponse as hit:
            return hit.frame, None
        except (ProtocolError, CodecError) as err:
            return None, err
        out = codec.encode(response)
        if msg.auth is not None:
            self.state.response_cache[msg.auth.sender_vk] = (msg.auth.nonce, msg.auth.sig, out)
        return out, None

    def _dispatch(self, msg: WireMessage) -> WireMessage:
        handler = _HANDLERS.get(msg.kind)
        if handler is None:
            raise ProtocolError("wrong kind", f"server does not handle {msg.kind.name}")
        sender_vk = self._authenticate(msg)
        return handler(self, msg.body, sender_vk)

    def _authenticate(self, msg: WireMessage) -> bytes:
        auth = msg.auth
        if auth is None:
            raise ProtocolError("unauthenticated", "missing auth envelope")
        preimage = codec.signed_request(msg.kind, msg.body, auth.nonce)
        if not crypto.sig_verify(preimage, auth.sig, auth.sender_vk):
            raise ProtocolError("unauthenticated", "bad request signature")
        last = self.state.last_nonces.get(auth.sender_vk, 0)
        if auth.nonce <= last:
            cached = self.state.response_cache.get(auth.sender_vk)
            if cached is not None and cached[0] == auth.nonce and cached[1] == auth.sig:
                # identical retry of the last served request: replay the answer
                raise _CachedResponse(cached[2])
            raise ProtocolError("duplicate request", f"nonce {auth.nonce} already seen")
        self.state.last_nonces[auth.sender_vk] = auth.nonce
        return auth.sender_vk

    # --- handlers, one per protocol round ---

    def _register_client(self, body: ClientRegister, sender_vk: bytes) -> WireMessage:
        if body.vk != sender_vk:
            raise ProtocolError("unauthenticated", "registration must be signed by the key itself")
        if body.vk in self.state.registry:
            raise ProtocolError("already registered", "client key already in registry")
        self.state.registry[body.vk] = None
        self.state.online_balances[body.vk] = 0
        self.state.sync_counters[body.vk] = 0
        cert = crypto.issue_cert(body.vk, CertKind.UA, self.state.keys.sk)
        return WireMessage(MsgKind.CLIENT_REGISTER_ACK, ClientRegisterAck(cert))

    def _register_ta(self, body: TaRegister, sender_vk: bytes) -> WireMessage:
        if body.client_vk != sender_vk:
            raise ProtocolError("unauthenticated", "TA registration signed by a different client")
        if body.client_vk not in self.state.registry:
            raise ProtocolError("unknown client", "register the client key first")
        if self.state.registry[body.client_vk] is not None:
            raise ProtocolError("already provisioned", "client already has a TA on file")
        d = body.device
        if not any(
            crypto.device_cert_verify(d.vk, d.model, d.oem_sig, root) for root in self.state.oem_roots
        ):
            raise ProtocolError("attestation rejected", "device does not chain to a trusted OEM root")
        if not crypto.oem_cert_verify(body.ta_vk, body.attestation, d.vk, d.model):
            raise ProtocolError("attestation rejected", "bad trusted-OS attestation")
        if body.ta_vk in {v for v in self.state.registry.values() if v is not None}:
            raise ProtocolError("attestation rejected", "TA key already bound to another client")
        self.state.registry[body.client_vk] = body.ta_vk
        self.state.sync_counters[body.client_vk] = 0
        cert = crypto.issue_cert(body.ta_vk, CertKind.TA, self.state.keys.sk)
        return WireMessage(MsgKind.TA_REGISTER_ACK, TaRegisterAck(cert))

    def _require_ta(self, sender_vk: bytes) -> bytes:
        if sender_vk not in self.state.registry:
            raise ProtocolError("unknown client", "sender is not registered")
        ta_vk = self.state.registry[sender_vk]
        if ta_vk is None:
            raise ProtocolError("no TA registered", "client has no TA on file")
        return ta_vk

    def _deposit(self, body: DepositReq, sender_vk: bytes) -> WireMessage:
        ta_vk = self._require_ta(sender_vk)
        if body.amount > self.state.online_balances[sender_vk]:
            raise ProtocolError("insufficient online funds", f"requested {body.amount}")
        if self.state.sync_counters[sender_vk] >= MAX_U64:
            raise ProtocolError("counter overflow", "sync counter exhausted")
        self.state.online_balances[sender_vk] -= body.amount
        self.state.sync_counters[sender_vk] += 1
        counter = self.state.sync_counters[sender_vk]
        sig = crypto.sign(
            codec.signed_deposit_confirmation(ta_vk, body.amount, counter), self.state.keys.sk
        )
        return WireMessage(MsgKind.DEPOSIT_CONFIRMED, DepositConfirmed(body.amount, counter, sig))

    def _withdraw(self, body: WithdrawReq, sender_vk: bytes) -> WireMessage:
        ta_vk = self._require_ta(sender_vk)
        if body.counter != self.state.sync_counters[sender_vk] + 1:
            raise ProtocolError(
                "counter out of sync",
                f"confirmation counter {body.counter}, expected {self.state.sync_counters[sender_vk] + 1}",
            )
        preimage = codec.signed_withdraw_confirmation(body.amount, body.counter)
        if not crypto.sig_verify(preimage, body.sig, ta_vk):
            raise ProtocolError("invalid confirmation", "bad TA signature on withdrawal")
        if self.state.online_balances[sender_vk] + body.amount > MAX_U64:
            raise ProtocolError("balance overflow", "withdraw would overflow balance")
        self.state.online_balances[sender_vk] += body.amount
        self.state.sync_counters[sender_vk] = body.counter
        return WireMessage(MsgKind.WITHDRAW_CONFIRMED, WithdrawConfirmed())

    def _claim(self, body: ClaimReq, sender_vk: bytes) -> WireMessage:
        payment = body.payment
        if payment.receiver.kind is not CertKind.UA:
            raise ProtocolError("must be collected, not claimed", "receiver is a TEE certificate")
        if not crypto.pay_verify(payment, self.vk):
            raise ProtocolError("invalid payment", "payment fails verification")
        receiver_vk = payment.receiver.vk
        if receiver_vk not in self.state.registry:
            raise ProtocolError("unknown receiver", "payment receiver is not registered")
        key = payment.key()
        if key in self.state.claimed_keys:
            raise ProtocolError("already claimed", "payment already settled")
        if self.state.online_balances[receiver_vk] + payment.amount > MAX_U64:
            raise ProtocolError("balance overflow", "claim would overflow balance")
        self.state.online_balances[receiver_vk] += payment.amount
        self.state.claimed_keys.add(key)
        return WireMessage(MsgKind.CLAIM_CONFIRMED, ClaimConfirmed())


class _CachedResponse(Exception):
    def __init__(self, frame: bytes):
        self.frame = frame


_HANDLERS = {
    MsgKind.CLIENT_REGISTER: Server._register_client,
    MsgKind.TA_REGISTER: Server._register_ta,
    MsgKind.DEPOSIT_REQ: Server._deposit,
    MsgKind.WITHDRAW_REQ: Server._withdraw,
    MsgKind.CLAIM_REQ: Server._claim,
}
