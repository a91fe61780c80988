"""Core data model: protocol structures shared by every layer.

Everything here is plain data. Behaviour lives in the modules that own the
corresponding state machine (ta, server, wallet); byte-level rules live in
codec. Keys and signatures are raw bytes so that state objects stay cheap to
copy and snapshot.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Optional

# Ed25519 sizes. The codec enforces these on decode so malformed key or
# signature material is rejected before any verification runs.
VK_LEN = 32
SK_LEN = 32
SIG_LEN = 64
DIGEST_LEN = 32

MAX_U64 = 2**64 - 1

# Single format-version byte carried at the front of every top-level encoding
# and of every secure-store blob. Bumping it invalidates old bytes on purpose.
FORMAT_VERSION = 1


class CertKind(IntEnum):
    """Who a certificate speaks for: an untrusted app key or a TEE-held key."""

    UA = 1
    TA = 2


class MsgKind(IntEnum):
    CLIENT_REGISTER = 1
    CLIENT_REGISTER_ACK = 2
    TA_REGISTER = 3
    TA_REGISTER_ACK = 4
    DEPOSIT_REQ = 5
    DEPOSIT_CONFIRMED = 6
    WITHDRAW_REQ = 7
    WITHDRAW_CONFIRMED = 8
    PAY_REQ = 9
    PAYMENT_TRANSFER = 10
    PAY_CONFIRMED = 11
    CLAIM_REQ = 12
    CLAIM_CONFIRMED = 13


@dataclass(frozen=True)
class KeyPair:
    vk: bytes
    sk: bytes


@dataclass(frozen=True)
class Certificate:
    """Server-issued binding of a verification key to a key kind."""

    vk: bytes
    kind: CertKind
    sig: bytes


@dataclass(frozen=True)
class PaymentKey:
    """Log identity of a payment: (sender vk, sender payment counter)."""

    sender_vk: bytes
    index: int

    def sort_key(self) -> tuple:
        return (self.sender_vk, self.index)


@dataclass(frozen=True, eq=False)
class Payment:
    """Offline payment object, signed by the sender's TEE key.

    The signature covers exactly (amount, sender, receiver, index).
    created_at is unsigned metadata; two payments that agree on the signed
    fields are equal regardless of it.
    """

    amount: int
    sender: Certificate
    receiver: Certificate
    index: int
    sig: bytes
    created_at: Optional[int] = None

    def key(self) -> PaymentKey:
        return PaymentKey(self.sender.vk, self.index)

    def _signed_fields(self) -> tuple:
        return (self.amount, self.sender, self.receiver, self.index)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Payment):
            return NotImplemented
        return self._signed_fields() == other._signed_fields()

    def __hash__(self) -> int:
        return hash(self._signed_fields())


@dataclass(frozen=True)
class DeviceDescriptor:
    """Public half of a device identity: key, model string, OEM root signature."""

    vk: bytes
    model: str
    oem_sig: bytes


@dataclass(frozen=True)
class WithdrawConfirmation:
    """TEE-signed debit receipt: (amount, sync counter) under the TA key."""

    amount: int
    counter: int
    sig: bytes


@dataclass(frozen=True)
class BalanceAttestation:
    """TEE-signed balance statement: (balance, sync counter) under the TA key."""

    balance: int
    counter: int
    sig: bytes


# --- wire message bodies, one per MsgKind, fields in wire order ---


@dataclass(frozen=True)
class ClientRegister:
    vk: bytes


@dataclass(frozen=True)
class ClientRegisterAck:
    cert: Certificate


@dataclass(frozen=True)
class TaRegister:
    device: DeviceDescriptor
    ta_vk: bytes
    client_vk: bytes
    attestation: bytes


@dataclass(frozen=True)
class TaRegisterAck:
    cert: Certificate


@dataclass(frozen=True)
class DepositReq:
    amount: int


@dataclass(frozen=True)
class DepositConfirmed:
    amount: int
    counter: int
    sig: bytes


@dataclass(frozen=True)
class WithdrawReq:
    amount: int
    counter: int
    sig: bytes


@dataclass(frozen=True)
class WithdrawConfirmed:
    pass


@dataclass(frozen=True)
class PayReq:
    amount: int
    receiver: Certificate


@dataclass(frozen=True)
class PaymentTransfer:
    payment: Payment


@dataclass(frozen=True)
class PayConfirmed:
    pass


@dataclass(frozen=True)
class ClaimReq:
    payment: Payment


@dataclass(frozen=True)
class ClaimConfirmed:
    pass


BODY_TYPES = {
    MsgKind.CLIENT_REGISTER: ClientRegister,
    MsgKind.CLIENT_REGISTER_ACK: ClientRegisterAck,
    MsgKind.TA_REGISTER: TaRegister,
    MsgKind.TA_REGISTER_ACK: TaRegisterAck,
    MsgKind.DEPOSIT_REQ: DepositReq,
    MsgKind.DEPOSIT_CONFIRMED: DepositConfirmed,
    MsgKind.WITHDRAW_REQ: WithdrawReq,
    MsgKind.WITHDRAW_CONFIRMED: WithdrawConfirmed,
    MsgKind.PAY_REQ: PayReq,
    MsgKind.PAYMENT_TRANSFER: PaymentTransfer,
    MsgKind.PAY_CONFIRMED: PayConfirmed,
    MsgKind.CLAIM_REQ: ClaimReq,
    MsgKind.CLAIM_CONFIRMED: ClaimConfirmed,
}

KIND_OF_BODY = {t: k for k, t in BODY_TYPES.items()}


@dataclass(frozen=True)
class AuthEnvelope:
    """Request authentication: sender key, per-sender nonce, signature over
    (message kind, body, nonce)."""

    sender_vk: bytes
    nonce: int
    sig: bytes


@dataclass(frozen=True)
class WireMessage:
    kind: MsgKind
    body: object
    auth: Optional[AuthEnvelope] = None


# Client -> server kinds that must carry an AuthEnvelope.
AUTHED_KINDS = frozenset(
    {
        MsgKind.CLIENT_REGISTER,
        MsgKind.TA_REGISTER,
        MsgKind.DEPOSIT_REQ,
        MsgKind.WITHDRAW_REQ,
        MsgKind.CLAIM_REQ,
    }
)


# --- persistent state snapshots ---


class SyncDirection(IntEnum):
    DEPOSIT = 1
    WITHDRAW = 2


@dataclass
class SyncRecord:
    """The most recent counter-consuming round the trusted app took part in.

    Kept so an interrupted round can be finished instead of wedging the
    counter: an exact redelivery of an already-applied deposit confirmation
    is recognized as a no-op, and a withdraw confirmation that never reached
    the server can be re-issued. settled means the server is known to have
    processed the round; deposits are settled by construction.
    """

    direction: SyncDirection
    amount: int
    counter: int
    sig: bytes
    settled: bool


@dataclass
class TAState:
    """Everything the trusted app persists between invocations."""

    keys: KeyPair
    balance: int = 0
    cert: Optional[Certificate] = None
    received_keys: set = field(default_factory=set)
    sync_counter: int = 0
    payment_counter: int = 0
    last_sync: Optional[SyncRecord] = None


@dataclass
class ServerState:
    keys: KeyPair
    # ua_vk -> ta_vk or None while the client has no TA on file
    registry: dict = field(default_factory=dict)
    online_balances: dict = field(default_factory=dict)
    sync_counters: dict = field(default_factory=dict)
    claimed_keys: set = field(default_factory=set)
    oem_roots: set = field(default_factory=set)
    last_nonces: dict = field(default_factory=dict)
    # sender_vk -> (nonce, request sig, encoded response frame); the request
    # signature pins the cache hit to an identical retry, not just the nonce
    response_cache: dict = field(default_factory=dict)


@dataclass
class WalletState:
    keys: KeyPair
    cert: Optional[Certificate] = None
    received_keys: set = field(default_factory=set)
    inbox: list = field(default_factory=list)
    claimed: list = field(default_factory=list)
    next_nonce: int = 1
    # encoded frame awaiting server confirmation, kept for identical retry
    pending_frame: Optional[bytes] = None
