"""Canonical deterministic codec.

The encoding is the wire format, the fixture format, and the signature
preimage format, so it must be injective over well-formed values: fields in
declared order, fixed-width big-endian integers, u32-length-prefixed byte
strings, single-byte enum tags, maps and sets sorted by key. Every top-level
encoding starts with the format-version byte and a struct tag byte. Every
signature preimage starts with a NUL-terminated ASCII domain tag unique to
that message kind, so no signed byte string is valid in two contexts.
"""
from __future__ import annotations

import struct
from typing import Optional, Type, TypeVar

from .errors import CodecError
from .model import (
    AUTHED_KINDS,
    AuthEnvelope,
    BODY_TYPES,
    Certificate,
    CertKind,
    ClaimConfirmed,
    ClaimReq,
    ClientRegister,
    ClientRegisterAck,
    DepositConfirmed,
    DepositReq,
    DeviceDescriptor,
    FORMAT_VERSION,
    KeyPair,
    KIND_OF_BODY,
    MAX_U64,
    MsgKind,
    PayConfirmed,
    Payment,
    PaymentKey,
    PaymentTransfer,
    PayReq,
    ServerState,
    SIG_LEN,
    SK_LEN,
    SyncDirection,
    SyncRecord,
    TaRegister,
    TaRegisterAck,
    TAState,
    VK_LEN,
    WalletState,
    WireMessage,
    WithdrawConfirmed,
    WithdrawReq,
)

_STRUCT_TAGS = {
    Certificate: 1,
    Payment: 2,
    PaymentKey: 3,
    WireMessage: 4,
    TAState: 5,
    ServerState: 6,
    WalletState: 7,
}

# Frames larger than this are rejected outright; generous for desk scale.
MAX_FRAME_LEN = 1 << 24


def domain_tag(name: str) -> bytes:
    return b"opspay.v1." + name.encode("ascii") + b"\x00"


class ByteWriter:
    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def u8(self, v: int) -> None:
        if not 0 <= v <= 0xFF:
            raise CodecError("unencodable", f"u8 out of range: {v}")
        self._parts.append(struct.pack(">B", v))

    def u32(self, v: int) -> None:
        if not 0 <= v <= 0xFFFFFFFF:
            raise CodecError("unencodable", f"u32 out of range: {v}")
        self._parts.append(struct.pack(">I", v))

    def u64(self, v: int) -> None:
        if not isinstance(v, int) or not 0 <= v <= MAX_U64:
            raise CodecError("unencodable", f"u64 out of range: {v!r}")
        self._parts.append(struct.pack(">Q", v))

    def lp_bytes(self, b: bytes) -> None:
        if not isinstance(b, (bytes, bytearray)):
            raise CodecError("unencodable", f"expected bytes, got {type(b).__name__}")
        self.u32(len(b))
        self._parts.append(bytes(b))

    def string(self, s: str) -> None:
        self.lp_bytes(s.encode("utf-8"))

    def flag(self, present: bool) -> None:
        self._parts.append(b"\x01" if present else b"\x00")

    def raw(self, b: bytes) -> None:
        self._parts.append(b)

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class ByteReader:
    def __init__(self, data: bytes) -> None:
        self._data = data
        self._pos = 0

    def _take(self, n: int) -> bytes:
        if self._pos + n > len(self._data):
            raise CodecError("malformed", "truncated input")
        out = self._data[self._pos : self._pos + n]
        self._pos += n
        return out

    def u8(self) -> int:
        return self._take(1)[0]

    def u32(self) -> int:
        return struct.unpack(">I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self._take(8))[0]

    def lp_bytes(self) -> bytes:
        n = self.u32()
        return self._take(n)

    def string(self) -> str:
        try:
            return self.lp_bytes().decode("utf-8")
        except UnicodeDecodeError:
            raise CodecError("malformed", "invalid utf-8 string") from None

    def flag(self) -> bool:
        v = self.u8()
        if v not in (0, 1):
            raise CodecError("malformed", f"optional flag must be 0 or 1, got {v}")
        return v == 1

    def expect_end(self) -> None:
        if self._pos != len(self._data):
            raise CodecError("trailing bytes", f"{len(self._data) - self._pos} bytes left over")


def _read_key(r: ByteReader, length: int, what: str) -> bytes:
    b = r.lp_bytes()
    if len(b) != length:
        raise CodecError("malformed", f"{what} must be {length} bytes, got {len(b)}")
    return b


def _read_amount(r: ByteReader, what: str = "amount") -> int:
    v = r.u64()
    if v < 1:
        raise CodecError("malformed", f"{what} must be at least 1")
    return v


def _read_counter(r: ByteReader, what: str = "counter") -> int:
    v = r.u64()
    if v < 1:
        raise CodecError("malformed", f"{what} must be at least 1")
    return v


# --- certificates ---


def _write_cert(w: ByteWriter, cert: Certificate) -> None:
    if len(cert.vk) != VK_LEN or len(cert.sig) != SIG_LEN:
        raise CodecError("unencodable", "bad certificate key or signature length")
    w.lp_bytes(cert.vk)
    w.u8(int(cert.kind))
    w.lp_bytes(cert.sig)


def _read_cert(r: ByteReader) -> Certificate:
    vk = _read_key(r, VK_LEN, "certificate vk")
    kind_raw = r.u8()
    try:
        kind = CertKind(kind_raw)
    except ValueError:
        raise CodecError("malformed", f"unknown certificate kind {kind_raw}") from None
    sig = _read_key(r, SIG_LEN, "certificate signature")
    return Certificate(vk, kind, sig)


# --- payments ---


def _write_payment(w: ByteWriter, p: Payment) -> None:
    if p.amount < 1:
        raise CodecError("unencodable", "payment amount must be at least 1")
    if p.index < 1:
        raise CodecError("unencodable", "payment index must be at least 1")
    w.u64(p.amount)
    _write_cert(w, p.sender)
    _write_cert(w, p.receiver)
    w.u64(p.index)
    if len(p.sig) != SIG_LEN:
        raise CodecError("unencodable", "bad payment signature length")
    w.lp_bytes(p.sig)
    w.flag(p.created_at is not None)
    if p.created_at is not None:
        w.u64(p.created_at)


def _read_payment(r: ByteReader) -> Payment:
    amount = _read_amount(r)
    sender = _read_cert(r)
    receiver = _read_cert(r)
    index = _read_counter(r, "payment index")
    sig = _read_key(r, SIG_LEN, "payment signature")
    created_at = r.u64() if r.flag() else None
    return Payment(amount, sender, receiver, index, sig, created_at)


def _write_payment_key(w: ByteWriter, k: PaymentKey) -> None:
    if len(k.sender_vk) != VK_LEN:
        raise CodecError("unencodable", "bad payment key vk length")
    if k.index < 1:
        raise CodecError("unencodable", "payment key index must be at least 1")
    w.lp_bytes(k.sender_vk)
    w.u64(k.index)


def _read_payment_key(r: ByteReader) -> PaymentKey:
    vk = _read_key(r, VK_LEN, "payment key vk")
    index = _read_counter(r, "payment key index")
    return PaymentKey(vk, index)


# --- wire messages ---


def _write_body(w: ByteWriter, kind: MsgKind, body: object) -> None:
    if kind is MsgKind.CLIENT_REGISTER:
        if len(body.vk) != VK_LEN:
            raise CodecError("unencodable", "bad vk length")
        w.lp_bytes(body.vk)
    elif kind in (MsgKind.CLIENT_REGISTER_ACK, MsgKind.TA_REGISTER_ACK):
        _write_cert(w, body.cert)
    elif kind is MsgKind.TA_REGISTER:
        d = body.device
        if len(d.vk) != VK_LEN or len(body.ta_vk) != VK_LEN or len(body.client_vk) != VK_LEN:
            raise CodecError("unencodable", "bad vk length")
        if len(d.oem_sig) != SIG_LEN or len(body.attestation) != SIG_LEN:
            raise CodecError("unencodable", "bad signature length")
        w.lp_bytes(d.vk)
        w.string(d.model)
        w.lp_bytes(d.oem_sig)
        w.lp_bytes(body.ta_vk)
        w.lp_bytes(body.client_vk)
        w.lp_bytes(body.attestation)
    elif kind is MsgKind.DEPOSIT_REQ:
        if body.amount < 1:
            raise CodecError("unencodable", "amount must be at least 1")
        w.u64(body.amount)
    elif kind in (MsgKind.DEPOSIT_CONFIRMED, MsgKind.WITHDRAW_REQ):
        if body.amount < 1 or body.counter < 1:
            raise CodecError("unencodable", "amount and counter must be at least 1")
        if len(body.sig) != SIG_LEN:
            raise CodecError("unencodable", "bad signature length")
        w.u64(body.amount)
        w.u64(body.counter)
        w.lp_bytes(body.sig)
    elif kind is MsgKind.PAY_REQ:
        if body.amount < 1:
            raise CodecError("unencodable", "amount must be at least 1")
        w.u64(body.amount)
        _write_cert(w, body.receiver)
    elif kind in (MsgKind.PAYMENT_TRANSFER, MsgKind.CLAIM_REQ):
        _write_payment(w, body.payment)
    elif kind in (MsgKind.WITHDRAW_CONFIRMED, MsgKind.PAY_CONFIRMED, MsgKind.CLAIM_CONFIRMED):
        pass
    else:  # pragma: no cover - all kinds handled above
        raise CodecError("unencodable", f"unhandled message kind {kind}")


def _read_body(r: ByteReader, kind: MsgKind) -> object:
    if kind is MsgKind.CLIENT_REGISTER:
        return ClientRegister(_read_key(r, VK_LEN, "vk"))
    if kind is MsgKind.CLIENT_REGISTER_ACK:
        return ClientRegisterAck(_read_cert(r))
    if kind is MsgKind.TA_REGISTER_ACK:
        return TaRegisterAck(_read_cert(r))
    if kind is MsgKind.TA_REGISTER:
        device_vk = _read_key(r, VK_LEN, "device vk")
        model = r.string()
        oem_sig = _read_key(r, SIG_LEN, "oem signature")
        ta_vk = _read_key(r, VK_LEN, "ta vk")
        client_vk = _read_key(r, VK_LEN, "client vk")
        attestation = _read_key(r, SIG_LEN, "attestation")
        return TaRegister(DeviceDescriptor(device_vk, model, oem_sig), ta_vk, client_vk, attestation)
    if kind is MsgKind.DEPOSIT_REQ:
        return DepositReq(_read_amount(r))
    if kind is MsgKind.DEPOSIT_CONFIRMED:
        return DepositConfirmed(_read_amount(r), _read_counter(r), _read_key(r, SIG_LEN, "signature"))
    if kind is MsgKind.WITHDRAW_REQ:
        return WithdrawReq(_read_amount(r), _read_counter(r), _read_key(r, SIG_LEN, "signature"))
    if kind is MsgKind.WITHDRAW_CONFIRMED:
        return WithdrawConfirmed()
    if kind is MsgKind.PAY_REQ:
        return PayReq(_read_amount(r), _read_cert(r))
    if kind is MsgKind.PAYMENT_TRANSFER:
        return PaymentTransfer(_read_payment(r))
    if kind is MsgKind.PAY_CONFIRMED:
        return PayConfirmed()
    if kind is MsgKind.CLAIM_REQ:
        return ClaimReq(_read_payment(r))
    if kind is MsgKind.CLAIM_CONFIRMED:
        return ClaimConfirmed()
    raise CodecError("malformed", f"unhandled message kind {kind}")  # pragma: no cover


def _write_wire(w: ByteWriter, msg: WireMessage) -> None:
    expected_body = BODY_TYPES[msg.kind]
    if type(msg.body) is not expected_body:
        raise CodecError("unencodable", f"body type {type(msg.body).__name__} does not match {msg.kind.name}")
    w.u8(int(msg.kind))
    _write_body(w, msg.kind, msg.body)
    w.flag(msg.auth is not None)
    if msg.auth is not None:
        if len(msg.auth.sender_vk) != VK_LEN or len(msg.auth.sig) != SIG_LEN:
            raise CodecError("unencodable", "bad auth envelope lengths")
        w.lp_bytes(msg.auth.sender_vk)
        w.u64(msg.auth.nonce)
        w.lp_bytes(msg.auth.sig)


def _read_wire(r: ByteReader) -> WireMessage:
    kind_raw = r.u8()
    try:
        kind = MsgKind(kind_raw)
    except ValueError:
        raise CodecError("malformed", f"unknown message kind {kind_raw}") from None
    body = _read_body(r, kind)
    auth = None
    if r.flag():
        sender_vk = _read_key(r, VK_LEN, "auth vk")
        nonce = r.u64()
        sig = _read_key(r, SIG_LEN, "auth signature")
        auth = AuthEnvelope(sender_vk, nonce, sig)
    return WireMessage(kind, body, auth)


# --- state snapshots ---


def _write_keypair(w: ByteWriter, keys: KeyPair) -> None:
    if len(keys.vk) != VK_LEN or len(keys.sk) != SK_LEN:
        raise CodecError("unencodable", "bad keypair lengths")
    w.lp_bytes(keys.vk)
    w.lp_bytes(keys.sk)


def _read_keypair(r: ByteReader) -> KeyPair:
    vk = _read_key(r, VK_LEN, "vk")
    sk = _read_key(r, SK_LEN, "sk")
    return KeyPair(vk, sk)


def _write_key_set(w: ByteWriter, keys: set) -> None:
    w.u32(len(keys))
    for k in sorted(keys, key=PaymentKey.sort_key):
        _write_payment_key(w, k)


def _read_key_set(r: ByteReader) -> set:
    return {_read_payment_key(r) for _ in range(r.u32())}


def _write_sync_record(w: ByteWriter, rec: SyncRecord) -> None:
    w.u8(int(rec.direction))
    w.u64(rec.amount)
    w.u64(rec.counter)
    w.lp_bytes(rec.sig)
    w.flag(rec.settled)


def _read_sync_record(r: ByteReader) -> SyncRecord:
    raw = r.u8()
    try:
        direction = SyncDirection(raw)
    except ValueError:
        raise CodecError("malformed", f"sync direction {raw} unknown")
    amount = _read_amount(r)
    counter = r.u64()
    if counter < 1:
        raise CodecError("malformed", "sync record counter must be at least 1")
    sig = _read_key(r, SIG_LEN, "sync sig")
    return SyncRecord(direction, amount, counter, sig, r.flag())


def _write_ta_state(w: ByteWriter, st: TAState) -> None:
    _write_keypair(w, st.keys)
    w.u64(st.balance)
    w.flag(st.cert is not None)
    if st.cert is not None:
        _write_cert(w, st.cert)
    _write_key_set(w, st.received_keys)
    w.u64(st.sync_counter)
    w.u64(st.payment_counter)
    w.flag(st.last_sync is not None)
    if st.last_sync is not None:
        _write_sync_record(w, st.last_sync)


def _read_ta_state(r: ByteReader) -> TAState:
    keys = _read_keypair(r)
    balance = r.u64()
    cert = _read_cert(r) if r.flag() else None
    received = _read_key_set(r)
    sync_counter = r.u64()
    payment_counter = r.u64()
    last_sync = _read_sync_record(r) if r.flag() else None
    return TAState(keys, balance, cert, received, sync_counter, payment_counter, last_sync)


def _write_server_state(w: ByteWriter, st: ServerState) -> None:
    _write_keypair(w, st.keys)
    w.u32(len(st.registry))
    for ua_vk in sorted(st.registry):
        ta_vk = st.registry[ua_vk]
        w.lp_bytes(ua_vk)
        w.flag(ta_vk is not None)
        if ta_vk is not None:
            w.lp_bytes(ta_vk)
    for table in (st.online_balances, st.sync_counters):
        w.u32(len(table))
        for vk in sorted(table):
            w.lp_bytes(vk)
            w.u64(table[vk])
    _write_key_set(w, st.claimed_keys)
    w.u32(len(st.oem_roots))
    for root in sorted(st.oem_roots):
        w.lp_bytes(root)
    w.u32(len(st.last_nonces))
    for vk in sorted(st.last_nonces):
        w.lp_bytes(vk)
        w.u64(st.last_nonces[vk])
    w.u32(len(st.response_cache))
    for vk in sorted(st.response_cache):
        nonce, req_sig, frame = st.response_cache[vk]
        w.lp_bytes(vk)
        w.u64(nonce)
        w.lp_bytes(req_sig)
        w.lp_bytes(frame)


def _read_server_state(r: ByteReader) -> ServerState:
    keys = _read_keypair(r)
    registry = {}
    for _ in range(r.u32()):
        ua_vk = _read_key(r, VK_LEN, "registry vk")
        registry[ua_vk] = _read_key(r, VK_LEN, "registry ta vk") if r.flag() else None
    balances = {_read_key(r, VK_LEN, "vk"): r.u64() for _ in range(r.u32())}
    counters = {_read_key(r, VK_LEN, "vk"): r.u64() for _ in range(r.u32())}
    claimed = _read_key_set(r)
    roots = {_read_key(r, VK_LEN, "oem root") for _ in range(r.u32())}
    nonces = {_read_key(r, VK_LEN, "vk"): r.u64() for _ in range(r.u32())}
    cache = {}
    for _ in range(r.u32()):
        vk = _read_key(r, VK_LEN, "vk")
        nonce = r.u64()
        req_sig = _read_key(r, SIG_LEN, "request sig")
        cache[vk] = (nonce, req_sig, r.lp_bytes())
    return ServerState(keys, registry, balances, counters, claimed, roots, nonces, cache)


def _write_wallet_state(w: ByteWriter, st: WalletState) -> None:
    _write_keypair(w, st.keys)
    w.flag(st.cert is not None)
    if st.cert is not None:
        _write_cert(w, st.cert)
    _write_key_set(w, st.received_keys)
    for plist in (st.inbox, st.claimed):
        w.u32(len(plist))
        for p in plist:
            _write_payment(w, p)
    w.u64(st.next_nonce)
    w.flag(st.pending_frame is not None)
    if st.pending_frame is not None:
        w.lp_bytes(st.pending_frame)


def _read_wallet_state(r: ByteReader) -> WalletState:
    keys = _read_keypair(r)
    cert = _read_cert(r) if r.flag() else None
    received = _read_key_set(r)
    inbox = [_read_payment(r) for _ in range(r.u32())]
    claimed = [_read_payment(r) for _ in range(r.u32())]
    next_nonce = r.u64()
    pending = r.lp_bytes() if r.flag() else None
    return WalletState(keys, cert, received, inbox, claimed, next_nonce, pending)


_WRITERS = {
    Certificate: _write_cert,
    Payment: _write_payment,
    PaymentKey: _write_payment_key,
    WireMessage: _write_wire,
    TAState: _write_ta_state,
    ServerState: _write_server_state,
    WalletState: _write_wallet_state,
}

_READERS = {
    Certificate: _read_cert,
    Payment: _read_payment,
    PaymentKey: _read_payment_key,
    WireMessage: _read_wire,
    TAState: _read_ta_state,
    ServerState: _read_server_state,
    WalletState: _read_wallet_state,
}

T = TypeVar("T")


def encode(value: object) -> bytes:
    writer_fn = _WRITERS.get(type(value))
    if writer_fn is None:
        raise CodecError("unencodable", f"no encoding for {type(value).__name__}")
    w = ByteWriter()
    w.u8(FORMAT_VERSION)
    w.u8(_STRUCT_TAGS[type(value)])
    writer_fn(w, value)
    return w.getvalue()


def decode(data: bytes, expected: Type[T]) -> T:
    reader_fn = _READERS.get(expected)
    if reader_fn is None:
        raise CodecError("malformed", f"no decoding for {expected.__name__}")
    r = ByteReader(data)
    version = r.u8()
    if version != FORMAT_VERSION:
        raise CodecError("bad version", f"format version {version} not supported")
    tag = r.u8()
    if tag != _STRUCT_TAGS[expected]:
        raise CodecError("wrong kind", f"expected struct tag {_STRUCT_TAGS[expected]}, got {tag}")
    value = reader_fn(r)
    r.expect_end()
    return value


# --- signature preimages ---


def signed_cert(vk: bytes, kind: CertKind) -> bytes:
    w = ByteWriter()
    if kind is CertKind.UA:
        w.raw(domain_tag("cert.ua"))
        w.lp_bytes(vk)
    else:
        w.raw(domain_tag("cert.ta"))
        w.lp_bytes(vk)
        w.string("TA")
    return w.getvalue()


def signed_device_cert(device_vk: bytes, model: str) -> bytes:
    w = ByteWriter()
    w.raw(domain_tag("cert.device"))
    w.lp_bytes(device_vk)
    w.string(model)
    return w.getvalue()


def signed_attestation(ta_vk: bytes, model: str) -> bytes:
    w = ByteWriter()
    w.raw(domain_tag("attest.ops-ta"))
    w.lp_bytes(ta_vk)
    w.string("Secure Device")
    w.string(model)
    return w.getvalue()


def signed_deposit_confirmation(ta_vk: bytes, amount: int, counter: int) -> bytes:
    w = ByteWriter()
    w.raw(domain_tag("confirm.deposit"))
    w.lp_bytes(ta_vk)
    w.u64(amount)
    w.u64(counter)
    return w.getvalue()


def signed_withdraw_confirmation(amount: int, counter: int) -> bytes:
    w = ByteWriter()
    w.raw(domain_tag("confirm.withdraw"))
    w.u64(amount)
    w.u64(counter)
    return w.getvalue()


def signed_balance(balance: int, counter: int) -> bytes:
    w = ByteWriter()
    w.raw(domain_tag("attest.balance"))
    w.u64(balance)
    w.u64(counter)
    return w.getvalue()


def signed_payment(amount: int, sender: Certificate, receiver: Certificate, index: int) -> bytes:
    w = ByteWriter()
    w.raw(domain_tag("payment"))
    w.u64(amount)
    _write_cert(w, sender)
    _write_cert(w, receiver)
    w.u64(index)
    return w.getvalue()


def payment_signed_bytes(p: Payment) -> bytes:
    return signed_payment(p.amount, p.sender, p.receiver, p.index)


def signed_request(kind: MsgKind, body: object, nonce: int) -> bytes:
    bw = ByteWriter()
    _write_body(bw, kind, body)
    w = ByteWriter()
    w.raw(domain_tag("request"))
    w.u8(int(kind))
    w.lp_bytes(bw.getvalue())
    w.u64(nonce)
    return w.getvalue()


def authed_kind(kind: MsgKind) -> bool:
    return kind in AUTHED_KINDS


# --- stream framing ---


def to_frame(data: bytes) -> bytes:
    """Length-prefix an encoded message for transport over a byte stream."""
    if len(data) > MAX_FRAME_LEN:
        raise CodecError("unencodable", "frame too large")
    return struct.pack(">I", len(data)) + data


def read_frame(stream) -> Optional[bytes]:
    """Read one length-prefixed frame from a file-like stream, None at EOF."""
    header = stream.read(4)
    if not header:
        return None
    if len(header) != 4:
        raise CodecError("malformed", "truncated frame header")
    (n,) = struct.unpack(">I", header)
    if n > MAX_FRAME_LEN:
        raise CodecError("malformed", "frame too large")
    data = stream.read(n)
    if len(data) != n:
        raise CodecError("malformed", "truncated frame")
    return data
