"""TEE-hosted trusted app: rollback-protected storage and the payment logic
that runs inside the enclave.

The secure store emulates replay-protected memory: an authenticated,
encrypted blob at rest plus a monotonically increasing counter held by the
"hardware" engine, outside adversary reach. Every trusted-app operation loads
state fresh from the store, validates, mutates, persists, and only then
releases its output, so a crash between persist and release can lose an
output but never double-release one.
"""
from __future__ import annotations

import hashlib
import hmac
from typing import Callable, Optional

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from . import codec, crypto
from .device import DeviceIdentity
from .errors import ProtocolError, StoreError
from .model import (
    BalanceAttestation,
    Certificate,
    MAX_U64,
    Payment,
    SyncDirection,
    SyncRecord,
    TAState,
    WithdrawConfirmation,
)

_STORE_VERSION = 1
_MAC_LEN = 32
_HEADER_LEN = 1 + 8 + _MAC_LEN  # version, counter, mac


class SecureStore:
    """Replay-protected persistent blob.

    Blob layout: format-version byte, counter (8 bytes big-endian), MAC
    (32 bytes, over version + counter + ciphertext), ciphertext. The engine
    counter lives outside the blob; a read whose stored counter differs from
    the engine's fails. `blob` is deliberately public: the simulator uses it
    for snapshot/restore attacks, mirroring an adversary with flash access.
    """

    def __init__(self, secret: bytes):
        self._enc_key = hmac.new(secret, b"opspay-store-enc", hashlib.sha256).digest()
        self._mac_key = hmac.new(secret, b"opspay-store-mac", hashlib.sha256).digest()
        self._engine_counter = 0
        self.blob: Optional[bytes] = None

    @property
    def is_empty(self) -> bool:
        return self.blob is None

    @property
    def engine_counter(self) -> int:
        return self._engine_counter

    def _keystream(self, counter: int, data: bytes) -> bytes:
        nonce = b"opsstore" + counter.to_bytes(8, "big")
        enc = Cipher(algorithms.AES(self._enc_key), modes.CTR(nonce)).encryptor()
        return enc.update(data) + enc.finalize()

    def write(self, data: bytes) -> None:
        if self._engine_counter >= MAX_U64:
            raise StoreError("counter overflow", "secure store counter exhausted")
        counter = self._engine_counter + 1
        ciphertext = self._keystream(counter, data)
        header = bytes([_STORE_VERSION]) + counter.to_bytes(8, "big")
        mac = hmac.new(self._mac_key, header + ciphertext, hashlib.sha256).digest()
        # build the full blob first so the visible write is a single assignment
        self.blob = header + mac + ciphertext
        self._engine_counter = counter

    def read(self) -> bytes:
        if self.blob is None:
            raise StoreError("corrupt state", "store is empty")
        if len(self.blob) < _HEADER_LEN:
            raise StoreError("corrupt state", "blob too short")
        header, mac, ciphertext = (
            self.blob[:9],
            self.blob[9:_HEADER_LEN],
            self.blob[_HEADER_LEN:],
        )
        expect = hmac.new(self._mac_key, header + ciphertext, hashlib.sha256).digest()
        if not hmac.compare_digest(mac, expect):
            raise StoreError("tamper detected", "blob MAC mismatch")
        if header[0] != _STORE_VERSION:
            raise StoreError("corrupt state", f"unknown store version {header[0]}")
        counter = int.from_bytes(header[1:9], "big")
        if counter != self._engine_counter:
            raise StoreError(
                "rollback detected",
                f"stored counter {counter} != engine counter {self._engine_counter}",
            )
        return self._keystream(counter, ciphertext)


class TrustedApp:
    """The enclave program. All money state lives in the secure store; this
    object holds only the store handle, the server's verification key, and an
    optional fault hook used by tests to crash between persist and release."""

    def __init__(
        self,
        device: DeviceIdentity,
        store: SecureStore,
        server_vk: bytes,
        fault_hook: Optional[Callable[[str], None]] = None,
    ):
        self.device = device
        self.store = store
        self.server_vk = server_vk
        self.fault_hook = fault_hook
        device.install_ta()

    # --- state plumbing ---

    def _load(self) -> TAState:
        if self.store.is_empty:
            raise ProtocolError("not activated", "trusted app has not been initialized")
        return codec.decode(self.store.read(), TAState)

    def _persist(self, state: TAState) -> None:
        self.store.write(codec.encode(state))

    def _active(self) -> TAState:
        state = self._load()
        if state.cert is None:
            raise ProtocolError("not activated", "no certificate installed")
        return state

    def _fault(self, point: str) -> None:
        if self.fault_hook is not None:
            self.fault_hook(point)

    # --- operations ---

    def init(self, rng) -> tuple[bytes, bytes]:
        """Generate the enclave keypair, persist zeroed state, and return
        (vk, trusted-OS attestation over vk)."""
        if not self.store.is_empty:
            raise ProtocolError("already initialized", "init may only run once")
        keys = crypto.keygen(rng)
        self._persist(TAState(keys=keys))
        attestation = self.device.tos_attest(keys.vk)
        return keys.vk, attestation

    def cert_init(self, cert: Certificate) -> None:
        state = self._load()
        if not crypto.hw_cert_verify(cert, self.server_vk):
            raise ProtocolError("invalid certificate", "certificate fails TEE verification")
        if cert.vk != state.keys.vk:
            raise ProtocolError("certificate not mine", "certificate names a different key")
        state.cert = cert
        self._persist(state)

    def deposit(self, amount: int, counter: int, sig: bytes) -> None:
        state = self._active()
        last = state.last_sync
        if (
            last is not None
            and last.direction is SyncDirection.DEPOSIT
            and (amount, counter, sig) == (last.amount, last.counter, last.sig)
        ):
            return  # exact redelivery of the confirmation already applied
        if counter != state.sync_counter + 1:
            raise ProtocolError(
                "counter out of sync",
                f"confirmation counter {counter}, expected {state.sync_counter + 1}",
            )
        preimage = codec.signed_deposit_confirmation(state.keys.vk, amount, counter)
        if amount < 1 or not crypto.sig_verify(preimage, sig, self.server_vk):
            raise ProtocolError("invalid confirmation", "bad server signature on deposit")
        if state.balance + amount > MAX_U64:
            raise ProtocolError("balance overflow", "deposit would overflow balance")
        state.balance += amount
        state.sync_counter = counter
        state.last_sync = SyncRecord(SyncDirection.DEPOSIT, amount, counter, sig, True)
        self._persist(state)
        self._fault("deposit:persisted")

    def withdraw(self, amount: int) -> WithdrawConfirmation:
        state = self._active()
        if amount < 1:
            raise ProtocolError("bad amount", "withdraw amount must be at least 1")
        if amount > state.balance:
            raise ProtocolError("insufficient offline funds", f"balance {state.balance} < {amount}")
        if state.sync_counter >= MAX_U64:
            raise ProtocolError("counter overflow", "sync counter exhausted")
        state.balance -= amount
        state.sync_counter += 1
        sig = crypto.sign(codec.signed_withdraw_confirmation(amount, state.sync_counter), state.keys.sk)
        confirmation = WithdrawConfirmation(amount, state.sync_counter, sig)
        # the confirmation is persisted alongside the debit so a crash before
        # the host ever sees it leaves something to re-issue
        state.last_sync = SyncRecord(SyncDirection.WITHDRAW, amount, state.sync_counter, sig, False)
        self._persist(state)
        self._fault("withdraw:persisted")
        return confirmation

    def unsettled_withdrawal(self) -> Optional[SyncRecord]:
        """The last withdraw confirmation unless the server is known to have
        accepted it. The host must drain this before starting new rounds."""
        state = self._active()
        last = state.last_sync
        if last is not None and last.direction is SyncDirection.WITHDRAW and not last.settled:
            return last
        return None

    def withdrawal_settled(self) -> None:
        state = self._active()
        last = state.last_sync
        if last is not None and last.direction is SyncDirection.WITHDRAW and not last.settled:
            last.settled = True
            self._persist(state)

    def pay(self, amount: int, receiver: Certificate, created_at: Optional[int] = None) -> Payment:
        state = self._active()
        if not crypto.any_cert_verify(receiver, self.server_vk):
            raise ProtocolError("bad receiver", "receiver certificate fails verification")
        if amount < 1:
            raise ProtocolError("bad amount", "payment amount must be at least 1")
        if amount > state.balance:
            raise ProtocolError("insufficient offline funds", f"balance {state.balance} < {amount}")
        if state.payment_counter >= MAX_U64:
            raise ProtocolError("counter overflow", "payment counter exhausted")
        state.balance -= amount
        state.payment_counter += 1
        sig = crypto.sign(
            codec.signed_payment(amount, state.cert, receiver, state.payment_counter),
            state.keys.sk,
        )
        payment = Payment(amount, state.cert, receiver, state.payment_counter, sig, created_at)
        self._persist(state)
        self._fault("pay:persisted")
        return payment

    def collect(self, payment: Payment) -> None:
        state = self._active()
        if not crypto.pay_verify(payment, self.server_vk):
            raise ProtocolError("invalid payment", "payment fails verification")
        if payment.receiver != state.cert:
            raise ProtocolError("not addressed to me", "payment receiver is a different certificate")
        key = payment.key()
        if key in state.received_keys:
            raise ProtocolError("already collected", "payment already in received log")
        if state.balance + payment.amount > MAX_U64:
            raise ProtocolError("balance overflow", "collect would overflow balance")
        state.balance += payment.amount
        state.received_keys.add(key)
        self._persist(state)

    def get_balance(self) -> BalanceAttestation:
        state = self._active()
        sig = crypto.sign(codec.signed_balance(state.balance, state.sync_counter), state.keys.sk)
        return BalanceAttestation(state.balance, state.sync_counter, sig)

    def cert(self) -> Certificate:
        """The server-issued certificate this trusted app presents to payers."""
        state = self._active()
        assert state.cert is not None
        return state.cert
