"""Error hierarchy. Every protocol abort carries a short stable code string
that tests and the simulator match on; the message may add detail."""
from __future__ import annotations


class OpsError(Exception):
    """Base class. `code` is the stable, machine-matchable abort reason."""

    def __init__(self, code: str, detail: str = ""):
        self.code = code
        self.detail = detail
        super().__init__(f"{code}: {detail}" if detail else code)


class CryptoError(OpsError):
    pass


class CodecError(OpsError):
    pass


class StoreError(OpsError):
    """Secure-store failures: rollback or tamper detection, bad blobs."""


class ProtocolError(OpsError):
    """Abort in a TA, server, or wallet state machine."""
