"""Device and OEM emulation.

An OEM authority holds a root keypair and endorses device keys. A device
identity models what ships in hardware: a device keypair in ROM, a model
string, the OEM endorsement over (device key, model), and the per-device
secret that keys the replay-protected secure store. The trusted OS primitive
tos_attest signs the installed trusted app's verification key so a remote
verifier can check, via the OEM chain, that the key lives in a TEE.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from . import codec, crypto
from .errors import ProtocolError
from .model import DeviceDescriptor, KeyPair, SK_LEN


@dataclass
class DeviceIdentity:
    keys: KeyPair
    model: str
    oem_sig: bytes
    store_secret: bytes
    ta_installed: bool = False

    def descriptor(self) -> DeviceDescriptor:
        return DeviceDescriptor(self.keys.vk, self.model, self.oem_sig)

    def install_ta(self) -> None:
        self.ta_installed = True

    def tos_attest(self, ta_vk: bytes) -> bytes:
        """Trusted-OS attestation: device signature binding ta_vk to this
        device's TEE. Refuses when no trusted app is installed."""
        if not self.ta_installed:
            raise ProtocolError("no TA", "no trusted app installed on this device")
        return crypto.sign(codec.signed_attestation(ta_vk, self.model), self.keys.sk)


@dataclass
class OemAuthority:
    """Manufacturer root of trust. The server is provisioned with root_vk."""

    keys: KeyPair

    @classmethod
    def create(cls, rng) -> "OemAuthority":
        return cls(keys=crypto.keygen(rng))

    @property
    def root_vk(self) -> bytes:
        return self.keys.vk

    def make_device(self, model: str, rng) -> DeviceIdentity:
        keys = crypto.keygen(rng)
        oem_sig = crypto.sign(codec.signed_device_cert(keys.vk, model), self.keys.sk)
        return DeviceIdentity(keys=keys, model=model, oem_sig=oem_sig, store_secret=rng.randbytes(SK_LEN))
