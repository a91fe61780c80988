"""Signing, verification, and certificate predicates.

Ed25519 throughout: deterministic signatures keep canonical encodings stable,
and verification keys and signatures are fixed length, which the codec
enforces. Verification predicates never raise on bad input; they return False.
"""
from __future__ import annotations

import hashlib
from functools import lru_cache
from typing import Optional

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from . import codec
from .errors import CryptoError
from .model import Certificate, CertKind, KeyPair, SK_LEN, VK_LEN

# Security level of the primitives in use (Ed25519, SHA-256).
LAMBDA_BITS = 128

_PRIV_CACHE: dict[bytes, Ed25519PrivateKey] = {}
_PUB_CACHE: dict[bytes, Ed25519PublicKey] = {}


def _priv(sk: bytes) -> Ed25519PrivateKey:
    key = _PRIV_CACHE.get(sk)
    if key is None:
        if not isinstance(sk, bytes) or len(sk) != SK_LEN:
            raise CryptoError("bad key material", "signing key must be 32 bytes")
        try:
            key = Ed25519PrivateKey.from_private_bytes(sk)
        except Exception:
            raise CryptoError("bad key material", "invalid signing key") from None
        _PRIV_CACHE[sk] = key
    return key


def _pub(vk: bytes) -> Optional[Ed25519PublicKey]:
    key = _PUB_CACHE.get(vk)
    if key is None:
        if not isinstance(vk, bytes) or len(vk) != VK_LEN:
            return None
        try:
            key = Ed25519PublicKey.from_public_bytes(vk)
        except Exception:
            return None
        _PUB_CACHE[vk] = key
    return key


def keypair_from_seed(seed: bytes) -> KeyPair:
    """Deterministic keypair from 32 seed bytes."""
    if len(seed) != SK_LEN:
        raise CryptoError("bad key material", "seed must be 32 bytes")
    vk = _priv(seed).public_key().public_bytes_raw()
    return KeyPair(vk=vk, sk=seed)


def keygen(rng) -> KeyPair:
    """Fresh keypair from an entropy source with a .randbytes(n) method
    (random.Random or secrets-backed equivalents)."""
    return keypair_from_seed(rng.randbytes(SK_LEN))


@lru_cache(maxsize=1 << 17)
def _sign_cached(msg: bytes, sk: bytes) -> bytes:
    return _priv(sk).sign(msg)


def sign(msg: bytes, sk: bytes) -> bytes:
    # Ed25519 signing is deterministic, so repeated signing of the same
    # message under the same key is a lookup, not a second computation
    return _sign_cached(msg, sk)


@lru_cache(maxsize=1 << 17)
def _verify_cached(msg: bytes, sig: bytes, vk: bytes) -> bool:
    pub = _pub(vk)
    if pub is None:
        return False
    try:
        pub.verify(sig, msg)
        return True
    except InvalidSignature:
        return False
    except Exception:
        return False


def sig_verify(msg: bytes, sig: bytes, vk: bytes) -> bool:
    # a pure predicate of its inputs; memoized because certificates and
    # payment signatures are re-checked many times along a protocol round
    if not (isinstance(msg, bytes) and isinstance(sig, bytes) and isinstance(vk, bytes)):
        return False
    return _verify_cached(msg, sig, vk)


def hash_bytes(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


# --- certificate issuance and verification ---


def issue_cert(vk: bytes, kind: CertKind, issuer_sk: bytes) -> Certificate:
    return Certificate(vk=vk, kind=kind, sig=sign(codec.signed_cert(vk, kind), issuer_sk))


def cert_verify(cert: Certificate, issuer_vk: bytes) -> bool:
    """True iff cert binds a UA key and its signature checks under issuer_vk."""
    if cert.kind is not CertKind.UA:
        return False
    return sig_verify(codec.signed_cert(cert.vk, CertKind.UA), cert.sig, issuer_vk)


def hw_cert_verify(cert: Certificate, issuer_vk: bytes) -> bool:
    """True iff cert binds a TEE-held key and its signature checks under issuer_vk."""
    if cert.kind is not CertKind.TA:
        return False
    return sig_verify(codec.signed_cert(cert.vk, CertKind.TA), cert.sig, issuer_vk)


def any_cert_verify(cert: Certificate, issuer_vk: bytes) -> bool:
    return cert_verify(cert, issuer_vk) or hw_cert_verify(cert, issuer_vk)


def oem_cert_verify(ta_vk: bytes, attestation: bytes, device_vk: bytes, model: str) -> bool:
    """True iff attestation binds ta_vk to the device: a signature by the
    device key over (ta_vk, "Secure Device", model)."""
    return sig_verify(codec.signed_attestation(ta_vk, model), attestation, device_vk)


def device_cert_verify(device_vk: bytes, model: str, oem_sig: bytes, root_vk: bytes) -> bool:
    """True iff the OEM root vouches for (device_vk, model)."""
    return sig_verify(codec.signed_device_cert(device_vk, model), oem_sig, root_vk)


def pay_verify(payment, issuer_vk: bytes) -> bool:
    """Offline payment check: the sender certificate is a valid TEE
    certificate under issuer_vk and the payment signature checks under the
    sender's key. Needs no connectivity, only the issuer's public key."""
    if not hw_cert_verify(payment.sender, issuer_vk):
        return False
    return sig_verify(codec.payment_signed_bytes(payment), payment.sig, payment.sender.vk)
