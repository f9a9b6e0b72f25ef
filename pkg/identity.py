"""
Peer identities, key pairs and the signing/verification contract.

Signatures are Ed25519 (64-byte signatures, 32-byte public keys); a peer
is identified by the SHA-256 fingerprint of its public key.
"""

import base64
import hashlib
import logging
import os
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property, lru_cache
from typing import Optional

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric import ed25519

from errors import MalformedKey, MalformedSignature, SeedTooShort

logger = logging.getLogger(__name__)

PUBLIC_KEY_SIZE = 32
PRIVATE_KEY_SIZE = 32
SIGNATURE_SIZE = 64
MIN_SEED = 32


class Role(str, Enum):
    PEER = 'peer'
    ADMIN = 'admin'


@dataclass(frozen=True, order=True)
class PeerId:
    """Key fingerprint; equality and ordering ignore the role"""
    fingerprint: bytes
    role: Role = field(default=Role.PEER, compare=False)

    def __post_init__(self):
        if len(self.fingerprint) != 32:
            raise MalformedKey("fingerprint must be 32 bytes")

    @property
    def hex(self) -> str:
        return self.fingerprint.hex()

    def short(self) -> str:
        return self.fingerprint.hex()[:8]

    def __str__(self):
        return self.short()

    def __repr__(self):
        return f"PeerId({self.short()}, {self.role.value})"

    @classmethod
    def from_hex(cls, text: str, role: Role = Role.PEER) -> 'PeerId':
        try:
            return cls(bytes.fromhex(text), role)
        except ValueError as e:
            raise MalformedKey(f"bad fingerprint {text!r}: {e}")


def fingerprint(public_key: bytes) -> bytes:
    return hashlib.sha256(public_key).digest()


@dataclass(frozen=True)
class KeyPair:
    private: bytes = field(repr=False)
    public: bytes

    @cached_property
    def _signer(self) -> ed25519.Ed25519PrivateKey:
        return ed25519.Ed25519PrivateKey.from_private_bytes(self.private)

    def peer_id(self, role: Role = Role.PEER) -> PeerId:
        return PeerId(fingerprint(self.public), role)

    @property
    def public_b64(self) -> str:
        return base64.b64encode(self.public).decode('ascii')


def generate_keypair(seed: Optional[bytes] = None) -> KeyPair:
    """Fresh key pair, or a deterministic one derived from a >=32 byte seed"""
    if seed is not None:
        if len(seed) < MIN_SEED:
            raise SeedTooShort(f"seed must be at least {MIN_SEED} bytes, got {len(seed)}")
        private_key = ed25519.Ed25519PrivateKey.from_private_bytes(hashlib.sha256(seed).digest())
    else:
        private_key = ed25519.Ed25519PrivateKey.generate()

    private = private_key.private_bytes(
        encoding=serialization.Encoding.Raw,
        format=serialization.PrivateFormat.Raw,
        encryption_algorithm=serialization.NoEncryption(),
    )
    public = private_key.public_key().public_bytes(
        encoding=serialization.Encoding.Raw,
        format=serialization.PublicFormat.Raw,
    )
    return KeyPair(private, public)


def sign(kp: KeyPair, payload: bytes) -> bytes:
    return kp._signer.sign(payload)


@lru_cache(maxsize=1 << 16)
def _verify_cached(public_key: bytes, payload: bytes, sig: bytes) -> bool:
    try:
        key = ed25519.Ed25519PublicKey.from_public_bytes(public_key)
    except ValueError as e:
        raise MalformedKey(str(e))
    try:
        key.verify(sig, payload)
        return True
    except InvalidSignature:
        return False


def verify(public_key: bytes, payload: bytes, sig: bytes) -> bool:
    """True iff sig is pub's signature over payload; malformed inputs raise"""
    if len(public_key) != PUBLIC_KEY_SIZE:
        raise MalformedKey(f"public key must be {PUBLIC_KEY_SIZE} bytes, got {len(public_key)}")
    if len(sig) != SIGNATURE_SIZE:
        raise MalformedSignature(f"signature must be {SIGNATURE_SIZE} bytes, got {len(sig)}")
    return _verify_cached(bytes(public_key), bytes(payload), bytes(sig))


def save_keypair(path: str, kp: KeyPair):
    """Write the raw private key (mode 0600) and a sibling .pub file"""
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, 'wb') as f:
        f.write(kp.private)
    os.chmod(path, 0o600)
    with open(path + '.pub', 'wb') as f:
        f.write(kp.public)
    logger.info(f"Wrote key pair {kp.peer_id().short()} to {path}")


def load_keypair(path: str) -> KeyPair:
    with open(path, 'rb') as f:
        private = f.read()
    if len(private) != PRIVATE_KEY_SIZE:
        raise MalformedKey(f"{path}: expected {PRIVATE_KEY_SIZE} raw key bytes")
    private_key = ed25519.Ed25519PrivateKey.from_private_bytes(private)
    public = private_key.public_key().public_bytes(
        encoding=serialization.Encoding.Raw,
        format=serialization.PublicFormat.Raw,
    )
    return KeyPair(private, public)


def load_public_key(path: str) -> bytes:
    with open(path, 'rb') as f:
        public = f.read()
    if len(public) != PUBLIC_KEY_SIZE:
        raise MalformedKey(f"{path}: expected {PUBLIC_KEY_SIZE} raw public key bytes")
    return public
