"""Ed25519 key handling.

Keys are carried as 32-byte seeds / public keys in lowercase hex so they can
live inside canonical documents. Signatures are deterministic (RFC 8032), so
a fixed key and message always produce the same signature bytes.
"""
from __future__ import annotations

import hashlib
import secrets
from functools import lru_cache

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)


class KeyPair:
    def __init__(self, seed: bytes):
        if len(seed) != 32:
            raise ValueError("Ed25519 seed must be 32 bytes")
        self._seed = seed
        self._private = Ed25519PrivateKey.from_private_bytes(seed)
        self.public_key = self._private.public_key().public_bytes(
            encoding=serialization.Encoding.Raw,
            format=serialization.PublicFormat.Raw,
        ).hex()

    @classmethod
    def generate(cls) -> "KeyPair":
        return cls(secrets.token_bytes(32))

    @classmethod
    def from_label(cls, label: str) -> "KeyPair":
        """Deterministic key for fixtures and demos. Never use for real members."""
        return cls(hashlib.sha256(b"coopledger-fixture:" + label.encode()).digest())

    @classmethod
    def from_hex(cls, seed_hex: str) -> "KeyPair":
        return cls(bytes.fromhex(seed_hex))

    @property
    def seed_hex(self) -> str:
        return self._seed.hex()

    def sign(self, message: bytes) -> str:
        return self._private.sign(message).hex()

    def __repr__(self) -> str:
        return f"KeyPair(public_key={self.public_key[:16]}...)"


@lru_cache(maxsize=65536)
def verify(public_key_hex: str, message: bytes, signature_hex: str) -> bool:
    try:
        key = Ed25519PublicKey.from_public_bytes(bytes.fromhex(public_key_hex))
        key.verify(bytes.fromhex(signature_hex), message)
    except (InvalidSignature, ValueError):
        return False
    return True
