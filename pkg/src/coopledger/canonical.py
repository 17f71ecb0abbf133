"""Canonical serialization and digests.

Every hashed or signed document goes through :func:`canonical_bytes`: JSON
with keys sorted, no insignificant whitespace, UTF-8 without ASCII escaping.
Digests are SHA-256 rendered as lowercase hex.
"""
from __future__ import annotations

import hashlib
import json
import re
from fractions import Fraction
from typing import Any

ZERO_HASH = "0" * 64

_HEX64 = re.compile(r"^[0-9a-f]{64}$")


def canonical_bytes(obj: Any) -> bytes:
    return json.dumps(
        obj,
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
        allow_nan=False,
    ).encode("utf-8")


def canonical_text(obj: Any) -> str:
    return canonical_bytes(obj).decode("utf-8")


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def digest_hex(obj: Any) -> str:
    """SHA-256 of the canonical serialization of ``obj``."""
    return sha256_hex(canonical_bytes(obj))


def parse_canonical(raw: bytes) -> Any:
    """Decode ``raw`` and insist it is already in canonical form.

    Raises ``ValueError`` for anything that does not round-trip byte for byte,
    which catches case changes in hex, stray whitespace and escaped variants
    that a lenient parser would silently accept.
    """
    obj = json.loads(raw.decode("utf-8"))
    if canonical_bytes(obj) != raw:
        raise ValueError("not in canonical form")
    return obj


def is_hex_digest(value: Any) -> bool:
    return isinstance(value, str) and bool(_HEX64.match(value))


def fraction_text(value: Fraction) -> str:
    return f"{value.numerator}/{value.denominator}"


def parse_fraction(text: str | Fraction | int) -> Fraction:
    if isinstance(text, Fraction):
        return text
    if isinstance(text, int) and not isinstance(text, bool):
        return Fraction(text)
    if not isinstance(text, str) or not re.fullmatch(r"\d+(/\d+)?", text):
        raise ValueError(f"not an exact rational: {text!r}")
    return Fraction(text)
