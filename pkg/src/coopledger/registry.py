"""Creation-metadata registry and content-addressed repository.

Creation metadata describes how a work was made. It must never carry rights
ownership or licensing terms, and never the work's bytes; the master file
lives in the repository and is referenced only by ``asset_digest``.
"""
from __future__ import annotations

import base64
import json
import os
import random
import re
import secrets
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping

from coopledger.canonical import canonical_bytes, is_hex_digest, sha256_hex
from coopledger.errors import (
    Dangling,
    DuplicateWorkId,
    InvalidMetadata,
    InvalidTransaction,
    NotFound,
    PermissionDenied,
)
from coopledger.identity import Action, Identity, Role
from coopledger.ledger import SignedTransaction

BLOCKLIST = frozenset({"owner", "copyright_holder", "rights_share", "license", "royalty"})

# Keys that would smuggle the work itself into the metadata document.
EMBEDDED_KEYS = frozenset({
    "asset_bytes", "asset_data", "audio", "audio_data", "content_bytes",
    "file_bytes", "file_data", "master_file", "mp3", "waveform",
})

_WORK_ID = re.compile(r"^wrk:[A-Z2-7]{26}$")


class CreatorRole(str, Enum):
    COMPOSER = "Composer"
    LYRICIST = "Lyricist"
    PERFORMER = "Performer"


def new_work_id(rng: random.Random | None = None) -> str:
    raw = rng.randbytes(16) if rng is not None else secrets.token_bytes(16)
    return "wrk:" + base64.b32encode(raw).decode("ascii").rstrip("=")


def is_work_id(value: Any) -> bool:
    if not isinstance(value, str) or not _WORK_ID.match(value):
        return False
    body = value[4:]
    try:
        raw = base64.b32decode(body + "======")
    except ValueError:
        return False
    return len(raw) == 16 and base64.b32encode(raw).decode().rstrip("=") == body


@dataclass(frozen=True)
class CreationMetadata:
    work_id: str
    title: str
    creators: tuple[tuple[str, CreatorRole], ...]
    version_label: str = "v1"
    asset_digest: str | None = None
    created_note: str = ""

    def to_doc(self) -> dict:
        return {
            "work_id": self.work_id,
            "title": self.title,
            "creators": [{"member_id": m, "role": CreatorRole(r).value} for m, r in self.creators],
            "version_label": self.version_label,
            "asset_digest": self.asset_digest,
            "created_note": self.created_note,
        }

    @classmethod
    def from_doc(cls, doc: Mapping) -> "CreationMetadata":
        return cls(
            work_id=doc["work_id"],
            title=doc["title"],
            creators=tuple((c["member_id"], CreatorRole(c["role"])) for c in doc["creators"]),
            version_label=doc.get("version_label", "v1"),
            asset_digest=doc.get("asset_digest"),
            created_note=doc.get("created_note", ""),
        )


def _walk(node: Any, path: str = "$"):
    """Yield (path, key, value) for every mapping entry, at any depth."""
    if isinstance(node, Mapping):
        for key, value in node.items():
            sub = f"{path}.{key}"
            yield sub, key, value
            yield from _walk(value, sub)
    elif isinstance(node, (list, tuple)):
        for i, item in enumerate(node):
            yield from _walk(item, f"{path}[{i}]")


def _embedded_values(node: Any, path: str = "$"):
    if isinstance(node, (bytes, bytearray, memoryview)):
        yield path
    elif isinstance(node, str) and node.startswith("data:"):
        yield path
    elif isinstance(node, Mapping):
        for key, value in node.items():
            yield from _embedded_values(value, f"{path}.{key}")
    elif isinstance(node, (list, tuple)):
        for i, item in enumerate(node):
            yield from _embedded_values(item, f"{path}[{i}]")


def validate_creation_metadata(
    doc: Mapping | CreationMetadata, known_members: Iterable[str] | None = None
) -> str | None:
    """Return ``None`` if ``doc`` is acceptable creation metadata, else the reason.

    Rules are checked in a fixed order (blocklist, embedded-asset, creators,
    id-format, fields) and the first violation is reported, e.g.
    ``"blocklist: copyright_holder"`` or ``"creators-empty"``.
    """
    if isinstance(doc, CreationMetadata):
        doc = doc.to_doc()
    if not isinstance(doc, Mapping):
        return "fields: document must be a mapping"

    for _, key, _ in _walk(doc):
        if isinstance(key, str) and key.lower() in BLOCKLIST:
            return f"blocklist: {key}"

    for path, key, value in _walk(doc):
        if isinstance(key, str) and key.lower() in EMBEDDED_KEYS:
            return f"embedded-asset: {path}"
    for path in _embedded_values(doc):
        return f"embedded-asset: {path}"
    digest = doc.get("asset_digest")
    if digest is not None and not is_hex_digest(digest):
        return "embedded-asset: asset_digest must be a 32-byte hex content address"

    creators = doc.get("creators")
    if not creators:
        return "creators-empty"
    if not isinstance(creators, list):
        return "creators-invalid: creators must be a list"
    seen = set()
    for c in creators:
        if not isinstance(c, Mapping) or not isinstance(c.get("member_id"), str):
            return "creators-invalid: each creator needs a member_id"
        if c.get("role") not in {r.value for r in CreatorRole}:
            return f"creators-invalid: role {c.get('role')!r}"
        if (c["member_id"], c["role"]) in seen:
            return f"creators-invalid: duplicate {c['member_id']}"
        seen.add((c["member_id"], c["role"]))
    if known_members is not None:
        known = set(known_members)
        for c in creators:
            if c["member_id"] not in known:
                return f"creators-unknown: {c['member_id']}"

    if not is_work_id(doc.get("work_id")):
        return "id-format: work_id must be 'wrk:' + 26 base32 characters"

    for name in ("title", "version_label"):
        if not isinstance(doc.get(name), str) or not doc.get(name):
            return f"fields: {name} must be a nonempty string"
    if not isinstance(doc.get("created_note", ""), str):
        return "fields: created_note must be text"
    return None


# ---------------------------------------------------------------------------
# repository
# ---------------------------------------------------------------------------


class Repository:
    """Content-addressed object store. Objects may have several owners.

    With ``root`` set, objects live under ``root/<digest>`` and ownership in
    ``root/owners.json``; otherwise everything is kept in memory.
    """

    def __init__(self, root: Path | None = None):
        self.root = Path(root) if root is not None else None
        self._objects: dict[str, bytes] = {}
        self._owners: dict[str, set[str]] = {}
        self._lock = threading.Lock()
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)
            index = self.root / "owners.json"
            if index.exists():
                self._owners = {d: set(o) for d, o in json.loads(index.read_text()).items()}

    def _path(self, digest: str) -> Path:
        return self.root / digest

    def _save_index(self) -> None:
        if self.root is not None:
            tmp = self.root / "owners.json.tmp"
            tmp.write_bytes(canonical_bytes({d: sorted(o) for d, o in self._owners.items()}))
            os.replace(tmp, self.root / "owners.json")

    def put(self, data: bytes, owner: str) -> str:
        digest = sha256_hex(data)
        with self._lock:
            if digest not in self._owners:
                if self.root is not None:
                    self._path(digest).write_bytes(data)
                else:
                    self._objects[digest] = bytes(data)
                self._owners[digest] = set()
            if owner not in self._owners[digest]:
                self._owners[digest].add(owner)
                self._save_index()
        return digest

    def get(self, digest: str) -> bytes:
        """Return the stored bytes as-is; callers that care re-hash them."""
        with self._lock:
            if digest not in self._owners:
                raise NotFound(f"no object {digest}")
            if self.root is not None:
                return self._path(digest).read_bytes()
            return self._objects[digest]

    def __contains__(self, digest: str) -> bool:
        return digest in self._owners

    def __len__(self) -> int:
        return len(self._owners)

    def owned_by(self, owner: str) -> list[str]:
        return sorted(d for d, o in self._owners.items() if owner in o)

    def purge_owner(self, owner: str) -> int:
        """Drop every object claim held by ``owner``; returns how many were dropped."""
        with self._lock:
            purged = 0
            for digest in [d for d, o in self._owners.items() if owner in o]:
                self._owners[digest].discard(owner)
                purged += 1
                if not self._owners[digest]:
                    del self._owners[digest]
                    if self.root is not None:
                        self._path(digest).unlink(missing_ok=True)
                    else:
                        self._objects.pop(digest, None)
            if purged:
                self._save_index()
            return purged

    def tamper(self, digest: str, data: bytes) -> None:
        """Overwrite stored bytes without re-addressing. Test hook for integrity checks."""
        if self.root is not None:
            self._path(digest).write_bytes(data)
        else:
            self._objects[digest] = data


# ---------------------------------------------------------------------------
# registry state
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RegistryEntry:
    work_id: str
    metadata_digest: str
    pointer: str
    registrant: str
    tx_id: str
    logical_time: int
    version_label: str
    creators: tuple[str, ...]

    def to_doc(self) -> dict:
        return {
            "work_id": self.work_id,
            "metadata_digest": self.metadata_digest,
            "pointer": self.pointer,
            "registrant": self.registrant,
            "tx_id": self.tx_id,
            "logical_time": self.logical_time,
            "version_label": self.version_label,
            "creators": list(self.creators),
        }


@dataclass(frozen=True)
class ResolvedWork:
    entry: RegistryEntry
    metadata: dict | None
    digest_ok: bool


def pointer_for(node_id: str, work_id: str) -> str:
    return f"coop://{node_id}/meta/{work_id}"


def work_register_payload(doc: Mapping, metadata_digest: str, pointer: str) -> dict:
    return {
        "work_id": doc["work_id"],
        "metadata_digest": metadata_digest,
        "pointer": pointer,
        "version_label": doc["version_label"],
        "creators": sorted({c["member_id"] for c in doc["creators"]}),
    }


@dataclass
class WorkRegistry:
    identity: Identity
    entries: dict[str, list[RegistryEntry]] = field(default_factory=dict)
    by_tx: dict[str, RegistryEntry] = field(default_factory=dict)

    def may_register(self, member_id: str, creators: Iterable[str]) -> bool:
        return member_id in set(creators) or self.identity.has_role(member_id, Role.PUBLISHER)

    def handle_register(self, tx: SignedTransaction, commit: bool) -> RegistryEntry | None:
        p = tx.payload
        if set(p) != {"work_id", "metadata_digest", "pointer", "version_label", "creators"}:
            raise InvalidTransaction("WorkRegister payload shape")
        if not is_work_id(p["work_id"]) or not is_hex_digest(p["metadata_digest"]):
            raise InvalidTransaction("WorkRegister identifiers malformed")
        if not isinstance(p["pointer"], str) or not p["pointer"].endswith(f"/meta/{p['work_id']}"):
            raise InvalidTransaction("pointer must resolve to the work id")
        creators = p["creators"]
        if not isinstance(creators, list) or not creators:
            raise InvalidMetadata("creators-empty")
        if not self.identity.authorize(tx.author, Action.REGISTER_WORK):
            raise PermissionDenied(f"{tx.author} may not register works")
        for c in creators:
            if c not in self.identity.members or self.identity.members[c].joined_at > tx.logical_time:
                raise InvalidMetadata(f"creators-unknown: {c}")
        if not self.may_register(tx.author, creators):
            raise PermissionDenied("registrant must be a creator or a Publisher")
        history = self.entries.get(p["work_id"], [])
        if history:
            if any(e.version_label == p["version_label"] for e in history):
                raise DuplicateWorkId(p["work_id"])
            if not self.may_register(tx.author, history[0].creators):
                raise DuplicateWorkId(f"{p['work_id']} belongs to other creators")
        if not commit:
            return None
        entry = RegistryEntry(
            p["work_id"], p["metadata_digest"], p["pointer"], tx.author, tx.tx_id,
            tx.logical_time, p["version_label"], tuple(creators),
        )
        self.entries.setdefault(entry.work_id, []).append(entry)
        self.by_tx[entry.tx_id] = entry
        return entry

    def newest(self, work_id: str) -> RegistryEntry:
        try:
            return self.entries[work_id][-1]
        except KeyError:
            raise NotFound(f"no work {work_id}") from None

    def history(self, work_id: str) -> list[RegistryEntry]:
        return list(self.entries.get(work_id, []))

    def resolve(self, work_id: str, repository: Repository, entry: RegistryEntry | None = None) -> ResolvedWork:
        entry = entry or self.newest(work_id)
        try:
            raw = repository.get(entry.metadata_digest)
        except NotFound:
            raise Dangling(f"metadata for {work_id} is no longer held by the cooperative") from None
        digest_ok = sha256_hex(raw) == entry.metadata_digest
        try:
            metadata = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, ValueError):
            metadata = None
        return ResolvedWork(entry, metadata, digest_ok)
