"""Open Algorithms (OPAL) query engine.

Member records never leave the engine. Callers pick an algorithm from a
fixed, governance-approved catalog; the engine runs it over the records of
members who consented to that algorithm and returns only per-group
aggregates. Groups with fewer than ``k_threshold`` contributors are
suppressed, and every query attempt, refused or not, lands in a hash-chained
audit log.
"""
from __future__ import annotations

import json
import logging
import math
import threading
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Mapping

from coopledger import crypto
from coopledger.canonical import ZERO_HASH, canonical_bytes, digest_hex, parse_canonical
from coopledger.errors import (
    AlgorithmNotApproved,
    BadSignature,
    CoopError,
    EmptyRecord,
    InsufficientApprovals,
    InvalidTransaction,
    NotFound,
    PermissionDenied,
    UnknownAlgorithm,
)
from coopledger.identity import Action, Identity, Role
from coopledger.ledger import ChainReport, SignedTransaction

logger = logging.getLogger(__name__)

DEFAULT_K = 5
SUPPRESSED = "SUPPRESSED"
ALL = "*"


class Algorithm(str, Enum):
    COUNT = "Count"
    SUM = "Sum"
    MEAN = "Mean"
    HISTOGRAM = "Histogram"


@dataclass(frozen=True)
class AlgorithmManifest:
    algorithm: Algorithm
    schema_id: str
    target_field: str | None = None
    group_by: str | None = None
    description: str = ""

    def __post_init__(self):
        object.__setattr__(self, "algorithm", Algorithm(self.algorithm))
        if self.algorithm is Algorithm.COUNT and self.target_field is not None:
            raise ValueError("Count takes no target_field")
        if self.algorithm is not Algorithm.COUNT and not self.target_field:
            raise ValueError(f"{self.algorithm.value} needs a target_field")

    def to_doc(self) -> dict:
        return {
            "algorithm": self.algorithm.value,
            "schema_id": self.schema_id,
            "target_field": self.target_field,
            "group_by": self.group_by,
            "description": self.description,
        }

    @classmethod
    def from_doc(cls, doc: Mapping) -> "AlgorithmManifest":
        if not isinstance(doc, Mapping) or set(doc) != {"algorithm", "schema_id", "target_field", "group_by", "description"}:
            raise InvalidTransaction("manifest shape")
        try:
            return cls(**doc)
        except ValueError as exc:
            raise InvalidTransaction(str(exc)) from None

    @property
    def digest(self) -> str:
        return digest_hex(self.to_doc())

    @property
    def alg_id(self) -> str:
        return "alg:" + self.digest[:16]

    def approval_message(self) -> bytes:
        return bytes.fromhex(self.digest)

    def approve(self, member_id: str, key: crypto.KeyPair) -> tuple[str, str]:
        """A committee member's approval: signature over the manifest digest."""
        return member_id, key.sign(self.approval_message())


@dataclass(frozen=True)
class ApprovedAlgorithm:
    manifest: AlgorithmManifest
    approvals: tuple[tuple[str, str], ...]
    tx_id: str
    approved_at: int

    @property
    def alg_id(self) -> str:
        return self.manifest.alg_id

    @property
    def approved(self) -> bool:
        return True

    def to_doc(self) -> dict:
        return {"alg_id": self.alg_id, **self.manifest.to_doc(), "approved": True,
                "approvals": [list(a) for a in self.approvals], "tx_id": self.tx_id,
                "approved_at": self.approved_at}


@dataclass(frozen=True)
class ConsentRecord:
    member_id: str
    alg_id: str
    granted: bool
    set_at: int

    def to_doc(self) -> dict:
        return {"member_id": self.member_id, "alg_id": self.alg_id, "granted": self.granted, "set_at": self.set_at}


@dataclass
class Governance:
    """Ledger-derived OPAL state: the approved catalog and consent choices."""

    identity: Identity
    quorum: int = 1
    algorithms: dict[str, ApprovedAlgorithm] = field(default_factory=dict)
    consents: dict[tuple[str, str], ConsentRecord] = field(default_factory=dict)

    def handle_approve(self, tx: SignedTransaction, commit: bool) -> ApprovedAlgorithm | None:
        p = tx.payload
        if set(p) != {"manifest", "approvals"} or not isinstance(p["approvals"], list):
            raise InvalidTransaction("AlgApprove payload shape")
        manifest = AlgorithmManifest.from_doc(p["manifest"])
        if not self.identity.authorize(tx.author, Action.APPROVE_ALGORITHM):
            raise PermissionDenied("only GovernanceCommittee members submit algorithms")
        if manifest.alg_id in self.algorithms:
            raise InvalidTransaction(f"{manifest.alg_id} is already approved")
        signers = set()
        for item in p["approvals"]:
            if not isinstance(item, list) or len(item) != 2 or not all(isinstance(x, str) for x in item):
                raise InvalidTransaction("approvals are [member_id, signature] pairs")
            member_id, sig = item
            if not self.identity.authorize(member_id, Action.APPROVE_ALGORITHM):
                raise PermissionDenied(f"{member_id} is not an active committee member")
            if not crypto.verify(self.identity.get(member_id).public_key, manifest.approval_message(), sig):
                raise BadSignature(f"approval by {member_id} does not verify")
            signers.add(member_id)
        if len(signers) < self.quorum:
            raise InsufficientApprovals(f"{len(signers)} distinct approvals, quorum is {self.quorum}")
        if not commit:
            return None
        approved = ApprovedAlgorithm(manifest, tuple(tuple(a) for a in p["approvals"]), tx.tx_id, tx.logical_time)
        self.algorithms[approved.alg_id] = approved
        return approved

    def handle_consent(self, tx: SignedTransaction, commit: bool) -> ConsentRecord | None:
        p = tx.payload
        if set(p) != {"alg_id", "granted"} or not isinstance(p["granted"], bool):
            raise InvalidTransaction("ConsentSet payload shape")
        if not self.identity.authorize(tx.author, Action.SET_CONSENT):
            raise PermissionDenied(f"{tx.author} may not set consent")
        if p["alg_id"] not in self.algorithms:
            raise UnknownAlgorithm(str(p["alg_id"]))
        if not commit:
            return None
        record = ConsentRecord(tx.author, p["alg_id"], p["granted"], tx.logical_time)
        self.consents[(tx.author, p["alg_id"])] = record
        return record

    def consented(self, member_id: str, alg_id: str) -> bool:
        record = self.consents.get((member_id, alg_id))
        return record is not None and record.granted


# ---------------------------------------------------------------------------
# engine-side personal data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PersonalDataRecord:
    owner: str
    schema_id: str
    attributes: Mapping[str, Any]
    stored_at: int


def _valid_attribute(value: Any) -> bool:
    if isinstance(value, bool):
        return False
    if isinstance(value, float):
        return math.isfinite(value)
    return isinstance(value, (int, str))


class RecordStore:
    """Holds member records inside the engine. Handles are opaque strings."""

    def __init__(self, path: Path | None = None):
        self.path = Path(path) if path is not None else None
        self._records: dict[str, PersonalDataRecord] = {}
        self._seq = 0
        if self.path is not None and self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                doc = json.loads(line)
                self._records[doc["handle"]] = PersonalDataRecord(
                    doc["owner"], doc["schema_id"], doc["attributes"], doc["stored_at"]
                )
                self._seq = max(self._seq, int(doc["handle"].split(":")[1]))

    def _rewrite(self) -> None:
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        lines = [
            canonical_bytes({"handle": h, "owner": r.owner, "schema_id": r.schema_id,
                             "attributes": dict(r.attributes), "stored_at": r.stored_at})
            for h, r in self._records.items()
        ]
        self.path.write_bytes(b"".join(l + b"\n" for l in lines))

    def add(self, record: PersonalDataRecord) -> str:
        self._seq += 1
        handle = f"rec:{self._seq}"
        self._records[handle] = record
        self._rewrite()
        return handle

    def purge_owner(self, owner: str) -> int:
        doomed = [h for h, r in self._records.items() if r.owner == owner]
        for h in doomed:
            del self._records[h]
        if doomed:
            self._rewrite()
        return len(doomed)

    def count_for(self, owner: str) -> int:
        return sum(1 for r in self._records.values() if r.owner == owner)

    def __len__(self) -> int:
        return len(self._records)

    def snapshot(self) -> list[PersonalDataRecord]:
        return list(self._records.values())


# ---------------------------------------------------------------------------
# audit log
# ---------------------------------------------------------------------------


AUDIT_FIELDS = ("entry_id", "requester", "alg_id", "cohort_size", "suppressed_group_count",
                "result_digest", "logged_at", "outcome", "prev_hash")


@dataclass(frozen=True)
class AuditLogEntry:
    entry_id: int
    requester: str
    alg_id: str
    cohort_size: int
    suppressed_group_count: int
    result_digest: str
    logged_at: int
    outcome: str
    prev_hash: str
    entry_hash: str

    def body(self) -> dict:
        return {name: getattr(self, name) for name in AUDIT_FIELDS}

    def to_doc(self) -> dict:
        return {**self.body(), "entry_hash": self.entry_hash}


class AuditLog:
    """Append-only, hash-chained log of query executions."""

    def __init__(self, path: Path | None = None):
        self.path = Path(path) if path is not None else None
        self.entries: list[AuditLogEntry] = []
        self._load_error: int | None = None
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            for i, line in enumerate(self.path.read_bytes().splitlines()):
                try:
                    doc = parse_canonical(line)
                    self.entries.append(AuditLogEntry(**doc))
                except (ValueError, TypeError, UnicodeDecodeError):
                    self._load_error = i
                    break

    @property
    def head_hash(self) -> str:
        return self.entries[-1].entry_hash if self.entries else ZERO_HASH

    def append(self, *, requester: str, alg_id: str, cohort_size: int, suppressed_group_count: int,
               result_digest: str, logged_at: int, outcome: str) -> AuditLogEntry:
        with self._lock:
            body = {
                "entry_id": len(self.entries), "requester": requester, "alg_id": alg_id,
                "cohort_size": cohort_size, "suppressed_group_count": suppressed_group_count,
                "result_digest": result_digest, "logged_at": logged_at, "outcome": outcome,
                "prev_hash": self.head_hash,
            }
            entry = AuditLogEntry(**body, entry_hash=digest_hex(body))
            self.entries.append(entry)
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("ab") as fh:
                    fh.write(canonical_bytes(entry.to_doc()) + b"\n")
            return entry

    def verify(self) -> ChainReport:
        """Check hashes and links. ``first_bad_seq`` is the first bad entry index."""
        prev = ZERO_HASH
        for i, entry in enumerate(self.entries):
            if entry.entry_id != i or entry.prev_hash != prev or digest_hex(entry.body()) != entry.entry_hash:
                return ChainReport(i, "audit entry does not verify")
            prev = entry.entry_hash
        if self._load_error is not None:
            return ChainReport(self._load_error, "audit entry unparseable")
        return ChainReport()

    def __len__(self) -> int:
        return len(self.entries)


# ---------------------------------------------------------------------------
# queries
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GroupResult:
    label: str
    contributor_count: int | None
    value: Any

    @property
    def suppressed(self) -> bool:
        return self.value == SUPPRESSED

    def to_doc(self, k: int) -> dict:
        if self.suppressed:
            return {"label": self.label, "contributors": f"<{k}", "value": SUPPRESSED}
        return {"label": self.label, "contributors": self.contributor_count, "value": self.value}


@dataclass(frozen=True)
class AggregateResult:
    alg_id: str
    groups: tuple[GroupResult, ...]
    k_threshold: int
    executed_at: int

    def to_doc(self) -> dict:
        return {
            "alg_id": self.alg_id,
            "groups": [g.to_doc(self.k_threshold) for g in self.groups],
            "k_threshold": self.k_threshold,
            "executed_at": self.executed_at,
        }

    def group(self, label: str) -> GroupResult:
        for g in self.groups:
            if g.label == label:
                return g
        raise KeyError(label)

    @property
    def emitted(self) -> list[GroupResult]:
        return [g for g in self.groups if not g.suppressed]


def _number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def compute_group(algorithm: Algorithm, records: list[PersonalDataRecord], target: str | None):
    """Aggregate one group. Returns (contributors, value)."""
    if algorithm is Algorithm.COUNT:
        return len({r.owner for r in records}), len({r.owner for r in records})
    if algorithm is Algorithm.HISTOGRAM:
        used = [r for r in records if target in r.attributes]
        bins = Counter(str(r.attributes[target]) for r in used)
        return len({r.owner for r in used}), dict(sorted(bins.items()))
    used = [r for r in records if _number(r.attributes.get(target))]
    values = [r.attributes[target] for r in used]
    contributors = len({r.owner for r in used})
    if all(isinstance(v, int) for v in values):
        total: int | float = sum(values)
    else:
        total = math.fsum(values)
    if algorithm is Algorithm.SUM:
        return contributors, total
    return contributors, (total / len(values) if values else None)


class OpalEngine:
    def __init__(self, identity: Identity, governance: Governance, records: RecordStore,
                 audit: AuditLog, k_threshold: int = DEFAULT_K):
        if k_threshold < 1:
            raise ValueError("k_threshold must be positive")
        self.identity = identity
        self.governance = governance
        self.records = records
        self.audit = audit
        self.k_threshold = k_threshold

    def ingest_record(self, owner: str, schema_id: str, attributes: Mapping[str, Any], now: int) -> str:
        if not self.identity.is_active(owner):
            raise PermissionDenied(f"{owner} is not an active member")
        if not attributes:
            raise EmptyRecord("record has no attributes")
        for name, value in attributes.items():
            if not isinstance(name, str) or not _valid_attribute(value):
                raise InvalidTransaction(f"attribute {name!r} must map to a number or label")
        return self.records.add(PersonalDataRecord(owner, schema_id, dict(attributes), now))

    def cohort(self, alg_id: str) -> list[PersonalDataRecord]:
        manifest = self.governance.algorithms[alg_id].manifest
        return [
            r for r in self.records.snapshot()
            if r.schema_id == manifest.schema_id
            and self.identity.is_active(r.owner)
            and self.governance.consented(r.owner, alg_id)
        ]

    def execute_query(self, alg_id: str, requester: str, now: int) -> AggregateResult:
        try:
            if alg_id not in self.governance.algorithms:
                raise AlgorithmNotApproved(alg_id)
            if not self.identity.is_active(requester):
                raise PermissionDenied(f"{requester} is not an active member")
        except CoopError as exc:
            self.audit.append(requester=requester, alg_id=alg_id, cohort_size=0, suppressed_group_count=0,
                              result_digest=digest_hex({"error": exc.code}), logged_at=now, outcome=exc.code)
            raise

        manifest = self.governance.algorithms[alg_id].manifest
        cohort = self.cohort(alg_id)
        groups: dict[str, list[PersonalDataRecord]] = defaultdict(list)
        for r in cohort:
            if manifest.group_by is None:
                groups[ALL].append(r)
            elif manifest.group_by in r.attributes:
                groups[str(r.attributes[manifest.group_by])].append(r)

        out = []
        for label in sorted(groups):
            contributors, value = compute_group(manifest.algorithm, groups[label], manifest.target_field)
            if contributors < self.k_threshold:
                out.append(GroupResult(label, None, SUPPRESSED))
            else:
                out.append(GroupResult(label, contributors, value))
        if not out:
            out.append(GroupResult(ALL, None, SUPPRESSED))

        result = AggregateResult(alg_id, tuple(out), self.k_threshold, now)
        self.audit.append(
            requester=requester, alg_id=alg_id, cohort_size=len({r.owner for r in cohort}),
            suppressed_group_count=sum(g.suppressed for g in out),
            result_digest=digest_hex(result.to_doc()), logged_at=now, outcome="ok",
        )
        return result

    def read_audit_log(self, reader: str, *, requester: str | None = None, alg_id: str | None = None,
                       since: int | None = None, until: int | None = None) -> list[AuditLogEntry]:
        """Committee members read everything; anyone else only their own entries."""
        if not self.identity.has_role(reader, Role.GOVERNANCE) or not self.identity.is_active(reader):
            if requester is None:
                requester = reader
            if requester != reader:
                raise PermissionDenied("members may only read their own audit entries")
        return [
            e for e in self.audit.entries
            if (requester is None or e.requester == requester)
            and (alg_id is None or e.alg_id == alg_id)
            and (since is None or e.logged_at >= since)
            and (until is None or e.logged_at <= until)
        ]


def lookup_algorithm(governance: Governance, alg_id: str) -> ApprovedAlgorithm:
    try:
        return governance.algorithms[alg_id]
    except KeyError:
        raise NotFound(f"no approved algorithm {alg_id}") from None
