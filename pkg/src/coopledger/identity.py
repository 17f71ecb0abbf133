"""Member registry: roles, keys, admission and departure."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from enum import Enum

from coopledger.canonical import is_hex_digest
from coopledger.errors import (
    AlreadyDeparted,
    DuplicateKey,
    EmptyRoles,
    InvalidTransaction,
    NotFound,
    PermissionDenied,
)
from coopledger.ledger import SignedTransaction, TxKind

OPERATOR = "operator"


class Role(str, Enum):
    COMPOSER = "Composer"
    PUBLISHER = "Publisher"
    RECORD_LABEL = "RecordLabel"
    DSP = "DSP"
    GOVERNANCE = "GovernanceCommittee"


class Action(str, Enum):
    REGISTER_WORK = "RegisterWork"
    DEPLOY_OFFER = "DeployOffer"
    REQUEST_LICENSE = "RequestLicense"
    RECORD_PAYMENT = "RecordPayment"
    SET_CONSENT = "SetConsent"
    REVOKE = "Revoke"
    APPROVE_ALGORITHM = "ApproveAlgorithm"
    ADMIT_MEMBER = "AdmitMember"


_BUSINESS = frozenset({
    Action.REGISTER_WORK, Action.DEPLOY_OFFER, Action.REQUEST_LICENSE,
    Action.RECORD_PAYMENT, Action.SET_CONSENT, Action.REVOKE,
})

# Revoke is only a capability here; ownership of the grant is checked by the contract.
ROLE_PERMISSIONS: dict[Role, frozenset[Action]] = {
    Role.COMPOSER: _BUSINESS,
    Role.PUBLISHER: _BUSINESS,
    Role.RECORD_LABEL: _BUSINESS,
    Role.DSP: _BUSINESS,
    Role.GOVERNANCE: frozenset({Action.APPROVE_ALGORITHM, Action.ADMIT_MEMBER}),
}


class Status(str, Enum):
    ACTIVE = "Active"
    DEPARTED = "Departed"


@dataclass
class MemberRecord:
    member_id: str
    display_name: str
    roles: frozenset[Role]
    public_key: str
    status: Status = Status.ACTIVE
    joined_at: int = 0
    departed_at: int | None = None

    @property
    def active(self) -> bool:
        return self.status is Status.ACTIVE

    def to_doc(self) -> dict:
        return {
            "member_id": self.member_id,
            "display_name": self.display_name,
            "roles": sorted(r.value for r in self.roles),
            "public_key": self.public_key,
            "status": self.status.value,
            "joined_at": self.joined_at,
            "departed_at": self.departed_at,
        }


@dataclass(frozen=True)
class DepartureReceipt:
    member_id: str
    departed_at: int
    purged_asset_count: int
    retained_tx_count: int

    def to_doc(self) -> dict:
        return {
            "member_id": self.member_id,
            "departed_at": self.departed_at,
            "purged_asset_count": self.purged_asset_count,
            "retained_tx_count": self.retained_tx_count,
        }


def register_payload(display_name: str, roles, public_key: str) -> dict:
    return {
        "display_name": display_name,
        "roles": sorted(Role(r).value for r in roles),
        "public_key": public_key,
    }


class KeyBook:
    """Author -> key map rebuilt from MemberRegister transactions.

    Member ids are assigned in ledger order (``m1``, ``m2``, ...), so walking
    a chain with a fresh KeyBook reproduces exactly the ids the node issued.
    """

    def __init__(self, operator_key: str):
        self.operator_key = operator_key
        self.keys: dict[str, str] = {}

    def next_member_id(self) -> str:
        return f"m{len(self.keys) + 1}"

    def key_for(self, author: str) -> str | None:
        if author == OPERATOR:
            return self.operator_key
        return self.keys.get(author)

    def observe(self, tx: SignedTransaction) -> None:
        if tx.kind == TxKind.MEMBER_REGISTER.value:
            self.keys[self.next_member_id()] = tx.payload.get("public_key", "")


@dataclass
class Identity:
    operator_key: str
    members: dict[str, MemberRecord] = field(default_factory=dict)
    tx_counts: Counter = field(default_factory=Counter)

    def __post_init__(self):
        self.keys = KeyBook(self.operator_key)
        self._active_keys: dict[str, str] = {}

    # -- queries -------------------------------------------------------

    def get(self, member_id: str) -> MemberRecord:
        try:
            return self.members[member_id]
        except KeyError:
            raise NotFound(f"no member {member_id}") from None

    def is_active(self, member_id: str) -> bool:
        m = self.members.get(member_id)
        return m is not None and m.active

    def has_role(self, member_id: str, role: Role) -> bool:
        m = self.members.get(member_id)
        return m is not None and role in m.roles

    def authorize(self, member_id: str, action: Action | str) -> bool:
        m = self.members.get(member_id)
        if m is None or not m.active:
            return False
        action = Action(action)
        return any(action in ROLE_PERMISSIONS[r] for r in m.roles)

    def active_committee(self) -> list[str]:
        return sorted(
            m.member_id for m in self.members.values() if m.active and Role.GOVERNANCE in m.roles
        )

    def author_key(self, tx: SignedTransaction) -> str:
        """Ledger authorizer: the key ``tx.author`` may sign with right now."""
        if tx.author == OPERATOR:
            return self.operator_key
        m = self.members.get(tx.author)
        departing = tx.kind == TxKind.MEMBER_DEPART.value
        if m is None:
            if departing:
                raise NotFound(f"no member {tx.author}")
            raise PermissionDenied(f"unknown author {tx.author}")
        if not m.active:
            if departing:
                raise AlreadyDeparted(tx.author)
            raise PermissionDenied(f"author {tx.author} has departed")
        if tx.logical_time <= m.joined_at:
            raise PermissionDenied(f"author {tx.author} may write from tick {m.joined_at + 1}")
        return m.public_key

    # -- transaction handlers --------------------------------------------

    def handle_register(self, tx: SignedTransaction, commit: bool) -> MemberRecord | None:
        p = tx.payload
        if set(p) != {"display_name", "roles", "public_key"}:
            raise InvalidTransaction("MemberRegister payload shape")
        if not isinstance(p["display_name"], str) or not isinstance(p["roles"], list):
            raise InvalidTransaction("MemberRegister field types")
        if not p["roles"]:
            raise EmptyRoles("a member needs at least one role")
        try:
            roles = frozenset(Role(r) for r in p["roles"])
        except ValueError as exc:
            raise InvalidTransaction(str(exc)) from None
        if not is_hex_digest(p["public_key"]):
            raise InvalidTransaction("public_key must be 32 bytes of lowercase hex")
        if tx.author == OPERATOR:
            if self.active_committee():
                raise PermissionDenied("operator key only bootstraps the first committee member")
            if Role.GOVERNANCE not in roles:
                raise PermissionDenied("bootstrap registration must create a GovernanceCommittee member")
        elif not self.authorize(tx.author, Action.ADMIT_MEMBER):
            raise PermissionDenied("admission requires a GovernanceCommittee signature")
        if p["public_key"] in self._active_keys or p["public_key"] == self.operator_key:
            raise DuplicateKey(p["public_key"])
        if not commit:
            return None
        member_id = self.keys.next_member_id()
        self.keys.observe(tx)
        record = MemberRecord(member_id, p["display_name"], roles, p["public_key"], joined_at=tx.logical_time)
        self.members[member_id] = record
        self._active_keys[record.public_key] = member_id
        return record

    def handle_depart(self, tx: SignedTransaction, commit: bool) -> MemberRecord | None:
        if tx.payload != {"member_id": tx.author}:
            raise PermissionDenied("a member can only depart themselves")
        m = self.get(tx.author)
        if not m.active:
            raise AlreadyDeparted(m.member_id)
        if not commit:
            return None
        m.status = Status.DEPARTED
        m.departed_at = tx.logical_time
        self._active_keys.pop(m.public_key, None)
        return m

    def note_tx(self, tx: SignedTransaction) -> None:
        self.tx_counts[tx.author] += 1
