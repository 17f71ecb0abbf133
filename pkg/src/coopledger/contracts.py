"""Ricardian license contracts.

An offer binds a registry entry (by its ledger transaction id), the digest of
the license prose, a price and a splits table. A licensee obtains a grant by
signing ``(offer_id, prose_digest)`` and, for priced offers, presenting an
unconsumed payment receipt. Grants end by licensor revocation or by reaching
``expires_at`` (inclusive).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Iterable

from coopledger import crypto
from coopledger.canonical import canonical_bytes, fraction_text, is_hex_digest, parse_fraction
from coopledger.errors import (
    BadSignature,
    InvalidSplits,
    InvalidTransaction,
    MissingProse,
    NotActive,
    NotFound,
    OfferClosed,
    PaymentAlreadyConsumed,
    PaymentInsufficient,
    PaymentMissing,
    PaymentWrongPayer,
    PaymentWrongReference,
    PermissionDenied,
    UnexpectedPayment,
    UnknownOffer,
    UnresolvableWork,
)
from coopledger.identity import Action, Identity, Role
from coopledger.ledger import SignedTransaction
from coopledger.payments import Payments, SplitsTable, is_amount, is_currency
from coopledger.registry import WorkRegistry


class LicenseKind(str, Enum):
    MECHANICAL = "Mechanical"
    PERFORMANCE = "Performance"


class GrantStatus(str, Enum):
    ACTIVE = "Active"
    EXPIRED = "Expired"
    REVOKED = "Revoked"
    UNKNOWN = "Unknown"


@dataclass(frozen=True)
class OfferTerms:
    work_id: str
    work_tx_id: str
    kind: LicenseKind
    price_minor: int
    currency: str
    prose_digest: str
    splits: SplitsTable
    term_ticks: int | None = None
    template_id: str | None = None

    def to_payload(self) -> dict:
        return {
            "work_ref": {"work_id": self.work_id, "tx_id": self.work_tx_id},
            "kind": LicenseKind(self.kind).value,
            "price_minor": self.price_minor,
            "currency": self.currency,
            "prose_digest": self.prose_digest,
            "splits": self.splits.to_doc(),
            "term_ticks": self.term_ticks,
            "template_id": self.template_id,
        }

    @classmethod
    def from_payload(cls, p: dict) -> "OfferTerms":
        keys = {"work_ref", "kind", "price_minor", "currency", "prose_digest", "splits", "term_ticks", "template_id"}
        if not isinstance(p, dict) or set(p) != keys:
            raise InvalidTransaction("OfferDeploy payload shape")
        ref = p["work_ref"]
        if not isinstance(ref, dict) or set(ref) != {"work_id", "tx_id"}:
            raise InvalidTransaction("work_ref must carry work_id and tx_id")
        try:
            kind = LicenseKind(p["kind"])
        except ValueError:
            raise InvalidTransaction(f"unknown license kind {p['kind']!r}") from None
        if not is_amount(p["price_minor"]) or not is_currency(p["currency"]):
            raise InvalidTransaction("price must be a nonnegative integer, currency a 3-letter code")
        term = p["term_ticks"]
        if term is not None and (not isinstance(term, int) or isinstance(term, bool) or term < 1):
            raise InvalidTransaction("term_ticks must be a positive integer when present")
        if not is_hex_digest(p["prose_digest"]):
            raise MissingProse("offer must carry the digest of its legal prose")
        return cls(
            ref["work_id"], ref["tx_id"], kind, p["price_minor"], p["currency"],
            p["prose_digest"], SplitsTable.from_doc(p["splits"]), term, p["template_id"],
        )


@dataclass(frozen=True)
class OfferTemplate:
    """Shared contract template: legal terms fixed, price left to the artist."""

    name: str
    kind: LicenseKind
    prose_digest: str
    term_ticks: int | None = None
    share_pattern: tuple[Fraction, ...] | None = None

    def to_doc(self) -> dict:
        return {
            "template": self.name,
            "kind": LicenseKind(self.kind).value,
            "prose_digest": self.prose_digest,
            "term_ticks": self.term_ticks,
            "share_pattern": None if self.share_pattern is None else [fraction_text(s) for s in self.share_pattern],
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "OfferTemplate":
        pattern = doc.get("share_pattern")
        return cls(
            doc["template"], LicenseKind(doc["kind"]), doc["prose_digest"], doc.get("term_ticks"),
            None if pattern is None else tuple(parse_fraction(s) for s in pattern),
        )

    def instantiate(
        self, *, work_id: str, work_tx_id: str, price_minor: int, currency: str,
        holders: Iterable[str], template_id: str | None = None,
    ) -> OfferTerms:
        holders = list(holders)
        if self.share_pattern is None:
            shares = [Fraction(1, len(holders))] * len(holders) if holders else []
        else:
            if len(self.share_pattern) != len(holders):
                raise InvalidSplits(f"template {self.name} expects {len(self.share_pattern)} holders")
            shares = list(self.share_pattern)
        return OfferTerms(
            work_id, work_tx_id, self.kind, price_minor, currency, self.prose_digest,
            SplitsTable.of(list(zip(holders, shares))), self.term_ticks, template_id,
        )


@dataclass
class LicenseOffer:
    offer_id: str
    licensor: str
    terms: OfferTerms
    deployed_at: int
    open: bool = True

    @property
    def status(self) -> str:
        return "Open" if self.open else "Closed"

    @property
    def currency(self) -> str:
        return self.terms.currency

    @property
    def price_minor(self) -> int:
        return self.terms.price_minor

    def to_doc(self) -> dict:
        return {"offer_id": self.offer_id, "licensor": self.licensor, "status": self.status,
                "deployed_at": self.deployed_at, **self.terms.to_payload()}


def license_message(offer_id: str, prose_digest: str) -> bytes:
    """What a licensee signs to accept the prose of an offer."""
    return canonical_bytes({"offer_id": offer_id, "prose_digest": prose_digest})


@dataclass
class LicenseGrant:
    grant_id: str
    offer_id: str
    licensee: str
    payment_ref: str | None
    granted_at: int
    expires_at: int | None
    licensee_signature: str
    status: GrantStatus = GrantStatus.ACTIVE
    revoked_at: int | None = None
    revoke_reason: str | None = None

    def status_at(self, at: int) -> GrantStatus:
        if at < self.granted_at:
            return GrantStatus.UNKNOWN
        if self.revoked_at is not None and self.revoked_at <= at:
            return GrantStatus.REVOKED
        if self.expires_at is not None and self.expires_at <= at:
            return GrantStatus.EXPIRED
        return GrantStatus.ACTIVE

    def to_doc(self) -> dict:
        return {
            "grant_id": self.grant_id,
            "offer_id": self.offer_id,
            "licensee": self.licensee,
            "payment_ref": self.payment_ref,
            "granted_at": self.granted_at,
            "expires_at": self.expires_at,
            "status": self.status.value,
            "licensee_signature": self.licensee_signature,
            "revoked_at": self.revoked_at,
            "revoke_reason": self.revoke_reason,
        }


@dataclass
class Contracts:
    identity: Identity
    registry: WorkRegistry
    payments: Payments
    offers: dict[str, LicenseOffer] = field(default_factory=dict)
    grants: dict[str, LicenseGrant] = field(default_factory=dict)

    def get_offer(self, offer_id: str) -> LicenseOffer:
        try:
            return self.offers[offer_id]
        except KeyError:
            raise UnknownOffer(offer_id) from None

    def get_grant(self, grant_id: str) -> LicenseGrant:
        try:
            return self.grants[grant_id]
        except KeyError:
            raise NotFound(f"no grant {grant_id}") from None

    def handle_deploy(self, tx: SignedTransaction, commit: bool) -> LicenseOffer | None:
        terms = OfferTerms.from_payload(tx.payload)
        if not self.identity.authorize(tx.author, Action.DEPLOY_OFFER):
            raise PermissionDenied(f"{tx.author} may not deploy offers")
        entry = self.registry.by_tx.get(terms.work_tx_id)
        if entry is None or entry.work_id != terms.work_id:
            raise UnresolvableWork(f"{terms.work_id} @ {terms.work_tx_id[:12]} is not on the registry")
        if tx.author not in entry.creators and not self.identity.has_role(tx.author, Role.PUBLISHER):
            raise PermissionDenied("licensor must be a creator of the work or a Publisher")
        for holder in terms.splits.holders:
            if holder not in self.identity.members:
                raise InvalidSplits(f"unknown holder {holder}")
        if not commit:
            return None
        offer = LicenseOffer("ofr:" + tx.tx_id[:16], tx.author, terms, tx.logical_time)
        self.offers[offer.offer_id] = offer
        return offer

    def handle_request(self, tx: SignedTransaction, commit: bool) -> LicenseGrant | None:
        p = tx.payload
        if set(p) != {"offer_id", "payment_ref", "licensee_sig"}:
            raise InvalidTransaction("LicenseRequest payload shape")
        offer = self.get_offer(p["offer_id"])
        if not offer.open:
            raise OfferClosed(offer.offer_id)
        if not self.identity.authorize(tx.author, Action.REQUEST_LICENSE):
            raise PermissionDenied(f"{tx.author} may not request licenses")
        key = self.identity.get(tx.author).public_key
        if not isinstance(p["licensee_sig"], str) or not crypto.verify(
            key, license_message(offer.offer_id, offer.terms.prose_digest), p["licensee_sig"]
        ):
            raise BadSignature("licensee signature over (offer_id, prose_digest) does not verify")
        receipt = None
        if offer.price_minor > 0:
            receipt = self.payments.receipts.get(p["payment_ref"]) if p["payment_ref"] else None
            if receipt is None:
                raise PaymentMissing(f"offer {offer.offer_id} costs {offer.price_minor}")
            if receipt.consumed_by is not None:
                raise PaymentAlreadyConsumed(receipt.receipt_id)
            if receipt.payer != tx.author:
                raise PaymentWrongPayer(f"{receipt.receipt_id} was paid by {receipt.payer}")
            if receipt.reference != offer.offer_id:
                raise PaymentWrongReference(f"{receipt.receipt_id} references {receipt.reference}")
            if receipt.amount_minor < offer.price_minor:
                raise PaymentInsufficient(f"{receipt.amount_minor} < {offer.price_minor}")
        elif p["payment_ref"] is not None:
            raise UnexpectedPayment("free offers take no payment reference")
        if not commit:
            return None
        term = offer.terms.term_ticks
        grant = LicenseGrant(
            "lic:" + tx.tx_id[:16], offer.offer_id, tx.author,
            receipt.receipt_id if receipt else None, tx.logical_time,
            tx.logical_time + term if term is not None else None, p["licensee_sig"],
        )
        if receipt is not None:
            receipt.consumed_by = grant.grant_id
        self.grants[grant.grant_id] = grant
        return grant

    def handle_revoke(self, tx: SignedTransaction, commit: bool) -> LicenseGrant | None:
        p = tx.payload
        if set(p) != {"grant_id", "reason"} or not isinstance(p["reason"], str):
            raise InvalidTransaction("LicenseRevoke payload shape")
        grant = self.get_grant(p["grant_id"])
        if self.offers[grant.offer_id].licensor != tx.author:
            raise PermissionDenied("only the offer's licensor may revoke its grants")
        if not self.identity.authorize(tx.author, Action.REVOKE):
            raise PermissionDenied(f"{tx.author} may not revoke")
        current = grant.status_at(tx.logical_time)
        if grant.status is not GrantStatus.ACTIVE or current is not GrantStatus.ACTIVE:
            raise NotActive(f"{grant.grant_id} is {current.value}")
        if not commit:
            return None
        grant.status = GrantStatus.REVOKED
        grant.revoked_at = tx.logical_time
        grant.revoke_reason = p["reason"]
        return grant

    def sweep_expirations(self, now: int) -> list[str]:
        expired = []
        for grant in self.grants.values():
            if grant.status is GrantStatus.ACTIVE and grant.expires_at is not None and grant.expires_at <= now:
                grant.status = GrantStatus.EXPIRED
                expired.append(grant.grant_id)
        return sorted(expired)

    def verify_license(self, grant_id: str, at: int) -> GrantStatus:
        grant = self.grants.get(grant_id)
        return GrantStatus.UNKNOWN if grant is None else grant.status_at(at)

    def close_offers_of(self, member_id: str) -> int:
        closed = 0
        for offer in self.offers.values():
            if offer.licensor == member_id and offer.open:
                offer.open = False
                closed += 1
        return closed
