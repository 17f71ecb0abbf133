"""Simulated payment ledger and splits disbursement.

Money is always an integer number of minor units; shares are exact
rationals. Disbursement uses largest-remainder allocation so payouts sum to
the paid amount exactly and each payout is within one unit of its exact
proportion.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import TYPE_CHECKING, Iterable, Mapping

from coopledger.canonical import fraction_text, parse_fraction
from coopledger.errors import (
    AlreadyDisbursed,
    CurrencyMismatch,
    InvalidSplits,
    InvalidTransaction,
    NotConsumed,
    PermissionDenied,
    SplitsMismatch,
    UnknownOffer,
    UnknownReceipt,
)
from coopledger.identity import Action, Identity
from coopledger.ledger import SignedTransaction

if TYPE_CHECKING:
    from coopledger.contracts import Contracts


@dataclass(frozen=True)
class SplitsTable:
    """Holder shares, kept sorted by holder id. Build with :meth:`of`."""

    entries: tuple[tuple[str, Fraction], ...]

    @classmethod
    def of(cls, shares: Mapping[str, Fraction | str | int] | Iterable[tuple[str, Fraction | str | int]]) -> "SplitsTable":
        pairs = list(shares.items()) if isinstance(shares, Mapping) else list(shares)
        if not pairs:
            raise InvalidSplits("splits table is empty")
        holders = [h for h, _ in pairs]
        if len(set(holders)) != len(holders):
            raise InvalidSplits("holders must be distinct")
        try:
            parsed = [(h, parse_fraction(s)) for h, s in pairs]
        except (ValueError, ZeroDivisionError) as exc:
            raise InvalidSplits(str(exc)) from None
        for h, s in parsed:
            if not isinstance(h, str) or not h:
                raise InvalidSplits("holder ids must be nonempty strings")
            if s <= 0:
                raise InvalidSplits(f"share for {h} must be positive")
        total = sum((s for _, s in parsed), Fraction(0))
        if total != 1:
            raise InvalidSplits(f"shares sum to {fraction_text(total)}, not 1")
        return cls(tuple(sorted(parsed)))

    @classmethod
    def from_doc(cls, doc) -> "SplitsTable":
        if not isinstance(doc, list) or not all(isinstance(e, list) and len(e) == 2 for e in doc):
            raise InvalidSplits("splits must be a list of [holder, share] pairs")
        return cls.of([(h, s) for h, s in doc])

    def to_doc(self) -> list:
        return [[h, fraction_text(s)] for h, s in self.entries]

    @property
    def holders(self) -> list[str]:
        return [h for h, _ in self.entries]


def allocate(amount: int, splits: SplitsTable) -> list[tuple[str, int]]:
    """Largest-remainder split of ``amount`` minor units.

    Each holder first gets ``floor(amount * share)``. The leftover units go
    one each to holders in descending order of fractional remainder, ties
    broken by ascending holder id. Returns ``(holder, payout)`` sorted by holder.
    """
    if amount < 0:
        raise ValueError("amount must be nonnegative")
    base: dict[str, int] = {}
    remainders: list[tuple[Fraction, str]] = []
    for holder, share in splits.entries:
        q, r = divmod(amount * share.numerator, share.denominator)
        base[holder] = q
        remainders.append((Fraction(r, share.denominator), holder))
    leftover = amount - sum(base.values())
    remainders.sort(key=lambda item: (-item[0], item[1]))
    for _, holder in remainders[:leftover]:
        base[holder] += 1
    return sorted(base.items())


@dataclass
class PaymentReceipt:
    receipt_id: str
    payer: str
    amount_minor: int
    currency: str
    reference: str
    recorded_at: int
    consumed_by: str | None = None
    disbursed_by: str | None = None

    def to_doc(self) -> dict:
        return {
            "receipt_id": self.receipt_id,
            "payer": self.payer,
            "amount_minor": self.amount_minor,
            "currency": self.currency,
            "reference": self.reference,
            "recorded_at": self.recorded_at,
            "consumed_by": self.consumed_by,
            "disbursed_by": self.disbursed_by,
        }


@dataclass(frozen=True)
class Disbursement:
    disbursement_id: str
    receipt_id: str
    payouts: tuple[tuple[str, int], ...]
    executed_at: int

    def to_doc(self) -> dict:
        return {
            "disbursement_id": self.disbursement_id,
            "receipt_id": self.receipt_id,
            "payouts": [[h, a] for h, a in self.payouts],
            "executed_at": self.executed_at,
        }


@dataclass(frozen=True)
class Statement:
    member_id: str
    lines: tuple[tuple[str, int], ...]

    @property
    def total(self) -> int:
        return sum(a for _, a in self.lines)

    def to_doc(self) -> dict:
        return {"member_id": self.member_id, "lines": [list(l) for l in self.lines], "total": self.total}


def is_currency(code) -> bool:
    return isinstance(code, str) and len(code) == 3 and code.isascii() and code.isalpha() and code.isupper()


def is_amount(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool) and value >= 0


@dataclass
class Payments:
    identity: Identity
    contracts: "Contracts | None" = None
    receipts: dict[str, PaymentReceipt] = field(default_factory=dict)
    by_offer: dict[str, list[str]] = field(default_factory=dict)
    disbursements: dict[str, Disbursement] = field(default_factory=dict)
    by_holder: dict[str, list[tuple[str, int]]] = field(default_factory=dict)

    def handle_record(self, tx: SignedTransaction, commit: bool) -> PaymentReceipt | None:
        p = tx.payload
        if set(p) != {"amount_minor", "currency", "reference"}:
            raise InvalidTransaction("PaymentRecord payload shape")
        if not is_amount(p["amount_minor"]) or not is_currency(p["currency"]):
            raise InvalidTransaction("amount must be a nonnegative integer, currency a 3-letter code")
        if not self.identity.authorize(tx.author, Action.RECORD_PAYMENT):
            raise PermissionDenied(f"{tx.author} may not record payments")
        offer = self.contracts.offers.get(p["reference"])
        if offer is None:
            raise UnknownOffer(str(p["reference"]))
        if offer.currency != p["currency"]:
            raise CurrencyMismatch(f"offer is in {offer.currency}, payment in {p['currency']}")
        if not commit:
            return None
        receipt = PaymentReceipt(
            "pay:" + tx.tx_id[:16], tx.author, p["amount_minor"], p["currency"], p["reference"], tx.logical_time
        )
        self.receipts[receipt.receipt_id] = receipt
        self.by_offer.setdefault(receipt.reference, []).append(receipt.receipt_id)
        return receipt

    def payments_for_offer(self, offer_id: str) -> list[PaymentReceipt]:
        if offer_id not in self.contracts.offers:
            raise UnknownOffer(offer_id)
        return [self.receipts[r] for r in self.by_offer.get(offer_id, [])]

    def handle_disburse(self, tx: SignedTransaction, commit: bool) -> Disbursement | None:
        p = tx.payload
        if set(p) != {"receipt_id", "splits"}:
            raise InvalidTransaction("DisburseExec payload shape")
        receipt = self.receipts.get(p["receipt_id"])
        if receipt is None:
            raise UnknownReceipt(str(p["receipt_id"]))
        if receipt.consumed_by is None:
            raise NotConsumed(receipt.receipt_id)
        if receipt.disbursed_by is not None:
            raise AlreadyDisbursed(receipt.receipt_id)
        grant = self.contracts.grants[receipt.consumed_by]
        offer = self.contracts.offers[grant.offer_id]
        if tx.author != offer.licensor:
            raise PermissionDenied("only the licensor triggers disbursement")
        try:
            splits = SplitsTable.from_doc(p["splits"])
        except InvalidSplits as exc:
            raise SplitsMismatch(f"invalid splits: {exc}") from None
        if splits != offer.terms.splits:
            raise SplitsMismatch("splits differ from the offer's table")
        if not commit:
            return None
        d = Disbursement(
            "dsb:" + tx.tx_id[:16], receipt.receipt_id,
            tuple(allocate(receipt.amount_minor, splits)), tx.logical_time,
        )
        receipt.disbursed_by = d.disbursement_id
        self.disbursements[d.disbursement_id] = d
        for holder, amount in d.payouts:
            self.by_holder.setdefault(holder, []).append((d.disbursement_id, amount))
        return d

    def holder_statement(self, member_id: str) -> Statement:
        return Statement(member_id, tuple(self.by_holder.get(member_id, [])))

    def total_disbursed(self) -> int:
        return sum(a for d in self.disbursements.values() for _, a in d.payouts)
