"""Domain error taxonomy.

Every error carries a stable ``code`` (the class name) used by the CLI and
the HTTP service, so clients see the same vocabulary whichever door they use.
"""
from __future__ import annotations


class CoopError(Exception):
    exit_code = 1

    @property
    def code(self) -> str:
        return type(self).__name__


class InvalidTransaction(CoopError):
    """Malformed transaction or payload."""


# ledger
class PermissionDenied(CoopError):
    pass


class BadSignature(CoopError):
    pass


class DuplicateTransaction(CoopError):
    pass


class TimeRegression(CoopError):
    pass


class EmptyBlock(CoopError):
    pass


class NotFound(CoopError):
    pass


# identity
class DuplicateKey(CoopError):
    pass


class EmptyRoles(CoopError):
    pass


class AlreadyDeparted(CoopError):
    pass


# registry
class InvalidMetadata(CoopError):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class DuplicateWorkId(CoopError):
    pass


class Dangling(CoopError):
    pass


# contracts
class UnresolvableWork(CoopError):
    pass


class MissingProse(CoopError):
    pass


class InvalidSplits(CoopError):
    pass


class OfferClosed(CoopError):
    pass


class PaymentMissing(CoopError):
    pass


class PaymentWrongReference(PaymentMissing):
    """The receipt exists but was paid against a different offer."""


class PaymentInsufficient(CoopError):
    pass


class PaymentWrongPayer(CoopError):
    pass


class PaymentAlreadyConsumed(CoopError):
    pass


class UnexpectedPayment(CoopError):
    """A payment receipt was supplied for a free offer."""


class NotActive(CoopError):
    pass


# payments
class UnknownOffer(CoopError):
    pass


class CurrencyMismatch(CoopError):
    pass


class UnknownReceipt(CoopError):
    pass


class NotConsumed(CoopError):
    pass


class AlreadyDisbursed(CoopError):
    pass


class SplitsMismatch(CoopError):
    pass


# opal
class EmptyRecord(CoopError):
    pass


class InsufficientApprovals(CoopError):
    pass


class UnknownAlgorithm(CoopError):
    pass


class AlgorithmNotApproved(CoopError):
    pass


# simulation / node
class InvalidConfig(CoopError):
    pass


class CorruptStore(CoopError):
    exit_code = 2

    def __init__(self, first_bad_seq: int, detail: str = ""):
        super().__init__(f"chain corrupt at block {first_bad_seq}: {detail}".rstrip(": "))
        self.first_bad_seq = first_bad_seq
        self.detail = detail


class EndpointUnavailable(CoopError):
    pass
