"""Append-only, hash-chained transaction ledger.

The ledger orders and notarizes every state change. It knows nothing about
what a transaction *means*; authorization is delegated to an ``authorizer``
callable supplied by the node, which maps a transaction to the public key its
author is allowed to sign with (or raises ``PermissionDenied``).

Persistence is a JSON-lines file: a self-digesting header, then one line per
transaction and one ``seal`` line per sealed block, in chain order. Every line
must be in canonical form, so any byte-level mutation is caught either by the
canonical round-trip check or by digest recomputation.
"""
from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterator, Protocol

from coopledger import crypto
from coopledger.canonical import (
    ZERO_HASH,
    canonical_bytes,
    canonical_text,
    digest_hex,
    is_hex_digest,
    parse_canonical,
    sha256_hex,
)
from coopledger.errors import (
    BadSignature,
    DuplicateTransaction,
    EmptyBlock,
    InvalidTransaction,
    NotFound,
    PermissionDenied,
    TimeRegression,
)

logger = logging.getLogger(__name__)

DEFAULT_BLOCK_SIZE = 16


class TxKind(str, Enum):
    MEMBER_REGISTER = "MemberRegister"
    MEMBER_DEPART = "MemberDepart"
    WORK_REGISTER = "WorkRegister"
    ALG_APPROVE = "AlgApprove"
    CONSENT_SET = "ConsentSet"
    OFFER_DEPLOY = "OfferDeploy"
    LICENSE_REQUEST = "LicenseRequest"
    LICENSE_REVOKE = "LicenseRevoke"
    PAYMENT_RECORD = "PaymentRecord"
    DISBURSE_EXEC = "DisburseExec"


_KINDS = {k.value for k in TxKind}


@dataclass(frozen=True)
class SignedTransaction:
    kind: str
    payload: dict
    author: str
    logical_time: int
    tx_id: str
    signature: str

    @staticmethod
    def body(kind: str, payload: dict, author: str, logical_time: int) -> dict:
        return {"kind": kind, "payload": payload, "author": author, "logical_time": logical_time}

    @classmethod
    def create(
        cls, kind: str | TxKind, payload: dict, author: str, logical_time: int, key: crypto.KeyPair
    ) -> "SignedTransaction":
        kind = TxKind(kind).value
        message = canonical_bytes(cls.body(kind, payload, author, logical_time))
        return cls(
            kind=kind,
            payload=payload,
            author=author,
            logical_time=logical_time,
            tx_id=sha256_hex(message),
            signature=key.sign(message),
        )

    def signing_bytes(self) -> bytes:
        return canonical_bytes(self.body(self.kind, self.payload, self.author, self.logical_time))

    def recompute_id(self) -> str:
        return sha256_hex(self.signing_bytes())

    def verify_signature(self, public_key: str) -> bool:
        return crypto.verify(public_key, self.signing_bytes(), self.signature)

    def to_doc(self) -> dict:
        return {
            "kind": self.kind,
            "payload": self.payload,
            "author": self.author,
            "logical_time": self.logical_time,
            "tx_id": self.tx_id,
            "signature": self.signature,
        }

    @classmethod
    def from_doc(cls, doc: Any) -> "SignedTransaction":
        if not isinstance(doc, dict) or set(doc) != {
            "kind", "payload", "author", "logical_time", "tx_id", "signature",
        }:
            raise InvalidTransaction("transaction document has wrong shape")
        t = doc["logical_time"]
        if doc["kind"] not in _KINDS:
            raise InvalidTransaction(f"unknown kind {doc['kind']!r}")
        if not isinstance(doc["payload"], dict) or not isinstance(doc["author"], str):
            raise InvalidTransaction("payload must be an object and author a string")
        if not isinstance(t, int) or isinstance(t, bool) or t < 0:
            raise InvalidTransaction("logical_time must be a nonnegative integer")
        if not is_hex_digest(doc["tx_id"]):
            raise InvalidTransaction("tx_id must be 64 lowercase hex chars")
        sig = doc["signature"]
        if not isinstance(sig, str) or len(sig) != 128 or sig != sig.lower():
            raise InvalidTransaction("signature must be 128 lowercase hex chars")
        return cls(doc["kind"], doc["payload"], doc["author"], t, doc["tx_id"], sig)


@dataclass(frozen=True)
class TxReceipt:
    tx_id: str
    block_seq: int
    index_in_block: int
    logical_time: int


def block_hash_of(seq: int, prev_hash: str, tx_ids: tuple[str, ...] | list[str]) -> str:
    return digest_hex({"seq": seq, "prev_hash": prev_hash, "tx_ids": list(tx_ids)})


@dataclass(frozen=True)
class Block:
    seq: int
    prev_hash: str
    txs: tuple[SignedTransaction, ...]
    block_hash: str

    @property
    def tx_ids(self) -> tuple[str, ...]:
        return tuple(tx.tx_id for tx in self.txs)

    def seal_doc(self) -> dict:
        return {"seal": {"seq": self.seq, "prev_hash": self.prev_hash, "block_hash": self.block_hash}}


@dataclass(frozen=True)
class ChainReport:
    """Outcome of a chain verification. Truthy iff the chain is intact."""

    first_bad_seq: int | None = None
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.first_bad_seq is None

    def __bool__(self) -> bool:
        return self.ok


class KeyResolver(Protocol):
    """Tracks author keys while a chain is walked in order."""

    def key_for(self, author: str) -> str | None: ...

    def observe(self, tx: SignedTransaction) -> None: ...


Authorizer = Callable[[SignedTransaction], str]


class Ledger:
    """Single-sequencer append-only log of signed transactions.

    Blocks seal automatically every ``block_size`` transactions or on an
    explicit :meth:`seal_block`. Transactions in the open block are already
    final and readable; sealing only fixes the block boundary and hash.
    """

    def __init__(
        self,
        *,
        block_size: int = DEFAULT_BLOCK_SIZE,
        authorizer: Authorizer | None = None,
        store: "ChainStore | None" = None,
    ):
        if block_size < 1:
            raise ValueError("block_size must be >= 1")
        self.block_size = block_size
        self.authorizer = authorizer
        self.store = store
        self.blocks: list[Block] = []
        self.open_txs: list[SignedTransaction] = []
        self._index: dict[str, tuple[int, int]] = {}
        self._lock = threading.RLock()

    # -- reads ---------------------------------------------------------

    def __len__(self) -> int:
        return len(self._index)

    @property
    def head_hash(self) -> str:
        return self.blocks[-1].block_hash if self.blocks else ZERO_HASH

    @property
    def head_time(self) -> int:
        if self.open_txs:
            return self.open_txs[-1].logical_time
        for block in reversed(self.blocks):
            if block.txs:
                return block.txs[-1].logical_time
        return 0

    def transactions(self) -> Iterator[SignedTransaction]:
        for block in list(self.blocks):
            yield from block.txs
        yield from list(self.open_txs)

    def __contains__(self, tx_id: str) -> bool:
        return tx_id in self._index

    def read_entry(self, tx_id: str) -> tuple[SignedTransaction, TxReceipt]:
        """Public read: no credential required."""
        with self._lock:
            try:
                seq, idx = self._index[tx_id]
            except KeyError:
                raise NotFound(f"no transaction {tx_id}") from None
            tx = self.blocks[seq].txs[idx] if seq < len(self.blocks) else self.open_txs[idx]
            return tx, TxReceipt(tx_id, seq, idx, tx.logical_time)

    # -- writes --------------------------------------------------------

    def check(self, tx: SignedTransaction) -> str:
        """Run the append preconditions without appending. Returns the author key."""
        if tx.recompute_id() != tx.tx_id:
            raise InvalidTransaction("tx_id does not match canonical payload")
        if tx.tx_id in self._index:
            raise DuplicateTransaction(tx.tx_id)
        if self.authorizer is None:
            raise PermissionDenied("ledger has no authorizer configured")
        key = self.authorizer(tx)
        if not tx.verify_signature(key):
            raise BadSignature(f"signature does not verify for author {tx.author}")
        if tx.logical_time < self.head_time:
            raise TimeRegression(f"logical_time {tx.logical_time} < head {self.head_time}")
        return key

    def append(self, tx: SignedTransaction) -> TxReceipt:
        with self._lock:
            self.check(tx)
            return self._append_unchecked(tx)

    def _append_unchecked(self, tx: SignedTransaction) -> TxReceipt:
        seq, idx = len(self.blocks), len(self.open_txs)
        self.open_txs.append(tx)
        self._index[tx.tx_id] = (seq, idx)
        if self.store is not None:
            self.store.write_tx(tx)
        if len(self.open_txs) >= self.block_size:
            self.seal_block()
        return TxReceipt(tx.tx_id, seq, idx, tx.logical_time)

    def seal_block(self) -> Block:
        with self._lock:
            if not self.open_txs:
                raise EmptyBlock("no pending transactions to seal")
            seq = len(self.blocks)
            txs = tuple(self.open_txs)
            block = Block(seq, self.head_hash, txs, block_hash_of(seq, self.head_hash, [t.tx_id for t in txs]))
            self.blocks.append(block)
            self.open_txs = []
            if self.store is not None:
                self.store.write_seal(block)
            logger.debug("sealed block %d with %d txs", seq, len(txs))
            return block

    def adopt_block(self, block: Block) -> None:
        """Append an already-sealed block (replication path). Caller verifies it first."""
        with self._lock:
            if self.open_txs:
                raise InvalidTransaction("cannot adopt a block while transactions are pending")
            if block.seq != len(self.blocks) or block.prev_hash != self.head_hash:
                raise InvalidTransaction(f"block {block.seq} does not extend head")
            for idx, tx in enumerate(block.txs):
                self._index[tx.tx_id] = (block.seq, idx)
            self.blocks.append(block)

    def restore(self, blocks: list[Block], open_txs: list[SignedTransaction]) -> None:
        """Load verified history without re-running append checks or writing to the store."""
        with self._lock:
            for block in blocks:
                self.adopt_block(block)
            for tx in open_txs:
                self._index[tx.tx_id] = (len(self.blocks), len(self.open_txs))
                self.open_txs.append(tx)

    # -- verification --------------------------------------------------

    def verify_chain(self, keys: KeyResolver | None = None) -> ChainReport:
        """Recompute every digest and link; with ``keys``, verify signatures too."""
        with self._lock:
            blocks = list(self.blocks)
            open_txs = list(self.open_txs)
        return verify_blocks(blocks, open_txs, keys)


def verify_blocks(
    blocks: list[Block], open_txs: list[SignedTransaction], keys: KeyResolver | None = None
) -> ChainReport:
    seen: set[str] = set()
    prev = ZERO_HASH
    last_time = 0

    def check_tx(tx: SignedTransaction) -> str | None:
        nonlocal last_time
        if tx.recompute_id() != tx.tx_id:
            return f"tx {tx.tx_id[:12]} digest mismatch"
        if tx.tx_id in seen:
            return f"tx {tx.tx_id[:12]} duplicated"
        seen.add(tx.tx_id)
        if tx.logical_time < last_time:
            return f"tx {tx.tx_id[:12]} time regression"
        last_time = tx.logical_time
        if keys is not None:
            key = keys.key_for(tx.author)
            if key is None or not tx.verify_signature(key):
                return f"tx {tx.tx_id[:12]} signature invalid"
            keys.observe(tx)
        return None

    for expected_seq, block in enumerate(blocks):
        if block.seq != expected_seq:
            return ChainReport(expected_seq, "block sequence gap")
        if block.prev_hash != prev:
            return ChainReport(expected_seq, "prev_hash does not link")
        if not block.txs:
            return ChainReport(expected_seq, "empty block")
        for tx in block.txs:
            problem = check_tx(tx)
            if problem:
                return ChainReport(expected_seq, problem)
        if block_hash_of(block.seq, block.prev_hash, block.tx_ids) != block.block_hash:
            return ChainReport(expected_seq, "block_hash mismatch")
        prev = block.block_hash
    for tx in open_txs:
        problem = check_tx(tx)
        if problem:
            return ChainReport(len(blocks), problem)
    return ChainReport()


# ---------------------------------------------------------------------------
# persisted chain file
# ---------------------------------------------------------------------------


def make_header(chain_id: str, operator_key: str, block_size: int) -> dict:
    body = {"chain_id": chain_id, "operator_key": operator_key, "block_size": block_size}
    return {"header": {**body, "digest": digest_hex(body)}}


def _check_header(doc: Any) -> dict:
    if not isinstance(doc, dict) or set(doc) != {"header"}:
        raise ValueError("missing header")
    h = doc["header"]
    body = {k: v for k, v in h.items() if k != "digest"}
    if set(body) != {"chain_id", "operator_key", "block_size"} or digest_hex(body) != h.get("digest"):
        raise ValueError("header digest mismatch")
    return body


class ChainStore:
    """Writes ledger lines to disk as they are produced."""

    def __init__(self, path: Path):
        self.path = Path(path)

    def create(self, chain_id: str, operator_key: str, block_size: int) -> None:
        self.path.write_bytes(canonical_bytes(make_header(chain_id, operator_key, block_size)) + b"\n")

    def _write(self, doc: dict) -> None:
        with self.path.open("ab") as fh:
            fh.write(canonical_bytes(doc) + b"\n")

    def write_tx(self, tx: SignedTransaction) -> None:
        self._write(tx.to_doc())

    def write_seal(self, block: Block) -> None:
        self._write(block.seal_doc())


@dataclass
class LoadedChain:
    header: dict | None
    blocks: list[Block] = field(default_factory=list)
    open_txs: list[SignedTransaction] = field(default_factory=list)
    report: ChainReport = field(default_factory=ChainReport)


def load_chain_file(path: Path, keys_factory: Callable[[dict], KeyResolver] | None = None) -> LoadedChain:
    """Parse and verify a persisted chain file.

    Parsing stops at the first malformed line; the returned report names the
    earliest block that is either unparseable or fails digest verification.
    ``keys_factory`` receives the header and returns a resolver used for
    signature checks.
    """
    raw = Path(path).read_bytes()
    lines = raw.split(b"\n")
    if lines and lines[-1] == b"":
        lines.pop()
    if not lines:
        return LoadedChain(None, report=ChainReport(0, "missing header"))
    try:
        header = _check_header(parse_canonical(lines[0]))
    except (ValueError, UnicodeDecodeError) as exc:
        return LoadedChain(None, report=ChainReport(0, f"header: {exc}"))

    blocks: list[Block] = []
    pending: list[SignedTransaction] = []
    parse_fail: ChainReport | None = None
    if not raw.endswith(b"\n"):
        # truncated final line: treat as damage to whichever block it belongs to
        lines_to_parse, damaged_tail = lines[1:-1], True
    else:
        lines_to_parse, damaged_tail = lines[1:], False
    for line in lines_to_parse:
        try:
            doc = parse_canonical(line)
            if isinstance(doc, dict) and set(doc) == {"seal"}:
                seal = doc["seal"]
                if not isinstance(seal, dict) or set(seal) != {"seq", "prev_hash", "block_hash"}:
                    raise ValueError("malformed seal")
                if seal["seq"] != len(blocks):
                    raise ValueError("seal out of sequence")
                blocks.append(Block(seal["seq"], seal["prev_hash"], tuple(pending), seal["block_hash"]))
                pending = []
            else:
                pending.append(SignedTransaction.from_doc(doc))
        except (ValueError, UnicodeDecodeError, InvalidTransaction) as exc:
            parse_fail = ChainReport(len(blocks), f"unparseable line: {exc}")
            break
    if parse_fail is None and damaged_tail:
        parse_fail = ChainReport(len(blocks), "truncated final line")

    keys = keys_factory(header) if keys_factory else None
    report = verify_blocks(blocks, pending if parse_fail is None else [], keys)
    if parse_fail is not None and (report.ok or parse_fail.first_bad_seq < report.first_bad_seq):
        report = parse_fail
    return LoadedChain(header, blocks, pending, report)


def export_lines(ledger: Ledger, chain_id: str, operator_key: str) -> list[str]:
    """Chain export: header line then one canonical transaction per line."""
    header = {
        "chain_id": chain_id,
        "genesis_hash": ledger.blocks[0].block_hash if ledger.blocks else ZERO_HASH,
        "operator_key": operator_key,
        "block_sizes": [len(b.txs) for b in ledger.blocks],
        "block_size": ledger.block_size,
    }
    return [canonical_text(header)] + [canonical_text(tx.to_doc()) for tx in ledger.transactions()]
