"""A cooperative node: ledger, state machines, repository and OPAL engine.

All ledger-backed state is rebuilt by replaying the chain on startup.
Repository objects, engine-side member records and the audit log are
persisted next to the chain in ``data_dir``.
"""
from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

from coopledger.canonical import ZERO_HASH, canonical_bytes, digest_hex, sha256_hex
from coopledger.contracts import Contracts, GrantStatus, LicenseGrant, OfferTerms, license_message
from coopledger.crypto import KeyPair
from coopledger.errors import (
    CoopError,
    CorruptStore,
    Dangling,
    InvalidConfig,
    InvalidMetadata,
    MissingProse,
    NotFound,
    PermissionDenied,
    UnresolvableWork,
)
from coopledger.identity import (
    OPERATOR,
    Action,
    DepartureReceipt,
    Identity,
    KeyBook,
    MemberRecord,
    register_payload,
)
from coopledger.ledger import (
    Block,
    ChainReport,
    ChainStore,
    Ledger,
    SignedTransaction,
    TxKind,
    TxReceipt,
    export_lines,
    load_chain_file,
)
from coopledger.opal import (
    AlgorithmManifest,
    AuditLog,
    Governance,
    OpalEngine,
    RecordStore,
)
from coopledger.payments import Payments, SplitsTable
from coopledger.registry import (
    CreationMetadata,
    Repository,
    ResolvedWork,
    WorkRegistry,
    pointer_for,
    validate_creation_metadata,
    work_register_payload,
)

logger = logging.getLogger(__name__)

ENV_DATA_DIR = "COOPLEDGER_DATA"


@dataclass
class NodeConfig:
    data_dir: Path | None = None
    k_threshold: int = 5
    quorum: int = 1
    block_size: int = 16
    listen_endpoint: str = "127.0.0.1:8740"
    chain_id: str = "coop-main"
    operator_seed: str | None = None

    def validate(self) -> None:
        for name in ("k_threshold", "quorum", "block_size"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise InvalidConfig(f"{name} must be an integer >= 1")
        host, _, port = self.listen_endpoint.rpartition(":")
        if not host or not port.isdigit():
            raise InvalidConfig("listen_endpoint must be host:port")
        if self.data_dir is not None:
            path = Path(self.data_dir)
            if path.exists() and not os.access(path, os.W_OK):
                raise InvalidConfig(f"data_dir {path} is not writable")

    def to_doc(self) -> dict:
        doc = asdict(self)
        doc.pop("data_dir")
        doc.pop("operator_seed")
        return doc

    @classmethod
    def from_doc(cls, doc: Mapping, data_dir: Path | None = None) -> "NodeConfig":
        known = {"k_threshold", "quorum", "block_size", "listen_endpoint", "chain_id"}
        return cls(data_dir=data_dir, **{k: v for k, v in doc.items() if k in known})


@dataclass(frozen=True)
class Signer:
    """A member id plus the key it signs with."""

    member_id: str
    key: KeyPair

    def sign(self, kind: TxKind | str, payload: dict, logical_time: int) -> SignedTransaction:
        return SignedTransaction.create(kind, payload, self.member_id, logical_time, self.key)


class CoopState:
    """Ledger-derived state for every module, updated in a fixed order."""

    def __init__(self, operator_key: str, quorum: int = 1):
        self.identity = Identity(operator_key)
        self.registry = WorkRegistry(self.identity)
        self.payments = Payments(self.identity)
        self.contracts = Contracts(self.identity, self.registry, self.payments)
        self.payments.contracts = self.contracts
        self.governance = Governance(self.identity, quorum=quorum)
        self._handlers: dict[str, Callable[[SignedTransaction, bool], Any]] = {
            TxKind.MEMBER_REGISTER.value: self.identity.handle_register,
            TxKind.MEMBER_DEPART.value: self.identity.handle_depart,
            TxKind.WORK_REGISTER.value: self.registry.handle_register,
            TxKind.ALG_APPROVE.value: self.governance.handle_approve,
            TxKind.CONSENT_SET.value: self.governance.handle_consent,
            TxKind.OFFER_DEPLOY.value: self.contracts.handle_deploy,
            TxKind.LICENSE_REQUEST.value: self.contracts.handle_request,
            TxKind.LICENSE_REVOKE.value: self.contracts.handle_revoke,
            TxKind.PAYMENT_RECORD.value: self.payments.handle_record,
            TxKind.DISBURSE_EXEC.value: self.payments.handle_disburse,
        }

    def apply(self, tx: SignedTransaction, commit: bool) -> Any:
        """Validate ``tx`` against current state; with ``commit`` also mutate."""
        if tx.author == OPERATOR and tx.kind != TxKind.MEMBER_REGISTER.value:
            raise PermissionDenied("the operator key only bootstraps membership")
        result = self._handlers[tx.kind](tx, commit)
        if commit:
            self.identity.note_tx(tx)
            if tx.kind == TxKind.MEMBER_DEPART.value:
                self.contracts.close_offers_of(tx.author)
        return result

    def snapshot(self) -> dict:
        """Canonical dump of all ledger-derived state (for equality checks)."""
        return {
            "members": [m.to_doc() for m in self.identity.members.values()],
            "works": [e.to_doc() for h in self.registry.entries.values() for e in h],
            "offers": [o.to_doc() for o in self.contracts.offers.values()],
            "grants": [g.to_doc() for g in self.contracts.grants.values()],
            "receipts": [r.to_doc() for r in self.payments.receipts.values()],
            "disbursements": [d.to_doc() for d in self.payments.disbursements.values()],
            "algorithms": [a.to_doc() for a in self.governance.algorithms.values()],
            "consents": [c.to_doc() for c in self.governance.consents.values()],
        }


class VerifyOnlyKey:
    """Operator identity for a mirror that holds only the public half."""

    def __init__(self, public_key: str):
        self.public_key = public_key

    def sign(self, message: bytes) -> str:
        raise PermissionDenied("this node holds only the operator's public key")


class Node:
    def __init__(self, config: NodeConfig | None = None, operator_public_key: str | None = None):
        self.config = config or NodeConfig()
        self.config.validate()
        self._lock = threading.RLock()
        data_dir = Path(self.config.data_dir) if self.config.data_dir is not None else None
        self.data_dir = data_dir
        if data_dir is not None:
            data_dir.mkdir(parents=True, exist_ok=True)
        self.operator = self._load_operator_key(operator_public_key)
        self.state = CoopState(self.operator.public_key, self.config.quorum)

        store = None
        loaded = None
        if data_dir is not None:
            store = ChainStore(data_dir / "chain.jsonl")
            if store.path.exists():
                loaded = load_chain_file(store.path, lambda h: KeyBook(h["operator_key"]))
                if not loaded.report.ok:
                    raise CorruptStore(loaded.report.first_bad_seq, loaded.report.detail)
                if loaded.header["operator_key"] != self.operator.public_key:
                    raise CorruptStore(0, "operator key does not match chain header")
            else:
                store.create(self.config.chain_id, self.operator.public_key, self.config.block_size)
        self.ledger = Ledger(block_size=self.config.block_size, authorizer=self.state.identity.author_key)

        self.repository = Repository(data_dir / "objects" if data_dir else None)
        self.records = RecordStore(data_dir / "opal" / "records.jsonl" if data_dir else None)
        self.audit = AuditLog(data_dir / "opal" / "audit.jsonl" if data_dir else None)
        self.opal = OpalEngine(self.state.identity, self.state.governance, self.records, self.audit,
                               self.config.k_threshold)
        self._swept_through: int | None = None

        if loaded is not None:
            self._replay(loaded.blocks, loaded.open_txs)
        self.ledger.store = store
        self._load_node_state()

    # -- setup -----------------------------------------------------------

    @classmethod
    def open(cls, data_dir: str | Path | None = None, **overrides) -> "Node":
        """Open (or create) a node in ``data_dir``; ``COOPLEDGER_DATA`` overrides it."""
        data_dir = Path(os.environ.get(ENV_DATA_DIR) or data_dir or "coop-data")
        cfg_path = data_dir / "node.json"
        if cfg_path.exists():
            config = NodeConfig.from_doc(json.loads(cfg_path.read_text()), data_dir)
            for k, v in overrides.items():
                setattr(config, k, v)
        else:
            config = NodeConfig(data_dir=data_dir, **overrides)
            config.validate()
            data_dir.mkdir(parents=True, exist_ok=True)
            cfg_path.write_bytes(canonical_bytes(config.to_doc()))
        return cls(config)

    def _load_operator_key(self, public_key: str | None = None) -> KeyPair | VerifyOnlyKey:
        pub_path = self.data_dir / "operator.pub" if self.data_dir is not None else None
        if public_key is None and pub_path is not None and pub_path.exists():
            public_key = pub_path.read_text().strip()
        if public_key is not None:
            if pub_path is not None:
                pub_path.write_text(public_key)
            return VerifyOnlyKey(public_key)
        if self.config.operator_seed:
            key = KeyPair.from_hex(self.config.operator_seed)
        elif self.data_dir is not None and (self.data_dir / "operator.key").exists():
            return KeyPair.from_hex((self.data_dir / "operator.key").read_text().strip())
        else:
            key = KeyPair.generate()
        if self.data_dir is not None and not (self.data_dir / "operator.key").exists():
            (self.data_dir / "operator.key").write_text(key.seed_hex)
        return key

    def _replay(self, blocks: list[Block], open_txs: list[SignedTransaction]) -> None:
        seq = 0
        for seq, txs in [(b.seq, b.txs) for b in blocks] + [(len(blocks), tuple(open_txs))]:
            for tx in txs:
                try:
                    result = self.state.apply(tx, commit=True)
                except CoopError as exc:
                    raise CorruptStore(seq, f"replay rejected {tx.kind}: {exc.code}") from exc
                self._after_commit(tx, result)
        self.ledger.restore(blocks, open_txs)
        logger.info("replayed %d transactions in %d blocks", len(self.ledger), len(blocks))

    def _load_node_state(self) -> None:
        if self.data_dir is None:
            return
        path = self.data_dir / "state.json"
        if path.exists():
            self._swept_through = json.loads(path.read_text()).get("swept_through")
            if self._swept_through is not None:
                self.state.contracts.sweep_expirations(self._swept_through)

    def _save_node_state(self) -> None:
        if self.data_dir is not None:
            (self.data_dir / "state.json").write_bytes(canonical_bytes({"swept_through": self._swept_through}))

    # -- core write path ---------------------------------------------------

    @property
    def now(self) -> int:
        return self.ledger.head_time

    def tick(self) -> int:
        return self.now + 1

    @property
    def operator_signer(self) -> Signer:
        return Signer(OPERATOR, self.operator)

    def submit(self, tx: SignedTransaction, precheck: bool = True) -> tuple[Any, TxReceipt]:
        """Validate, append and apply one signed transaction.

        ``precheck=False`` skips the repository-content checks; import uses it
        because exported chains carry digests, not the objects behind them.
        """
        with self._lock:
            self.ledger.check(tx)
            if precheck:
                self._precheck(tx)
            self.state.apply(tx, commit=False)
            receipt = self.ledger.append(tx)
            result = self.state.apply(tx, commit=True)
            extra = self._after_commit(tx, result)
            return (extra if extra is not None else result), receipt

    def _precheck(self, tx: SignedTransaction) -> None:
        """Checks that need repository contents, done only at submission time."""
        if tx.kind == TxKind.WORK_REGISTER.value:
            digest = tx.payload.get("metadata_digest")
            try:
                doc = json.loads(self.repository.get(digest))
            except (NotFound, TypeError, ValueError):
                raise InvalidMetadata("document: metadata must be stored in the repository first") from None
            reason = validate_creation_metadata(doc, self.state.identity.members)
            if reason:
                raise InvalidMetadata(reason)
            expected = work_register_payload(doc, digest, pointer_for(self.config.chain_id, doc["work_id"]))
            if expected != tx.payload:
                raise InvalidMetadata("document: payload does not match the stored metadata")
        elif tx.kind == TxKind.OFFER_DEPLOY.value:
            terms = OfferTerms.from_payload(tx.payload)
            entry = self.state.registry.by_tx.get(terms.work_tx_id)
            if entry is None or entry.work_id != terms.work_id:
                raise UnresolvableWork(terms.work_id)
            try:
                resolved = self.state.registry.resolve(entry.work_id, self.repository, entry)
            except Dangling:
                raise UnresolvableWork(f"{terms.work_id}: metadata no longer held") from None
            if not resolved.digest_ok:
                raise UnresolvableWork(f"{terms.work_id}: metadata digest does not verify")
            if terms.prose_digest not in self.repository:
                raise MissingProse(f"prose {terms.prose_digest[:12]} is not in the repository")
            if sha256_hex(self.repository.get(terms.prose_digest)) != terms.prose_digest:
                raise MissingProse("stored prose does not match its digest")

    def _after_commit(self, tx: SignedTransaction, result: Any) -> Any:
        if tx.kind == TxKind.MEMBER_DEPART.value:
            purged = self.repository.purge_owner(tx.author)
            records = self.records.purge_owner(tx.author)
            logger.info("member %s departed: %d objects, %d records purged", tx.author, purged, records)
            return DepartureReceipt(
                tx.author, tx.logical_time, purged, self.state.identity.tx_counts[tx.author] - 1
            )
        return None

    def _at(self, at: int | None) -> int:
        return self.tick() if at is None else at

    def seal_block(self) -> Block:
        with self._lock:
            return self.ledger.seal_block()

    # -- identity ----------------------------------------------------------

    def register_member(self, sponsor: Signer, display_name: str, roles: Iterable[str],
                        public_key: str, at: int | None = None) -> MemberRecord:
        tx = sponsor.sign(TxKind.MEMBER_REGISTER, register_payload(display_name, roles, public_key), self._at(at))
        return self.submit(tx)[0]

    def depart_member(self, member: Signer, at: int | None = None) -> DepartureReceipt:
        tx = member.sign(TxKind.MEMBER_DEPART, {"member_id": member.member_id}, self._at(at))
        return self.submit(tx)[0]

    def member(self, member_id: str) -> MemberRecord:
        return self.state.identity.get(member_id)

    def authorize(self, member_id: str, action: Action | str) -> bool:
        return self.state.identity.authorize(member_id, action)

    # -- registry ----------------------------------------------------------

    def store_asset(self, data: bytes, owner: str) -> str:
        if not self.state.identity.is_active(owner):
            raise PermissionDenied(f"{owner} is not an active member")
        return self.repository.put(data, owner)

    def fetch_asset(self, digest: str) -> bytes:
        return self.repository.get(digest)

    def register_work(self, doc: Mapping | CreationMetadata, registrant: Signer, at: int | None = None):
        if isinstance(doc, CreationMetadata):
            doc = doc.to_doc()
        reason = validate_creation_metadata(doc, self.state.identity.members)
        if reason:
            raise InvalidMetadata(reason)
        data = canonical_bytes(doc)
        payload = work_register_payload(doc, sha256_hex(data), pointer_for(self.config.chain_id, doc["work_id"]))
        tx = registrant.sign(TxKind.WORK_REGISTER, payload, self._at(at))
        with self._lock:
            self.ledger.check(tx)
            self.state.apply(tx, commit=False)
            self.repository.put(data, registrant.member_id)
            return self.submit(tx)[0]

    def resolve_work(self, work_id: str) -> ResolvedWork:
        return self.state.registry.resolve(work_id, self.repository)

    def resolve_pointer(self, pointer: str) -> ResolvedWork:
        prefix = f"coop://{self.config.chain_id}/meta/"
        if not pointer.startswith(prefix):
            raise NotFound(f"{pointer} is not resolvable by this node")
        return self.resolve_work(pointer[len(prefix):])

    # -- contracts ---------------------------------------------------------

    def deploy_license_offer(self, terms: OfferTerms, licensor: Signer, at: int | None = None):
        return self.submit(licensor.sign(TxKind.OFFER_DEPLOY, terms.to_payload(), self._at(at)))[0]

    def execute_license_request(self, offer_id: str, licensee: Signer, payment_ref: str | None = None,
                                at: int | None = None) -> LicenseGrant:
        offer = self.state.contracts.get_offer(offer_id)
        sig = licensee.key.sign(license_message(offer_id, offer.terms.prose_digest))
        payload = {"offer_id": offer_id, "payment_ref": payment_ref, "licensee_sig": sig}
        return self.submit(licensee.sign(TxKind.LICENSE_REQUEST, payload, self._at(at)))[0]

    def revoke_grant(self, grant_id: str, licensor: Signer, reason: str, at: int | None = None) -> LicenseGrant:
        payload = {"grant_id": grant_id, "reason": reason}
        return self.submit(licensor.sign(TxKind.LICENSE_REVOKE, payload, self._at(at)))[0]

    def sweep_expirations(self, now: int) -> list[str]:
        with self._lock:
            expired = self.state.contracts.sweep_expirations(now)
            self._swept_through = max(now, self._swept_through or 0)
            self._save_node_state()
            return expired

    def verify_license(self, grant_id: str, at: int) -> GrantStatus:
        return self.state.contracts.verify_license(grant_id, at)

    # -- payments ----------------------------------------------------------

    def record_payment(self, payer: Signer, amount_minor: int, currency: str, reference: str,
                       at: int | None = None):
        payload = {"amount_minor": amount_minor, "currency": currency, "reference": reference}
        return self.submit(payer.sign(TxKind.PAYMENT_RECORD, payload, self._at(at)))[0]

    def payments_for_offer(self, offer_id: str):
        return self.state.payments.payments_for_offer(offer_id)

    def disburse(self, receipt_id: str, splits: SplitsTable, licensor: Signer, at: int | None = None):
        payload = {"receipt_id": receipt_id, "splits": splits.to_doc()}
        return self.submit(licensor.sign(TxKind.DISBURSE_EXEC, payload, self._at(at)))[0]

    def holder_statement(self, member_id: str):
        return self.state.payments.holder_statement(member_id)

    # -- opal --------------------------------------------------------------

    def ingest_record(self, owner: str, schema_id: str, attributes: Mapping[str, Any]) -> str:
        with self._lock:
            return self.opal.ingest_record(owner, schema_id, attributes, self.now)

    def register_algorithm(self, manifest: AlgorithmManifest, approvals: Iterable[tuple[str, str]],
                           submitter: Signer, at: int | None = None) -> str:
        payload = {"manifest": manifest.to_doc(), "approvals": [list(a) for a in approvals]}
        return self.submit(submitter.sign(TxKind.ALG_APPROVE, payload, self._at(at)))[0].alg_id

    def set_consent(self, member: Signer, alg_id: str, granted: bool, at: int | None = None):
        payload = {"alg_id": alg_id, "granted": granted}
        return self.submit(member.sign(TxKind.CONSENT_SET, payload, self._at(at)))[0]

    def execute_query(self, alg_id: str, requester: str):
        with self._lock:
            return self.opal.execute_query(alg_id, requester, self.now)

    def read_audit_log(self, reader: str, **filters):
        return self.opal.read_audit_log(reader, **filters)

    # -- chain -------------------------------------------------------------

    def read_entry(self, tx_id: str) -> tuple[SignedTransaction, TxReceipt]:
        return self.ledger.read_entry(tx_id)

    def verify_chain(self) -> ChainReport:
        return self.ledger.verify_chain(KeyBook(self.operator.public_key))

    def verify_store(self) -> ChainReport:
        if self.data_dir is None:
            return self.verify_chain()
        return load_chain_file(self.data_dir / "chain.jsonl", lambda h: KeyBook(h["operator_key"])).report

    def public_key_of(self, author: str) -> str:
        if author == OPERATOR:
            return self.operator.public_key
        return self.member(author).public_key

    def export_chain(self) -> list[str]:
        return export_lines(self.ledger, self.config.chain_id, self.operator.public_key)

    @classmethod
    def import_chain(cls, lines: Iterable[str], config: NodeConfig) -> "Node":
        """Build a node by re-submitting an exported chain; block boundaries are reproduced.

        The new node trusts the operator key named in the header and holds
        only its public half.
        """
        lines = [l for l in lines if l.strip()]
        if not lines:
            raise InvalidConfig("import file is empty")
        header = json.loads(lines[0])
        if not isinstance(header, dict) or not {"chain_id", "genesis_hash", "operator_key", "block_sizes"} <= set(header):
            raise InvalidConfig("import file does not start with a chain header")
        if config.data_dir is not None and (Path(config.data_dir) / "chain.jsonl").exists():
            raise InvalidConfig(f"{config.data_dir} already holds a chain")
        config.chain_id = header["chain_id"]
        config.block_size = header.get("block_size", config.block_size)
        node = cls(config, operator_public_key=header["operator_key"])
        sizes = list(header["block_sizes"])
        in_block = 0
        for line in lines[1:]:
            node.submit(SignedTransaction.from_doc(json.loads(line)), precheck=False)
            in_block += 1
            if sizes and in_block == sizes[0]:
                if node.ledger.open_txs:
                    node.seal_block()
                sizes.pop(0)
                in_block = 0
        genesis = node.ledger.blocks[0].block_hash if node.ledger.blocks else ZERO_HASH
        if genesis != header["genesis_hash"]:
            raise CorruptStore(0, "genesis hash differs after import")
        return node

    def state_digest(self) -> str:
        return digest_hex(self.state.snapshot())
