"""Scripted end-to-end licensing workflow.

Walks the full path from membership through registration (steps 1-3),
offer, payment and license grant (steps 4-7) to splits disbursement
(step 9). Keys and the work id are fixed, so the transcript is reproducible.
Progress is checkpointed in ``demo.json`` when the node has a data dir, which
lets a run stop after any step and resume on a restarted node.
"""
from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

from coopledger.canonical import canonical_bytes
from coopledger.contracts import LicenseKind, OfferTerms
from coopledger.crypto import KeyPair
from coopledger.errors import CoopError
from coopledger.node import Node, Signer
from coopledger.payments import SplitsTable
from coopledger.registry import CreationMetadata, new_work_id

PROSE = (
    "MECHANICAL LICENSE. The licensor grants the licensee a non-exclusive right to "
    "reproduce the referenced musical work in sound recordings, subject to payment of "
    "the stated fee. The work is identified solely by its registry transaction."
)

WRITER_NAMES = ("Ada", "Ben", "Cy", "Dee", "Eli")


class DemoError(CoopError):
    def __init__(self, step: str, cause: Exception):
        super().__init__(f"demo aborted at step {step}: {cause}")
        self.step = step
        self.cause = cause


@dataclass
class DemoRun:
    price: int = 1000
    writers: int = 2
    seed: int = 7
    ctx: dict = field(default_factory=dict)
    transcript: list[str] = field(default_factory=list)

    def key(self, label: str) -> KeyPair:
        return KeyPair.from_label(f"demo-{self.seed}-{label}")

    def signer(self, label: str) -> Signer:
        return Signer(self.ctx["ids"][label], self.key(label))

    @property
    def writer_labels(self) -> list[str]:
        return [WRITER_NAMES[i] for i in range(self.writers)]


def _step_members(node: Node, run: DemoRun) -> None:
    ids = run.ctx.setdefault("ids", {})
    committee = node.register_member(node.operator_signer, "CoopOps", ["GovernanceCommittee"],
                                     run.key("CoopOps").public_key)
    ids["CoopOps"] = committee.member_id
    sponsor = run.signer("CoopOps")
    for name in run.writer_labels:
        ids[name] = node.register_member(sponsor, name, ["Composer"], run.key(name).public_key).member_id
    ids["Pia"] = node.register_member(sponsor, "Pia", ["Publisher"], run.key("Pia").public_key).member_id
    run.transcript.append("members: " + ", ".join(f"{k}={v}" for k, v in sorted(ids.items())))


def _step_register(node: Node, run: DemoRun) -> None:
    lead = run.signer(run.writer_labels[0])
    master = node.store_asset(b"\x00demo-master-recording\x00", lead.member_id)
    doc = CreationMetadata(
        work_id=new_work_id(random.Random(run.seed)),
        title="Harbor Lights",
        creators=tuple((run.ctx["ids"][w], "Composer") for w in run.writer_labels),
        version_label="album-cut",
        asset_digest=master,
        created_note="co-written demo composition",
    )
    entry = node.register_work(doc, lead)
    resolved = node.resolve_work(entry.work_id)
    tx, _ = node.read_entry(entry.tx_id)
    sig_ok = tx.verify_signature(node.public_key_of(tx.author))
    run.ctx.update(work_id=entry.work_id, work_tx=entry.tx_id)
    run.transcript.append(f"steps 1-3: registered {entry.work_id} tx={entry.tx_id[:16]} "
                          f"digest_ok={resolved.digest_ok} signature_ok={sig_ok}")


def _step_offer(node: Node, run: DemoRun) -> None:
    lead = run.signer(run.writer_labels[0])
    prose = node.store_asset(PROSE.encode(), lead.member_id)
    share = Fraction(1, run.writers)
    splits = SplitsTable.of({run.ctx["ids"][w]: share for w in run.writer_labels})
    terms = OfferTerms(run.ctx["work_id"], run.ctx["work_tx"], LicenseKind.MECHANICAL, run.price, "USD",
                       prose, splits)
    offer = node.deploy_license_offer(terms, lead)
    run.ctx["offer_id"] = offer.offer_id
    run.transcript.append(f"step 4: offer {offer.offer_id} price={run.price} USD splits="
                          + ",".join(f"{h}:{s}" for h, s in splits.to_doc()))


def _step_pay(node: Node, run: DemoRun) -> None:
    if run.price == 0:
        run.ctx["receipt_id"] = None
        run.transcript.append("step 5: free offer, no payment")
        return
    receipt = node.record_payment(run.signer("Pia"), run.price, "USD", run.ctx["offer_id"])
    run.ctx["receipt_id"] = receipt.receipt_id
    run.transcript.append(f"step 5: payment {receipt.receipt_id} amount={receipt.amount_minor}")


def _step_license(node: Node, run: DemoRun) -> None:
    grant = node.execute_license_request(run.ctx["offer_id"], run.signer("Pia"), run.ctx["receipt_id"])
    run.ctx["grant_id"] = grant.grant_id
    run.transcript.append(f"step 6: grant {grant.grant_id} to {grant.licensee} payment={grant.payment_ref}")


def _step_verify(node: Node, run: DemoRun) -> None:
    status = node.verify_license(run.ctx["grant_id"], node.now)
    run.transcript.append(f"step 7: license status at {node.now} = {status.value}")


def _step_disburse(node: Node, run: DemoRun) -> None:
    if run.ctx["receipt_id"] is None:
        run.transcript.append("step 9: nothing to disburse")
        run.ctx["payouts"] = []
        return
    offer = node.state.contracts.get_offer(run.ctx["offer_id"])
    d = node.disburse(run.ctx["receipt_id"], offer.terms.splits, run.signer(run.writer_labels[0]))
    run.ctx["payouts"] = [list(p) for p in d.payouts]
    run.transcript.append("step 9: disbursed " + ", ".join(f"{h}={a}" for h, a in d.payouts))


def _step_statements(node: Node, run: DemoRun) -> None:
    total = 0
    for w in run.writer_labels:
        st = node.holder_statement(run.ctx["ids"][w])
        total += st.total
        run.transcript.append(f"statement {w} ({st.member_id}): total={st.total}")
    if node.ledger.open_txs:
        node.seal_block()
    paid = run.price
    run.transcript.append(f"head {node.ledger.head_hash}")
    run.transcript.append(f"disbursed == paid: {total} == {paid} -> {total == paid}")


STEPS: list[tuple[str, Callable[[Node, DemoRun], None]]] = [
    ("0", _step_members),
    ("1-3", _step_register),
    ("4", _step_offer),
    ("5", _step_pay),
    ("6", _step_license),
    ("7", _step_verify),
    ("9", _step_disburse),
    ("10", _step_statements),
]


def workflow_demo(node: Node, *, price: int = 1000, writers: int = 2, seed: int = 7,
                  stop_after: int | None = None) -> list[str]:
    """Run (or resume) the demo on ``node`` and return the transcript lines.

    ``stop_after`` is an index into :data:`STEPS`; a later call on a node
    opened from the same data dir picks up where it stopped.
    """
    if not 1 <= writers <= len(WRITER_NAMES):
        raise ValueError(f"writers must be between 1 and {len(WRITER_NAMES)}")
    checkpoint = node.data_dir / "demo.json" if node.data_dir is not None else None
    run = DemoRun(price=price, writers=writers, seed=seed)
    done = 0
    if checkpoint is not None and checkpoint.exists():
        saved = json.loads(checkpoint.read_text())
        if (saved["price"], saved["writers"], saved["seed"]) != (price, writers, seed):
            raise ValueError("checkpoint belongs to a demo with different parameters")
        run.ctx, run.transcript, done = saved["ctx"], saved["transcript"], saved["done"]
    for index, (label, step) in enumerate(STEPS):
        if index < done:
            continue
        try:
            step(node, run)
        except CoopError as exc:
            raise DemoError(label, exc) from exc
        done = index + 1
        if checkpoint is not None:
            checkpoint.write_bytes(canonical_bytes({
                "price": price, "writers": writers, "seed": seed,
                "ctx": run.ctx, "transcript": run.transcript, "done": done,
            }))
        if stop_after is not None and index >= stop_after:
            break
    return run.transcript
