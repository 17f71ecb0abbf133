from __future__ import annotations

import random
from dataclasses import dataclass, field
from fractions import Fraction

import pytest

from coopledger.contracts import LicenseKind, OfferTerms
from coopledger.crypto import KeyPair
from coopledger.node import Node, NodeConfig, Signer
from coopledger.opal import AlgorithmManifest
from coopledger.payments import SplitsTable
from coopledger.registry import CreationMetadata, new_work_id

PROSE = b"Licensee may reproduce the composition in recordings. Fee as stated."


@dataclass
class Coop:
    """A node plus named signers, for terse tests."""

    node: Node
    signers: dict[str, Signer] = field(default_factory=dict)
    rng: random.Random = field(default_factory=lambda: random.Random(1))

    def __getitem__(self, name: str) -> Signer:
        return self.signers[name]

    def add(self, name: str, roles, sponsor: str | None = "ops") -> Signer:
        key = KeyPair.from_label(f"test-{name}")
        by = self.node.operator_signer if sponsor is None else self.signers[sponsor]
        record = self.node.register_member(by, name, list(roles), key.public_key)
        self.signers[name] = Signer(record.member_id, key)
        return self.signers[name]

    def work(self, owner: str = "ada", creators=None, title: str = "Song A", **extra):
        creators = creators or [owner]
        master = self.node.store_asset(f"master:{title}".encode(), self[owner].member_id)
        doc = CreationMetadata(
            work_id=new_work_id(self.rng), title=title,
            creators=tuple((self[c].member_id, "Composer") for c in creators),
            asset_digest=master, **extra,
        )
        return self.node.register_work(doc, self[owner])

    def offer(self, owner: str = "ada", price: int = 1000, splits=None, term=None, currency="USD", entry=None):
        entry = entry or self.work(owner)
        prose = self.node.store_asset(PROSE, self[owner].member_id)
        splits = splits or {self[owner].member_id: Fraction(1)}
        terms = OfferTerms(entry.work_id, entry.tx_id, LicenseKind.MECHANICAL, price, currency, prose,
                           SplitsTable.of(splits), term)
        return self.node.deploy_license_offer(terms, self[owner])

    def grant(self, offer, licensee: str = "pia", amount: int | None = None):
        ref = None
        if offer.terms.price_minor:
            amt = offer.terms.price_minor if amount is None else amount
            ref = self.node.record_payment(self[licensee], amt, offer.terms.currency, offer.offer_id).receipt_id
        return self.node.execute_license_request(offer.offer_id, self[licensee], ref)


def make_coop(node: Node | None = None) -> Coop:
    coop = Coop(node or Node(NodeConfig()))
    coop.add("ops", ["GovernanceCommittee"], sponsor=None)
    coop.add("ada", ["Composer"])
    coop.add("ben", ["Composer"])
    coop.add("pia", ["Publisher"])
    coop.add("dsp", ["DSP"])
    return coop


@pytest.fixture
def coop() -> Coop:
    return make_coop()


@pytest.fixture
def disk_coop(tmp_path) -> Coop:
    return make_coop(Node.open(tmp_path / "node"))


def approve(coop: Coop, algorithm: str, schema: str = "income.v1", target: str | None = "income",
            group_by: str | None = "region") -> str:
    manifest = AlgorithmManifest(algorithm, schema, None if algorithm == "Count" else target, group_by)
    return coop.node.register_algorithm(manifest, [manifest.approve(coop["ops"].member_id, coop["ops"].key)],
                                        coop["ops"])


def populate(coop: Coop, regions: dict[str, list[int]], consent_to=(), prefix: str = "p") -> dict[str, list[str]]:
    """Register one Composer per income value, ingest its record and grant consent.

    Returns region -> member ids.
    """
    members: dict[str, list[str]] = {}
    for region, incomes in regions.items():
        for i, income in enumerate(incomes):
            name = f"{prefix}-{region}-{i}"
            signer = coop.add(name, ["Composer"])
            coop.node.ingest_record(signer.member_id, "income.v1", {"region": region, "income": income})
            for alg_id in consent_to:
                coop.node.set_consent(signer, alg_id, True)
            members.setdefault(region, []).append(signer.member_id)
    return members


_criteria: dict[str, str] = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.failed:
        _criteria[props["criterion"]] = "FAIL"
    elif report.when == "call":
        _criteria.setdefault(props["criterion"], "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, verdict in sorted(_criteria.items(), key=lambda kv: int(kv[0].split()[0])):
        terminalreporter.write_line(f"{verdict}  {name}")
