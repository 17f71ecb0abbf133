import dataclasses
import json

import pytest
from hypothesis import given, settings, strategies as st

from coopledger.errors import (
    AlgorithmNotApproved,
    BadSignature,
    InsufficientApprovals,
    PermissionDenied,
    UnknownAlgorithm,
)
from coopledger.node import Node, NodeConfig
from coopledger.opal import AlgorithmManifest, AuditLog

from conftest import approve, make_coop, populate


def test_ingest_returns_handle(coop):
    handle = coop.node.ingest_record(coop["ada"].member_id, "income.v1", {"region": "EU", "income": 42000})
    assert handle.startswith("rec:")


def test_departed_member_cannot_ingest(coop):
    coop.node.depart_member(coop["ben"])
    with pytest.raises(PermissionDenied):
        coop.node.ingest_record(coop["ben"].member_id, "income.v1", {"income": 1})


def test_approval_with_one_signature():
    coop = make_coop()
    alg_id = approve(coop, "Mean")
    assert coop.node.state.governance.algorithms[alg_id].manifest.target_field == "income"


def test_approval_needs_signatures(coop):
    manifest = AlgorithmManifest("Mean", "income.v1", "income", "region")
    with pytest.raises(InsufficientApprovals):
        coop.node.register_algorithm(manifest, [], coop["ops"])


def test_same_signer_twice_does_not_meet_quorum_two():
    coop = make_coop(Node(NodeConfig(quorum=2)))
    manifest = AlgorithmManifest("Mean", "income.v1", "income", "region")
    sig = manifest.approve(coop["ops"].member_id, coop["ops"].key)
    with pytest.raises(InsufficientApprovals):
        coop.node.register_algorithm(manifest, [sig, sig], coop["ops"])
    coop.add("cy", ["GovernanceCommittee"])
    alg_id = coop.node.register_algorithm(manifest, [sig, manifest.approve("m6", coop["cy"].key)], coop["ops"])
    assert alg_id == manifest.alg_id


def test_forged_approval(coop):
    manifest = AlgorithmManifest("Count", "income.v1", None, "region")
    with pytest.raises(BadSignature):
        coop.node.register_algorithm(manifest, [manifest.approve("m1", coop["ada"].key)], coop["ops"])


def test_non_committee_approver(coop):
    manifest = AlgorithmManifest("Count", "income.v1", None, "region")
    with pytest.raises(PermissionDenied):
        coop.node.register_algorithm(manifest, [manifest.approve("m2", coop["ada"].key)], coop["ops"])


def test_consent_to_unknown_algorithm(coop):
    with pytest.raises(UnknownAlgorithm):
        coop.node.set_consent(coop["ada"], "alg:0000000000000000", True)


def test_consent_latest_wins(coop):
    alg_id = approve(coop, "Count")
    populate(coop, {"EU": [1] * 10}, consent_to=())
    members = [m for m in coop.signers if m.startswith("p-EU")]
    for name in members[:7]:
        coop.node.set_consent(coop[name], alg_id, True)
    assert len(coop.node.opal.cohort(alg_id)) == 7
    coop.node.set_consent(coop[members[0]], alg_id, False)
    assert len(coop.node.opal.cohort(alg_id)) == 6
    coop.node.set_consent(coop[members[0]], alg_id, True)
    assert len(coop.node.opal.cohort(alg_id)) == 7


def test_mean_by_region_with_suppression(coop):
    alg_id = approve(coop, "Mean")
    populate(coop, {"EU": [10, 20, 30, 40, 50, 60], "US": [5, 6, 7]}, consent_to=[alg_id])
    result = coop.node.execute_query(alg_id, coop["dsp"].member_id)
    assert result.group("EU").value == 35
    assert result.group("EU").contributor_count == 6
    assert result.group("US").value == "SUPPRESSED"
    assert result.to_doc()["groups"][1] == {"label": "US", "contributors": "<5", "value": "SUPPRESSED"}


def test_histogram_and_sum(coop):
    hist = approve(coop, "Histogram", target="region", group_by=None)
    total = approve(coop, "Sum")
    populate(coop, {"EU": [1, 2, 3, 4, 5], "US": [1]}, consent_to=[hist, total])
    h = coop.node.execute_query(hist, "m1").group("*")
    assert h.value == {"EU": 5, "US": 1} and h.contributor_count == 6
    s = coop.node.execute_query(total, "m1")
    assert s.group("EU").value == 15 and s.group("US").suppressed


def test_no_consent_single_suppressed_group(coop):
    alg_id = approve(coop, "Count")
    populate(coop, {"EU": [1] * 6})
    result = coop.node.execute_query(alg_id, "m1")
    assert [(g.label, g.value) for g in result.groups] == [("*", "SUPPRESSED")]


def test_departure_removes_records_from_cohorts(coop):
    alg_id = approve(coop, "Count")
    populate(coop, {"EU": [1] * 5}, consent_to=[alg_id])
    assert coop.node.execute_query(alg_id, "m1").group("EU").value == 5
    coop.node.depart_member(coop["p-EU-0"])
    assert len(coop.node.records) == 4
    assert coop.node.execute_query(alg_id, "m1").group("EU").value == "SUPPRESSED"


def test_unapproved_algorithm_refused_and_audited(coop):
    with pytest.raises(AlgorithmNotApproved):
        coop.node.execute_query("alg:ffffffffffffffff", "m2")
    [entry] = coop.node.audit.entries
    assert entry.outcome == "AlgorithmNotApproved"
    assert coop.node.audit.verify().ok


def test_audit_counts_and_verifies(coop):
    alg_id = approve(coop, "Count")
    for _ in range(3):
        coop.node.execute_query(alg_id, "m2")
    assert len(coop.node.read_audit_log("m1")) == 3
    assert coop.node.audit.verify().ok


def test_members_read_only_their_own_audit_entries(coop):
    alg_id = approve(coop, "Count")
    coop.node.execute_query(alg_id, "m2")
    coop.node.execute_query(alg_id, "m3")
    assert [e.requester for e in coop.node.read_audit_log("m2")] == ["m2"]
    with pytest.raises(PermissionDenied):
        coop.node.read_audit_log("m2", requester="m3")
    assert len(coop.node.read_audit_log("m1", alg_id=alg_id)) == 2


def test_persisted_audit_tamper_detected(tmp_path):
    coop = make_coop(Node.open(tmp_path / "n"))
    alg_id = approve(coop, "Count")
    for _ in range(3):
        coop.node.execute_query(alg_id, "m2")
    path = tmp_path / "n" / "opal" / "audit.jsonl"
    lines = path.read_text().splitlines()
    doc = json.loads(lines[1])
    doc["cohort_size"] += 1
    lines[1] = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    path.write_text("\n".join(lines) + "\n")
    report = AuditLog(path).verify()
    assert (report.ok, report.first_bad_seq) == (False, 1)


def test_in_memory_audit_tamper_detected(coop):
    alg_id = approve(coop, "Count")
    for _ in range(4):
        coop.node.execute_query(alg_id, "m2")
    log = coop.node.audit
    log.entries[2] = dataclasses.replace(log.entries[2], requester="m3")
    assert log.verify().first_bad_seq == 2


@settings(max_examples=60, deadline=None)
@given(sizes=st.lists(st.integers(0, 12), min_size=1, max_size=6), k1=st.integers(1, 10), k2=st.integers(1, 10))
def test_raising_k_never_emits_more_groups(sizes, k1, k2):
    lo, hi = sorted((k1, k2))
    coop = make_coop()
    alg_id = approve(coop, "Count")
    populate(coop, {f"r{i}": [1] * n for i, n in enumerate(sizes)}, consent_to=[alg_id])
    coop.node.opal.k_threshold = lo
    low = {g.label for g in coop.node.execute_query(alg_id, "m1").emitted}
    coop.node.opal.k_threshold = hi
    high = {g.label for g in coop.node.execute_query(alg_id, "m1").emitted}
    assert high <= low
    assert low == {f"r{i}" for i, n in enumerate(sizes) if n >= lo}
