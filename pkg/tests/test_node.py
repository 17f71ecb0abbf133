import pytest

from coopledger.demo import DemoError, workflow_demo
from coopledger.errors import CorruptStore, InvalidConfig, PermissionDenied
from coopledger.node import Node, NodeConfig

from conftest import make_coop


def grow_to(coop, n):
    offer = coop.offer("ada", price=5)
    while len(coop.node.ledger) < n:
        coop.node.record_payment(coop["pia"], 5, "USD", offer.offer_id)


def test_empty_dir_starts_healthy(tmp_path):
    node = Node.open(tmp_path / "n")
    assert len(node.ledger) == 0 and node.verify_store().ok
    assert (tmp_path / "n" / "chain.jsonl").exists()


def test_restart_after_50_txs(tmp_path):
    coop = make_coop(Node.open(tmp_path / "n"))
    grow_to(coop, 50)
    head, digest = coop.node.ledger.head_hash, coop.node.state_digest()
    tx_ids = [t.tx_id for t in coop.node.ledger.transactions()]
    again = Node.open(tmp_path / "n")
    assert len(again.ledger) == 50
    assert again.ledger.head_hash == head and again.state_digest() == digest
    assert [t.tx_id for t in again.ledger.transactions()] == tx_ids
    assert again.verify_chain().ok


def test_restarted_node_keeps_working(tmp_path):
    coop = make_coop(Node.open(tmp_path / "n"))
    offer = coop.offer("ada", price=0)
    coop.node = Node.open(tmp_path / "n")
    grant = coop.grant(coop.node.state.contracts.get_offer(offer.offer_id))
    assert grant.offer_id == offer.offer_id
    assert Node.open(tmp_path / "n").state_digest() == coop.node.state_digest()


def test_tampered_chain_names_first_bad_block(tmp_path):
    coop = make_coop(Node.open(tmp_path / "n"))
    grow_to(coop, 40)
    path = tmp_path / "n" / "chain.jsonl"
    lines = path.read_text().splitlines()
    seals = [i for i, line in enumerate(lines) if line.startswith('{"seal"')]
    target = seals[0] + 3
    lines[target] = lines[target].replace('"amount_minor":5', '"amount_minor":6', 1)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(CorruptStore) as info:
        Node.open(tmp_path / "n")
    assert info.value.first_bad_seq == 1 and info.value.exit_code == 2


def test_export_import_round_trip(tmp_path):
    coop = make_coop(Node.open(tmp_path / "a"))
    grow_to(coop, 37)
    coop.node.seal_block()
    grow_to(coop, 40)
    lines = coop.node.export_chain()
    copy = Node.import_chain(lines, NodeConfig(data_dir=tmp_path / "b"))
    assert copy.ledger.head_hash == coop.node.ledger.head_hash
    assert [b.block_hash for b in copy.ledger.blocks] == [b.block_hash for b in coop.node.ledger.blocks]
    assert copy.state_digest() == coop.node.state_digest()
    assert copy.export_chain() == lines
    assert Node(NodeConfig(data_dir=tmp_path / "b")).ledger.head_hash == copy.ledger.head_hash


def test_import_refuses_occupied_dir(tmp_path):
    coop = make_coop(Node.open(tmp_path / "a"))
    with pytest.raises(InvalidConfig):
        Node.import_chain(coop.node.export_chain(), NodeConfig(data_dir=tmp_path / "a"))
    with pytest.raises(InvalidConfig):
        Node.import_chain(['{"not":"a header"}'], NodeConfig(data_dir=tmp_path / "c"))


def test_imported_node_cannot_sign_as_operator(tmp_path):
    coop = make_coop(Node.open(tmp_path / "a"))
    copy = Node.import_chain(coop.node.export_chain(), NodeConfig(data_dir=tmp_path / "b"))
    assert copy.member("m2").public_key == coop["ada"].key.public_key
    with pytest.raises(PermissionDenied):
        copy.register_member(copy.operator_signer, "x", ["Composer"], coop["ada"].key.public_key)


def test_invalid_node_config():
    with pytest.raises(InvalidConfig):
        Node(NodeConfig(k_threshold=0))


def test_default_demo_ends_with_conservation():
    transcript = workflow_demo(Node(NodeConfig()))
    assert transcript[-1] == "disbursed == paid: 1000 == 1000 -> True"
    assert any(line.startswith("step 6: grant lic:") for line in transcript)
    assert "digest_ok=True signature_ok=True" in transcript[1]


def test_free_demo_skips_payment():
    transcript = workflow_demo(Node(NodeConfig()), price=0)
    assert "step 5: free offer, no payment" in transcript
    assert any(line.startswith("step 6: grant") and line.endswith("payment=None") for line in transcript)


def test_three_writer_demo_pays_34_34_33():
    node = Node(NodeConfig())
    workflow_demo(node, price=101, writers=3)
    payouts = sorted((node.holder_statement(m).total for m in ("m2", "m3", "m4")), reverse=True)
    assert payouts == [34, 34, 33]


def test_demo_is_deterministic(tmp_path):
    a = workflow_demo(Node(NodeConfig(operator_seed="11" * 32)))
    b = workflow_demo(Node(NodeConfig(operator_seed="11" * 32)))
    assert a == b


def test_demo_needs_fresh_node():
    node = Node(NodeConfig())
    workflow_demo(node)
    with pytest.raises(DemoError) as info:
        workflow_demo(node)
    assert info.value.step == "0"


@pytest.mark.parametrize("stop_after", range(7))
def test_demo_resumes_after_restart(tmp_path, stop_after):
    seed = "22" * 32
    reference = Node(NodeConfig(operator_seed=seed))
    expected = workflow_demo(reference)
    first = Node.open(tmp_path / "n", operator_seed=seed)
    workflow_demo(first, stop_after=stop_after)
    resumed = Node.open(tmp_path / "n")
    transcript = workflow_demo(resumed)
    assert resumed.ledger.head_hash == reference.ledger.head_hash
    assert transcript == expected
