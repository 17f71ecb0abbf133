import json

import pytest
from click.testing import CliRunner

from coopledger.cli import cli


@pytest.fixture
def run(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    runner = CliRunner()

    def invoke(*args, data="node", expect=0):
        result = runner.invoke(cli, list(args), env={"COOPLEDGER_DATA": str(tmp_path / data)})
        assert result.exit_code == expect, (result.stdout, result.stderr)
        return result

    return invoke


def out(result):
    return json.loads(result.stdout)


def bootstrap(run):
    for name in ("ops", "ada", "pia"):
        run("key", "gen", "--out", f"{name}.key", "--label", f"cli-{name}")
    run("member", "register", "--key", "ops.key", "--name", "Ops", "--role", "GovernanceCommittee")
    run("member", "register", "--key", "ada.key", "--name", "Ada", "--role", "Composer", "--sponsor", "ops.key")
    run("member", "register", "--key", "pia.key", "--name", "Pia", "--role", "Publisher", "--sponsor", "ops.key")


def test_full_licensing_flow(run, tmp_path):
    bootstrap(run)
    assert out(run("member", "show", "m2"))["display_name"] == "Ada"
    (tmp_path / "master.wav").write_bytes(b"RIFF-master")
    master = out(run("asset", "put", "master.wav", "--key", "ada.key"))["digest"]
    work_id = out(run("work", "new-id"))["work_id"]
    (tmp_path / "meta.json").write_text(json.dumps({
        "work_id": work_id, "title": "Harbor", "creators": [{"member_id": "m2", "role": "Composer"}],
        "version_label": "v1", "asset_digest": master, "created_note": ""}))
    entry = out(run("work", "register", "--meta", "meta.json", "--key", "ada.key"))
    assert out(run("work", "resolve", work_id))["digest_ok"] is True
    (tmp_path / "prose.txt").write_text("License text.")
    prose = out(run("asset", "put", "prose.txt", "--key", "ada.key"))["digest"]
    offer = out(run("offer", "deploy", "--key", "ada.key", "--work-id", work_id, "--work-tx", entry["tx_id"],
                    "--kind", "Mechanical", "--price", "101", "--prose", prose,
                    "--split", "m2=1/3", "--split", "m3=1/3", "--split", "m1=1/3"))
    receipt = out(run("pay", "record", "--key", "pia.key", "--amount", "101", "--reference", offer["offer_id"]))
    grant = out(run("license", "request", offer["offer_id"], "--key", "pia.key", "--payment", receipt["receipt_id"]))
    assert out(run("license", "verify", grant["grant_id"]))["status"] == "Active"
    d = out(run("pay", "disburse", receipt["receipt_id"], "--key", "ada.key"))
    assert d["payouts"] == [["m1", 34], ["m2", 34], ["m3", 33]]
    assert out(run("pay", "statement", "--member", "m3"))["total"] == 33
    assert out(run("chain", "verify"))["ok"] is True


def test_domain_error_exits_1(run):
    bootstrap(run)
    result = run("license", "verify", "lic:0000000000000000", expect=0)
    assert out(result)["status"] == "Unknown"
    result = run("pay", "record", "--key", "pia.key", "--amount", "5", "--reference", "ofr:none", expect=1)
    assert json.loads(result.stderr)["error"] == "UnknownOffer"
    run("member", "show", "m9", expect=1)
    run("member", "register", "--key", "ada.key", "--name", "x", "--role", "Nope", expect=1)


def test_corrupt_chain_exits_2(run, tmp_path):
    bootstrap(run)
    chain_file = tmp_path / "node" / "chain.jsonl"
    text = chain_file.read_text()
    chain_file.write_text(text.replace('"Ada"', '"Adb"', 1))
    result = run("chain", "verify", expect=2)
    assert json.loads(result.stderr)["error"] == "CorruptStore"


def test_export_import(run, tmp_path):
    bootstrap(run)
    run("chain", "export", "--out", "chain.export")
    imported = out(run("chain", "import", "chain.export", data="copy"))
    assert imported["chain_length"] == 3
    assert out(run("member", "show", "m3", data="copy"))["display_name"] == "Pia"
    run("chain", "import", "chain.export", data="copy", expect=1)


def test_opal_commands(run, tmp_path):
    bootstrap(run)
    (tmp_path / "alg.json").write_text(json.dumps({"algorithm": "Count", "schema_id": "s", "group_by": None}))
    alg_id = out(run("opal", "alg", "register", "--manifest", "alg.json", "--key", "ops.key"))["alg_id"]
    run("opal", "ingest", "--key", "ada.key", "--schema", "s", "--attrs", '{"x": 1}')
    run("opal", "consent", alg_id, "--key", "ada.key", "--grant")
    result = out(run("opal", "query", alg_id, "--key", "pia.key"))
    assert result["groups"] == [{"label": "*", "contributors": "<5", "value": "SUPPRESSED"}]
    entries = run("opal", "audit", "--key", "ops.key").stdout.splitlines()
    assert len(entries) == 1 and json.loads(entries[0])["requester"] == "m3"


def test_sim_run(run, tmp_path):
    (tmp_path / "sim.json").write_text(json.dumps({"n_replicas": 3, "seed": 1, "workload": {"synthetic": 20}}))
    report = out(run("sim", "run", "--config", "sim.json", "--out", "report.json"))
    assert report["converged"] is True
    assert (tmp_path / "report.json").read_text() == run("sim", "run", "--config", "sim.json").stdout.strip()
    (tmp_path / "bad.json").write_text(json.dumps({"n_replicas": 0, "seed": 1}))
    run("sim", "run", "--config", "bad.json", expect=1)


def test_demo_resume(run):
    run("node", "demo", "--stop-after", "3")
    lines = run("node", "demo").stdout.splitlines()
    assert lines[-1] == "disbursed == paid: 1000 == 1000 -> True"
