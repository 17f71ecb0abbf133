import json
import threading
import urllib.request
from urllib.error import HTTPError

import pytest

from coopledger.crypto import KeyPair
from coopledger.errors import EndpointUnavailable
from coopledger.identity import register_payload
from coopledger.ledger import TxKind
from coopledger.node import NodeConfig
from coopledger.service import NodeService, serve, sign_request

from conftest import approve, make_coop, populate


@pytest.fixture
def svc(coop):
    return NodeService(coop.node)


def test_health_and_verify(svc, coop):
    status, doc = svc.handle("GET", "/health")
    assert status == 200 and doc["chain_length"] == len(coop.node.ledger) == 5
    assert svc.handle("GET", "/chain/verify") == (200, {"ok": True, "first_bad_seq": None, "detail": ""})


def test_post_signed_transaction_and_read_back(svc, coop):
    key = KeyPair.from_label("test-cy")
    tx = coop["ops"].sign(TxKind.MEMBER_REGISTER, register_payload("Cy", ["Composer"], key.public_key),
                          coop.node.tick())
    status, doc = svc.handle("POST", "/tx", tx.to_doc())
    assert status == 200 and doc["result"]["member_id"] == "m6"
    status, doc = svc.handle("GET", f"/tx/{tx.tx_id}")
    assert status == 200 and doc["tx"]["author"] == "m1"
    assert doc["public_key"] == coop["ops"].key.public_key


def test_forged_transaction_rejected(svc, coop):
    tx = coop["ada"].sign(TxKind.MEMBER_DEPART, {"member_id": "m2"}, coop.node.tick())
    forged = dict(tx.to_doc(), author="m3")
    status, doc = svc.handle("POST", "/tx", forged)
    assert status in (400, 403) and doc["error"] in ("BadSignature", "InvalidTransaction")
    assert svc.handle("POST", "/tx", tx.to_doc())[0] == 200
    status, doc = svc.handle("POST", "/tx", tx.to_doc())
    assert (status, doc["error"]) == (409, "DuplicateTransaction")


def test_envelope_errors(svc, coop):
    body = {"data_hex": b"stem".hex()}
    status, doc = svc.handle("POST", "/assets", body)
    assert (status, doc["error"]) == (400, "InvalidTransaction")
    env = sign_request(coop["ada"], "asset.put", body)
    status, doc = svc.handle("POST", "/assets", dict(env, author="m3"))
    assert (status, doc["error"]) == (403, "BadSignature")
    status, doc = svc.handle("POST", "/assets", dict(env, author="m99"))
    assert (status, doc["error"]) == (403, "PermissionDenied")
    assert svc.handle("POST", "/assets", env)[0] == 200
    status, doc = svc.handle("POST", "/assets", env)
    assert (status, doc["error"]) == (409, "DuplicateTransaction")
    status, doc = svc.handle("POST", "/licenses/sweep", sign_request(coop["ada"], "asset.put", {"now": 3}))
    assert (status, doc["error"]) == (400, "InvalidTransaction")


def test_asset_round_trip(svc, coop):
    _, put = svc.handle("POST", "/assets", sign_request(coop["ben"], "asset.put", {"data_hex": "00ff"}))
    assert svc.handle("GET", f"/assets/{put['digest']}") == (200, {"digest": put["digest"], "data_hex": "00ff"})
    assert svc.handle("GET", "/assets/" + "0" * 64)[0] == 404


def test_read_routes(svc, coop):
    offer = coop.offer("ada", price=100)
    grant = coop.grant(offer)
    assert svc.handle("GET", "/members/m2")[1]["member_id"] == "m2"
    assert svc.handle("GET", "/members/m4/authorize/RequestLicense")[1]["allowed"] is True
    work = svc.handle("GET", f"/works/{offer.terms.work_id}")[1]
    assert work["digest_ok"] is True
    assert svc.handle("GET", f"/offers/{offer.offer_id}")[1]["offer_id"] == offer.offer_id
    assert len(svc.handle("GET", f"/offers/{offer.offer_id}/payments")[1]) == 1
    assert svc.handle("GET", f"/licenses/{grant.grant_id}")[1]["status"] == "Active"
    assert svc.handle("GET", f"/licenses/{grant.grant_id}?at=0")[1]["status"] == "Unknown"
    assert svc.handle("GET", "/statements/m2")[1]["total"] == 0
    assert svc.handle("GET", "/nowhere")[0] == 404


def test_opal_routes(svc, coop):
    alg_id = approve(coop, "Count")
    populate(coop, {"EU": [1] * 5}, consent_to=[alg_id])
    assert svc.handle("GET", f"/algorithms/{alg_id}")[0] == 200
    env = sign_request(coop["ada"], "opal.ingest", {"schema_id": "income.v1", "attributes": {"income": 3}})
    assert svc.handle("POST", "/opal/records", env)[1]["handle"].startswith("rec:")
    status, result = svc.handle("POST", "/opal/query", sign_request(coop["dsp"], "opal.query", {"alg_id": alg_id}))
    assert status == 200 and result["groups"][0]["value"] == 5
    status, audit = svc.handle("POST", "/opal/audit", sign_request(coop["dsp"], "opal.audit", {}))
    assert status == 200 and audit["chain_ok"] and len(audit["entries"]) == 1


def test_sweep_route(svc, coop):
    grant = coop.grant(coop.offer("ada", price=0, term=3))
    env = sign_request(coop["ops"], "license.sweep", {"now": grant.expires_at})
    assert svc.handle("POST", "/licenses/sweep", env) == (200, {"expired": [grant.grant_id]})


def test_http_round_trip(tmp_path):
    coop = make_coop()
    server = serve(NodeConfig(listen_endpoint="127.0.0.1:0"), node=coop.node)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    base = f"http://127.0.0.1:{server.server_address[1]}"
    try:
        with urllib.request.urlopen(base + "/health") as resp:
            assert json.loads(resp.read())["chain_length"] == 5
        env = sign_request(coop["ada"], "asset.put", {"data_hex": "abcd"})
        req = urllib.request.Request(base + "/assets", data=json.dumps(env).encode(), method="POST")
        with urllib.request.urlopen(req) as resp:
            digest = json.loads(resp.read())["digest"]
        assert coop.node.fetch_asset(digest) == bytes.fromhex("abcd")
        with pytest.raises(HTTPError) as info:
            urllib.request.urlopen(urllib.request.Request(base + "/assets", data=b"{", method="POST"))
        assert info.value.code == 400
    finally:
        server.shutdown()
        server.server_close()


def test_bound_port_is_unavailable():
    first = serve(NodeConfig(listen_endpoint="127.0.0.1:0"))
    try:
        with pytest.raises(EndpointUnavailable):
            serve(NodeConfig(listen_endpoint=f"127.0.0.1:{first.server_address[1]}"))
    finally:
        first.server_close()
