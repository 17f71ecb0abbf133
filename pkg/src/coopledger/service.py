"""HTTP request/response service over a :class:`Node`.

Bodies are canonical JSON. Ledger writes are posted as complete signed
transactions. Writes that do not touch the ledger (asset upload, record
ingest, queries, audit reads, sweeps) use a signed request envelope::

    {"action": ..., "body": {...}, "author": member_id, "nonce": hex, "signature": hex}

where the signature covers the canonical form of everything except itself.
Reads are open. See the README for the verb/path table.
"""
from __future__ import annotations

import json
import logging
import secrets
import threading
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any
from urllib.parse import parse_qs, urlsplit

from coopledger import crypto
from coopledger.canonical import canonical_bytes
from coopledger.errors import (
    BadSignature,
    CoopError,
    CorruptStore,
    DuplicateTransaction,
    EndpointUnavailable,
    InvalidTransaction,
    NotFound,
    PermissionDenied,
)
from coopledger.identity import OPERATOR
from coopledger.ledger import SignedTransaction
from coopledger.node import Node, NodeConfig, Signer

logger = logging.getLogger(__name__)

_STATUS = {
    NotFound: HTTPStatus.NOT_FOUND,
    PermissionDenied: HTTPStatus.FORBIDDEN,
    BadSignature: HTTPStatus.FORBIDDEN,
    DuplicateTransaction: HTTPStatus.CONFLICT,
    CorruptStore: HTTPStatus.INTERNAL_SERVER_ERROR,
}


def request_message(action: str, body: dict, author: str, nonce: str) -> bytes:
    return canonical_bytes({"action": action, "body": body, "author": author, "nonce": nonce})


def sign_request(signer: Signer, action: str, body: dict, nonce: str | None = None) -> dict:
    nonce = nonce or secrets.token_hex(16)
    return {
        "action": action, "body": body, "author": signer.member_id, "nonce": nonce,
        "signature": signer.key.sign(request_message(action, body, signer.member_id, nonce)),
    }


def to_doc(value: Any) -> Any:
    if hasattr(value, "to_doc"):
        return value.to_doc()
    if isinstance(value, (list, tuple)):
        return [to_doc(v) for v in value]
    if hasattr(value, "value") and isinstance(getattr(value, "value"), str):
        return value.value
    return value


class NodeService:
    """Routes requests to the node. Transport-free so it is easy to test."""

    def __init__(self, node: Node):
        self.node = node
        self._nonces: set[tuple[str, str]] = set()
        self._lock = threading.RLock()

    def authenticate(self, envelope: Any, action: str) -> str:
        if not isinstance(envelope, dict) or set(envelope) != {"action", "body", "author", "nonce", "signature"}:
            raise InvalidTransaction("write endpoints require a signed request envelope")
        if envelope["action"] != action or not isinstance(envelope["body"], dict):
            raise InvalidTransaction(f"envelope action must be {action!r}")
        author = envelope["author"]
        if author == OPERATOR:
            key = self.node.operator.public_key
        else:
            member = self.node.state.identity.members.get(author)
            if member is None or not member.active:
                raise PermissionDenied(f"unknown or departed author {author}")
            key = member.public_key
        message = request_message(action, envelope["body"], author, str(envelope["nonce"]))
        if not isinstance(envelope["signature"], str) or not crypto.verify(key, message, envelope["signature"]):
            raise BadSignature("request envelope signature does not verify")
        if (author, envelope["nonce"]) in self._nonces:
            raise DuplicateTransaction("request nonce already used")
        self._nonces.add((author, envelope["nonce"]))
        return author

    def handle(self, method: str, path: str, body: Any = None) -> tuple[int, Any]:
        url = urlsplit(path)
        parts = [p for p in url.path.split("/") if p]
        query = {k: v[-1] for k, v in parse_qs(url.query).items()}
        try:
            with self._lock:
                return HTTPStatus.OK, self._route(method, parts, query, body)
        except CoopError as exc:
            status = next((s for cls, s in _STATUS.items() if isinstance(exc, cls)), HTTPStatus.BAD_REQUEST)
            return status, {"error": exc.code, "detail": str(exc)}
        except (KeyError, TypeError, ValueError) as exc:
            return HTTPStatus.BAD_REQUEST, {"error": "BadRequest", "detail": str(exc)}

    def _route(self, method: str, parts: list[str], query: dict, body: Any) -> Any:
        n = self.node
        match method, parts:
            case "GET", ["health"]:
                return {"status": "ok", "chain_length": len(n.ledger), "head_hash": n.ledger.head_hash,
                        "blocks": len(n.ledger.blocks), "now": n.now}
            case "GET", ["chain", "verify"]:
                report = n.verify_chain()
                return {"ok": report.ok, "first_bad_seq": report.first_bad_seq, "detail": report.detail}
            case "GET", ["chain", "export"]:
                return {"lines": n.export_chain()}
            case "POST", ["chain", "seal"]:
                self.authenticate(body, "seal")
                return n.seal_block().seal_doc()
            case "POST", ["tx"]:
                result, receipt = n.submit(SignedTransaction.from_doc(body))
                return {"receipt": receipt.__dict__, "result": to_doc(result)}
            case "GET", ["tx", tx_id]:
                tx, receipt = n.read_entry(tx_id)
                return {"tx": tx.to_doc(), "receipt": receipt.__dict__, "public_key": n.public_key_of(tx.author)}
            case "GET", ["members", member_id]:
                return n.member(member_id).to_doc()
            case "GET", ["members", member_id, "authorize", action]:
                return {"member_id": member_id, "action": action, "allowed": n.authorize(member_id, action)}
            case "POST", ["assets"]:
                author = self.authenticate(body, "asset.put")
                return {"digest": n.store_asset(bytes.fromhex(body["body"]["data_hex"]), author)}
            case "GET", ["assets", digest]:
                return {"digest": digest, "data_hex": n.fetch_asset(digest).hex()}
            case "GET", ["works", work_id]:
                r = n.resolve_work(work_id)
                return {"entry": r.entry.to_doc(), "metadata": r.metadata, "digest_ok": r.digest_ok}
            case "GET", ["offers", offer_id]:
                return n.state.contracts.get_offer(offer_id).to_doc()
            case "GET", ["offers", offer_id, "payments"]:
                return [r.to_doc() for r in n.payments_for_offer(offer_id)]
            case "GET", ["licenses", grant_id]:
                at = int(query.get("at", n.now))
                return {"grant_id": grant_id, "at": at, "status": n.verify_license(grant_id, at).value}
            case "POST", ["licenses", "sweep"]:
                self.authenticate(body, "license.sweep")
                return {"expired": n.sweep_expirations(int(body["body"]["now"]))}
            case "GET", ["statements", member_id]:
                return n.holder_statement(member_id).to_doc()
            case "GET", ["algorithms", alg_id]:
                try:
                    return n.state.governance.algorithms[alg_id].to_doc()
                except KeyError:
                    raise NotFound(alg_id) from None
            case "POST", ["opal", "records"]:
                author = self.authenticate(body, "opal.ingest")
                b = body["body"]
                return {"handle": n.ingest_record(author, b["schema_id"], b["attributes"])}
            case "POST", ["opal", "query"]:
                author = self.authenticate(body, "opal.query")
                return n.execute_query(body["body"]["alg_id"], author).to_doc()
            case "POST", ["opal", "audit"]:
                author = self.authenticate(body, "opal.audit")
                filters = {k: body["body"].get(k) for k in ("requester", "alg_id", "since", "until")}
                entries = n.read_audit_log(author, **filters)
                report = n.audit.verify()
                return {"entries": [e.to_doc() for e in entries], "chain_ok": report.ok}
        raise NotFound(f"no route {method} /{'/'.join(parts)}")


class _Handler(BaseHTTPRequestHandler):
    service: NodeService

    def _reply(self, status: int, payload: Any) -> None:
        data = canonical_bytes(payload)
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_GET(self):
        self._reply(*self.service.handle("GET", self.path))

    def do_POST(self):
        length = int(self.headers.get("Content-Length") or 0)
        try:
            body = json.loads(self.rfile.read(length) or b"null")
        except ValueError:
            self._reply(HTTPStatus.BAD_REQUEST, {"error": "BadRequest", "detail": "body is not JSON"})
            return
        self._reply(*self.service.handle("POST", self.path, body))

    def log_message(self, fmt, *args):
        logger.info("%s - %s", self.address_string(), fmt % args)


def serve(config: NodeConfig, node: Node | None = None) -> ThreadingHTTPServer:
    """Open the node (verifying its chain) and bind the HTTP endpoint.

    Returns the server without starting it; call ``serve_forever()``.
    """
    node = node or Node(config)
    host, _, port = config.listen_endpoint.rpartition(":")
    handler = type("Handler", (_Handler,), {"service": NodeService(node)})
    try:
        server = ThreadingHTTPServer((host, int(port)), handler)
    except OSError as exc:
        raise EndpointUnavailable(f"cannot bind {config.listen_endpoint}: {exc}") from None
    server.node = node
    return server
