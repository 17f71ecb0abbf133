"""``coopledger`` command-line client.

Commands act on the node stored in ``--data-dir`` (``COOPLEDGER_DATA`` wins
when set). Output is canonical JSON on stdout; errors go to stderr as
``{"error": ..., "detail": ...}``. Exit status is 0 on success, 1 on a domain
or input error and 2 when a persisted chain fails verification.

Key files are JSON documents ``{"seed", "public_key", "member_id"}``; the
member id is filled in once the key's owner is registered.
"""
from __future__ import annotations

import json
import logging
import os
import sys
from pathlib import Path
from typing import Any

import click

from coopledger.canonical import canonical_text
from coopledger.contracts import LicenseKind, OfferTerms
from coopledger.crypto import KeyPair
from coopledger.errors import CoopError, CorruptStore, NotFound
from coopledger.identity import Role
from coopledger.node import ENV_DATA_DIR, Node, NodeConfig, Signer
from coopledger.opal import AlgorithmManifest
from coopledger.payments import SplitsTable
from coopledger.registry import new_work_id
from coopledger.service import serve, to_doc
from coopledger.sim import SimConfig, run_simulation


def emit(value: Any) -> None:
    click.echo(canonical_text(to_doc(value)))


def fail(code: str, detail: str, exit_code: int = 1) -> None:
    click.echo(canonical_text({"error": code, "detail": detail}), err=True)
    sys.exit(exit_code)


class CoopGroup(click.Group):
    """Maps domain errors to exit codes; usage errors exit 1 so 2 stays unambiguous."""

    def invoke(self, ctx: click.Context) -> Any:
        try:
            return super().invoke(ctx)
        except CoopError as exc:
            fail(exc.code, str(exc), exc.exit_code)
        except (ValueError, KeyError, OSError) as exc:
            fail("BadInput", str(exc))

    def main(self, *args, **kwargs):
        kwargs["standalone_mode"] = False
        try:
            code = super().main(*args, **kwargs)
        except click.ClickException as exc:
            exc.show()
            sys.exit(1)
        except click.Abort:
            click.echo("Aborted!", err=True)
            sys.exit(1)
        sys.exit(code if isinstance(code, int) else 0)


def _data_dir(ctx: click.Context) -> Path:
    return Path(os.environ.get(ENV_DATA_DIR) or ctx.obj["data_dir"])


def open_node(ctx: click.Context) -> Node:
    if "node" not in ctx.obj:
        ctx.obj["node"] = Node.open(_data_dir(ctx))
    return ctx.obj["node"]


def read_key(path: str) -> dict:
    doc = json.loads(Path(path).read_text())
    if not {"seed", "public_key", "member_id"} <= set(doc):
        raise ValueError(f"{path} is not a key file")
    return doc


def load_signer(path: str) -> Signer:
    doc = read_key(path)
    if not doc["member_id"]:
        raise NotFound(f"key file {path} has no member id; register the member first")
    return Signer(doc["member_id"], KeyPair.from_hex(doc["seed"]))


def read_json(path: str) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


@click.group(cls=CoopGroup)
@click.option("--data-dir", default="coop-data", show_default=True, type=click.Path(file_okay=False),
              help=f"Node data directory ({ENV_DATA_DIR} overrides).")
@click.option("-v", "--verbose", is_flag=True, help="Log to stderr.")
@click.pass_context
def cli(ctx: click.Context, data_dir: str, verbose: bool) -> None:
    """Cooperative rights ledger client."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, stream=sys.stderr)
    ctx.ensure_object(dict)
    ctx.obj["data_dir"] = data_dir


at_option = click.option("--at", type=int, default=None, help="Logical time (default: head + 1).")


# -- keys ---------------------------------------------------------------------


@cli.group()
def key() -> None:
    """Member signing keys."""


@key.command("gen")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--label", default=None, help="Derive a deterministic fixture key from a label.")
def key_gen(out: str, label: str | None) -> None:
    if Path(out).exists():
        raise click.ClickException(f"{out} exists; refusing to overwrite a key")
    pair = KeyPair.from_label(label) if label else KeyPair.generate()
    Path(out).write_text(canonical_text({"seed": pair.seed_hex, "public_key": pair.public_key, "member_id": None}))
    emit({"public_key": pair.public_key, "key_file": out})


# -- members ------------------------------------------------------------------


@cli.group()
def member() -> None:
    """Membership registry."""


@member.command("register")
@click.option("--key", "key_file", required=True, help="Key file of the new member.")
@click.option("--name", required=True)
@click.option("--role", "roles", multiple=True, required=True, type=click.Choice([r.value for r in Role]))
@click.option("--sponsor", default=None, help="Committee member key file (omit to bootstrap as operator).")
@at_option
@click.pass_context
def member_register(ctx, key_file, name, roles, sponsor, at) -> None:
    node = open_node(ctx)
    doc = read_key(key_file)
    signer = load_signer(sponsor) if sponsor else node.operator_signer
    record = node.register_member(signer, name, list(roles), doc["public_key"], at)
    doc["member_id"] = record.member_id
    Path(key_file).write_text(canonical_text(doc))
    emit(record)


@member.command("depart")
@click.option("--key", "key_file", required=True)
@at_option
@click.pass_context
def member_depart(ctx, key_file, at) -> None:
    emit(open_node(ctx).depart_member(load_signer(key_file), at))


@member.command("show")
@click.argument("member_id")
@click.pass_context
def member_show(ctx, member_id) -> None:
    emit(open_node(ctx).member(member_id))


@member.command("export")
@click.pass_context
def member_export(ctx) -> None:
    for record in open_node(ctx).state.identity.members.values():
        emit(record)


# -- assets and works -----------------------------------------------------------


@cli.group()
def asset() -> None:
    """Content-addressed repository."""


@asset.command("put")
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
@click.option("--key", "key_file", required=True, help="Owner's key file.")
@click.pass_context
def asset_put(ctx, path, key_file) -> None:
    digest = open_node(ctx).store_asset(Path(path).read_bytes(), load_signer(key_file).member_id)
    emit({"digest": digest})


@asset.command("get")
@click.argument("digest")
@click.option("--out", default=None, type=click.Path(dir_okay=False), help="Write bytes here instead of stdout.")
@click.pass_context
def asset_get(ctx, digest, out) -> None:
    data = open_node(ctx).fetch_asset(digest)
    if out:
        Path(out).write_bytes(data)
    else:
        click.echo(data, nl=False)


@cli.group()
def work() -> None:
    """Creation-metadata registry."""


@work.command("new-id")
def work_new_id() -> None:
    emit({"work_id": new_work_id()})


@work.command("register")
@click.option("--meta", required=True, type=click.Path(exists=True, dir_okay=False), help="Metadata JSON document.")
@click.option("--key", "key_file", required=True)
@at_option
@click.pass_context
def work_register(ctx, meta, key_file, at) -> None:
    emit(open_node(ctx).register_work(read_json(meta), load_signer(key_file), at))


@work.command("resolve")
@click.argument("work_id")
@click.pass_context
def work_resolve(ctx, work_id) -> None:
    r = open_node(ctx).resolve_work(work_id)
    emit({"entry": r.entry.to_doc(), "metadata": r.metadata, "digest_ok": r.digest_ok})


# -- offers and licenses --------------------------------------------------------


@cli.group()
def offer() -> None:
    """License offers."""


def parse_split(text: str) -> tuple[str, str]:
    holder, sep, share = text.partition("=")
    if not sep:
        raise click.BadParameter(f"{text!r}: expected HOLDER=P/Q")
    return holder, share


@offer.command("deploy")
@click.option("--key", "key_file", required=True, help="Licensor's key file.")
@click.option("--work-id", required=True)
@click.option("--work-tx", default=None, help="Registry tx id (default: newest entry for the work).")
@click.option("--kind", type=click.Choice([k.value for k in LicenseKind]), required=True)
@click.option("--price", type=int, required=True, help="Price in minor units.")
@click.option("--currency", default="USD", show_default=True)
@click.option("--prose", required=True, help="Digest of the legal prose (store it with 'asset put').")
@click.option("--split", "splits", multiple=True, required=True, help="HOLDER=P/Q, repeatable.")
@click.option("--term", type=int, default=None, help="Grant lifetime in ticks.")
@at_option
@click.pass_context
def offer_deploy(ctx, key_file, work_id, work_tx, kind, price, currency, prose, splits, term, at) -> None:
    node = open_node(ctx)
    work_tx = work_tx or node.state.registry.newest(work_id).tx_id
    table = SplitsTable.of([parse_split(s) for s in splits])
    terms = OfferTerms(work_id, work_tx, LicenseKind(kind), price, currency, prose, table, term)
    emit(node.deploy_license_offer(terms, load_signer(key_file), at))


@cli.group("license")
def license_group() -> None:
    """License grants."""


@license_group.command("request")
@click.argument("offer_id")
@click.option("--key", "key_file", required=True, help="Licensee's key file.")
@click.option("--payment", default=None, help="Payment receipt id (priced offers).")
@at_option
@click.pass_context
def license_request(ctx, offer_id, key_file, payment, at) -> None:
    emit(open_node(ctx).execute_license_request(offer_id, load_signer(key_file), payment, at))


@license_group.command("revoke")
@click.argument("grant_id")
@click.option("--key", "key_file", required=True, help="Licensor's key file.")
@click.option("--reason", required=True)
@at_option
@click.pass_context
def license_revoke(ctx, grant_id, key_file, reason, at) -> None:
    emit(open_node(ctx).revoke_grant(grant_id, load_signer(key_file), reason, at))


@license_group.command("verify")
@click.argument("grant_id")
@click.option("--at", type=int, default=None, help="Logical time (default: head).")
@click.pass_context
def license_verify(ctx, grant_id, at) -> None:
    node = open_node(ctx)
    at = node.now if at is None else at
    emit({"grant_id": grant_id, "at": at, "status": node.verify_license(grant_id, at).value})


@license_group.command("sweep")
@click.option("--now", type=int, default=None, help="Sweep time (default: head).")
@click.pass_context
def license_sweep(ctx, now) -> None:
    node = open_node(ctx)
    emit({"expired": node.sweep_expirations(node.now if now is None else now)})


# -- payments -----------------------------------------------------------------


@cli.group()
def pay() -> None:
    """Payments and splits disbursement."""


@pay.command("record")
@click.option("--key", "key_file", required=True, help="Payer's key file.")
@click.option("--amount", type=int, required=True, help="Minor units.")
@click.option("--currency", default="USD", show_default=True)
@click.option("--reference", required=True, help="Offer id the payment is for.")
@at_option
@click.pass_context
def pay_record(ctx, key_file, amount, currency, reference, at) -> None:
    emit(open_node(ctx).record_payment(load_signer(key_file), amount, currency, reference, at))


@pay.command("list")
@click.option("--offer", "offer_id", required=True)
@click.pass_context
def pay_list(ctx, offer_id) -> None:
    for receipt in open_node(ctx).payments_for_offer(offer_id):
        emit(receipt)


@pay.command("disburse")
@click.argument("receipt_id")
@click.option("--key", "key_file", required=True, help="Licensor's key file.")
@at_option
@click.pass_context
def pay_disburse(ctx, receipt_id, key_file, at) -> None:
    node = open_node(ctx)
    receipt = node.state.payments.receipts.get(receipt_id)
    if receipt is None:
        raise NotFound(receipt_id)
    splits = node.state.contracts.get_offer(receipt.reference).terms.splits
    emit(node.disburse(receipt_id, splits, load_signer(key_file), at))


@pay.command("statement")
@click.option("--member", "member_id", required=True)
@click.pass_context
def pay_statement(ctx, member_id) -> None:
    emit(open_node(ctx).holder_statement(member_id))


# -- opal -----------------------------------------------------------------------


@cli.group()
def opal() -> None:
    """Aggregate-only queries over member records."""


@opal.command("ingest")
@click.option("--key", "key_file", required=True, help="Owning member's key file.")
@click.option("--schema", "schema_id", required=True)
@click.option("--attrs", required=True, help="JSON object of attributes.")
@click.pass_context
def opal_ingest(ctx, key_file, schema_id, attrs) -> None:
    handle = open_node(ctx).ingest_record(load_signer(key_file).member_id, schema_id, json.loads(attrs))
    emit({"handle": handle})


@opal.group("alg")
def opal_alg() -> None:
    """Algorithm catalog."""


@opal_alg.command("register")
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--key", "key_file", required=True, help="Submitting committee member's key file.")
@click.option("--approver", "approvers", multiple=True, help="Approving committee key file, repeatable "
              "(default: the submitter alone).")
@at_option
@click.pass_context
def opal_alg_register(ctx, manifest, key_file, approvers, at) -> None:
    defaults = {"target_field": None, "group_by": None, "description": ""}
    m = AlgorithmManifest.from_doc({**defaults, **read_json(manifest)})
    approvals = [m.approve(s.member_id, s.key) for s in map(load_signer, approvers or (key_file,))]
    emit({"alg_id": open_node(ctx).register_algorithm(m, approvals, load_signer(key_file), at)})


@opal.command("consent")
@click.argument("alg_id")
@click.option("--key", "key_file", required=True)
@click.option("--grant/--revoke", default=True)
@at_option
@click.pass_context
def opal_consent(ctx, alg_id, key_file, grant, at) -> None:
    emit(open_node(ctx).set_consent(load_signer(key_file), alg_id, grant, at))


@opal.command("query")
@click.argument("alg_id")
@click.option("--key", "key_file", required=True, help="Requester's key file.")
@click.pass_context
def opal_query(ctx, alg_id, key_file) -> None:
    emit(open_node(ctx).execute_query(alg_id, load_signer(key_file).member_id))


@opal.command("audit")
@click.option("--key", "key_file", required=True, help="Reader's key file.")
@click.option("--requester", default=None)
@click.option("--alg", "alg_id", default=None)
@click.option("--since", type=int, default=None)
@click.option("--until", type=int, default=None)
@click.pass_context
def opal_audit(ctx, key_file, requester, alg_id, since, until) -> None:
    node = open_node(ctx)
    entries = node.read_audit_log(load_signer(key_file).member_id, requester=requester, alg_id=alg_id,
                                  since=since, until=until)
    for entry in entries:
        emit(entry)


# -- simulator ----------------------------------------------------------------------


@cli.group()
def sim() -> None:
    """Replication simulator."""


@sim.command("run")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", default=None, type=click.Path(dir_okay=False), help="Also write the report here.")
def sim_run(config_path, out) -> None:
    report = run_simulation(SimConfig.from_doc(read_json(config_path)))
    if out:
        Path(out).write_bytes(report.to_bytes())
    click.echo(report.to_bytes().decode())


# -- node and chain -------------------------------------------------------------------


@cli.group()
def node() -> None:
    """Run the node."""


@node.command("serve")
@click.option("--listen", default=None, help="host:port (default from node config).")
@click.pass_context
def node_serve(ctx, listen) -> None:
    n = open_node(ctx)
    if listen:
        n.config.listen_endpoint = listen
        n.config.validate()
    server = serve(n.config, n)
    click.echo(f"serving {n.config.listen_endpoint} chain_length={len(n.ledger)}", err=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


@node.command("demo")
@click.option("--price", type=int, default=1000, show_default=True)
@click.option("--writers", type=int, default=2, show_default=True)
@click.option("--seed", type=int, default=7, show_default=True)
@click.option("--stop-after", type=int, default=None, help="Stop after this step index (resume later).")
@click.pass_context
def node_demo(ctx, price, writers, seed, stop_after) -> None:
    from coopledger.demo import workflow_demo

    for line in workflow_demo(open_node(ctx), price=price, writers=writers, seed=seed, stop_after=stop_after):
        click.echo(line)


@cli.group()
def chain() -> None:
    """Ledger integrity, export and import."""


@chain.command("verify")
@click.pass_context
def chain_verify(ctx) -> None:
    report = open_node(ctx).verify_store()
    emit({"ok": report.ok, "first_bad_seq": report.first_bad_seq, "detail": report.detail})
    if not report.ok:
        raise CorruptStore(report.first_bad_seq, report.detail)


@chain.command("export")
@click.option("--out", default=None, type=click.Path(dir_okay=False))
@click.pass_context
def chain_export(ctx, out) -> None:
    text = "\n".join(open_node(ctx).export_chain()) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        click.echo(text, nl=False)


@chain.command("import")
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
@click.pass_context
def chain_import(ctx, path) -> None:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    n = Node.import_chain(lines, NodeConfig(data_dir=_data_dir(ctx)))
    (n.data_dir / "node.json").write_text(canonical_text(n.config.to_doc()))
    emit({"chain_length": len(n.ledger), "head_hash": n.ledger.head_hash})


def main() -> None:
    cli(obj={})


if __name__ == "__main__":
    main()
