"""coopledger: a data-cooperative node for music metadata, licensing and royalties.

The node keeps a single hash-chained ledger that every state change flows
through. Member registry, work registry, license contracts, payments and
OPAL governance are deterministic state machines rebuilt by replaying it.
"""

from coopledger.canonical import canonical_bytes, digest_hex
from coopledger.crypto import KeyPair
from coopledger.errors import CoopError
from coopledger.ledger import Block, ChainReport, Ledger, SignedTransaction, TxKind, TxReceipt
from coopledger.node import Node, NodeConfig, Signer

__all__ = [
    "Block",
    "ChainReport",
    "CoopError",
    "KeyPair",
    "Ledger",
    "Node",
    "NodeConfig",
    "SignedTransaction",
    "Signer",
    "TxKind",
    "TxReceipt",
    "canonical_bytes",
    "digest_hex",
]

__version__ = "0.1.0"
