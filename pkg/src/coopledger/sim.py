"""Deterministic replication simulator.

One sequencer appends workload transactions to a real :class:`Ledger` and
broadcasts sealed blocks to ``n_replicas`` replicas over a simulated network
with per-message delay, seeded loss, partitions and optional duplicate /
reorder faults. Replicas apply blocks strictly in sequence order, buffering
early arrivals, and ack every block they receive. Unacked blocks are resent
every ``retransmit_interval`` ticks.

Time is a single integer tick shared with ledger ``logical_time``; nothing
sleeps. The whole run is a function of the config, so identical configs give
byte-identical reports.
"""
from __future__ import annotations

import hashlib
import random
from collections import defaultdict
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Any

from coopledger.canonical import canonical_bytes, fraction_text, parse_fraction
from coopledger.crypto import KeyPair
from coopledger.errors import InvalidConfig
from coopledger.ledger import Block, Ledger, SignedTransaction, TxKind, block_hash_of

SEQUENCER = "sequencer"
SIM_AUTHOR = "sim-sequencer"
FAULTS = ("duplicate", "reorder")


@dataclass(frozen=True)
class WorkloadEvent:
    tick: int
    kind: str = TxKind.WORK_REGISTER.value
    payload: dict = field(default_factory=dict)

    def to_doc(self) -> dict:
        return {"tick": self.tick, "kind": self.kind, "payload": self.payload}


def synthetic_workload(n_txs: int, last_tick: int, seed: int = 0) -> list[WorkloadEvent]:
    """``n_txs`` submissions spread over ticks ``1..last_tick`` in order."""
    rng = random.Random(seed)
    ticks = sorted(rng.randint(1, max(1, last_tick)) for _ in range(n_txs))
    return [WorkloadEvent(t, TxKind.PAYMENT_RECORD.value, {"n": i, "amount_minor": rng.randint(1, 10_000)})
            for i, t in enumerate(ticks)]


@dataclass(frozen=True)
class SimConfig:
    n_replicas: int
    seed: int
    delay_ticks: tuple[int, int] = (1, 1)
    loss_probability: Fraction = Fraction(0)
    partition_windows: tuple[tuple[int, int, frozenset[int]], ...] = ()
    workload: tuple[WorkloadEvent, ...] = ()
    max_ticks: int = 500
    retransmit_interval: int = 5
    drain: bool = True
    drain_ticks: int | None = None
    block_size: int = 16
    faults: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "loss_probability", parse_fraction(self.loss_probability)
                           if not isinstance(self.loss_probability, float)
                           else Fraction(self.loss_probability).limit_denominator(10_000))
        object.__setattr__(self, "delay_ticks", tuple(self.delay_ticks))
        object.__setattr__(self, "workload", tuple(self.workload))
        object.__setattr__(self, "faults", tuple(self.faults))
        object.__setattr__(self, "partition_windows",
                           tuple((s, e, frozenset(r)) for s, e, r in self.partition_windows))

    @property
    def effective_drain_ticks(self) -> int:
        return self.drain_ticks if self.drain_ticks is not None else 10 * self.delay_ticks[1]

    def validate(self) -> None:
        lo, hi = self.delay_ticks
        problems = []
        if not (isinstance(self.n_replicas, int) and self.n_replicas >= 1):
            problems.append("n_replicas must be a positive integer")
        if not (0 <= lo <= hi):
            problems.append("delay_ticks must satisfy 0 <= min <= max")
        if not (0 <= self.loss_probability < 1):
            problems.append("loss_probability must be in [0, 1)")
        if self.max_ticks < 1 or self.retransmit_interval < 1 or self.block_size < 1:
            problems.append("max_ticks, retransmit_interval and block_size must be >= 1")
        if self.drain_ticks is not None and self.drain_ticks < 0:
            problems.append("drain_ticks must be nonnegative")
        for s, e, reps in self.partition_windows:
            if not (0 <= s <= e <= self.max_ticks):
                problems.append(f"partition window {s}..{e} outside [0, max_ticks]")
            if any(not 1 <= r <= self.n_replicas for r in reps):
                problems.append(f"partition names unknown replica in {sorted(reps)}")
        for ev in self.workload:
            if not 0 <= ev.tick <= self.max_ticks:
                problems.append(f"workload tick {ev.tick} outside [0, max_ticks]")
                break
            if ev.kind not in {k.value for k in TxKind}:
                problems.append(f"workload kind {ev.kind!r} unknown")
                break
        for f in self.faults:
            if f not in FAULTS:
                problems.append(f"unknown fault {f!r}")
        if not 0 <= self.seed < 2**64:
            problems.append("seed must be a 64-bit unsigned integer")
        if problems:
            raise InvalidConfig("; ".join(problems))

    def to_doc(self) -> dict:
        return {
            "n_replicas": self.n_replicas,
            "seed": self.seed,
            "delay_ticks": list(self.delay_ticks),
            "loss_probability": fraction_text(self.loss_probability),
            "partition_windows": [[s, e, sorted(r)] for s, e, r in self.partition_windows],
            "workload": [ev.to_doc() for ev in self.workload],
            "max_ticks": self.max_ticks,
            "retransmit_interval": self.retransmit_interval,
            "drain": self.drain,
            "drain_ticks": self.drain_ticks,
            "block_size": self.block_size,
            "faults": list(self.faults),
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "SimConfig":
        """Build from a config document. ``workload`` may be an event list or
        ``{"synthetic": n, "last_tick": t}``."""
        doc = dict(doc)
        try:
            workload = doc.pop("workload", [])
            max_ticks = doc.get("max_ticks", 500)
            if isinstance(workload, dict):
                n = workload["synthetic"]
                workload = synthetic_workload(n, workload.get("last_tick", max_ticks // 2), doc["seed"])
            else:
                workload = [WorkloadEvent(e["tick"], e.get("kind", TxKind.WORK_REGISTER.value), e.get("payload", {}))
                            for e in workload]
            windows = [(s, e, frozenset(r)) for s, e, r in doc.pop("partition_windows", [])]
            return cls(workload=tuple(workload), partition_windows=tuple(windows), **doc)
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidConfig(f"bad simulation config: {exc}") from None


@dataclass(frozen=True)
class SimReport:
    delivered_count: int
    retransmission_count: int
    dropped_count: int
    duplicate_deliveries: int
    converged: bool
    head_hashes: dict
    divergence_detail: dict | None
    safety_violations: int
    applied_in_order: bool
    replicas_verified: bool
    blocks: int
    final_tick: int

    def to_doc(self) -> dict:
        return {
            "delivered_count": self.delivered_count,
            "retransmission_count": self.retransmission_count,
            "dropped_count": self.dropped_count,
            "duplicate_deliveries": self.duplicate_deliveries,
            "converged": self.converged,
            "head_hashes": self.head_hashes,
            "divergence_detail": self.divergence_detail,
            "safety_violations": self.safety_violations,
            "applied_in_order": self.applied_in_order,
            "replicas_verified": self.replicas_verified,
            "blocks": self.blocks,
            "final_tick": self.final_tick,
        }

    def to_bytes(self) -> bytes:
        return canonical_bytes(self.to_doc())


class _SimKeys:
    def __init__(self, public_key: str):
        self.public_key = public_key

    def key_for(self, author: str) -> str | None:
        return self.public_key if author == SIM_AUTHOR else None

    def observe(self, tx: SignedTransaction) -> None:
        pass


@dataclass
class Replica:
    rid: int
    ledger: Ledger
    buffer: dict[int, Block] = field(default_factory=dict)
    apply_log: list[int] = field(default_factory=list)

    def receive(self, block: Block) -> bool | None:
        """Buffer ``block`` and apply everything now contiguous.

        Returns False for a block already seen, None for one that fails its
        own digests (not acked, so the sequencer resends it).
        """
        if block.seq < len(self.ledger.blocks) or block.seq in self.buffer:
            return False
        if not _block_intact(block):
            return None
        self.buffer[block.seq] = block
        while len(self.ledger.blocks) in self.buffer:
            nxt = self.buffer.pop(len(self.ledger.blocks))
            self.ledger.adopt_block(nxt)
            self.apply_log.append(nxt.seq)
        return True


def _block_intact(block: Block) -> bool:
    return (
        all(tx.recompute_id() == tx.tx_id for tx in block.txs)
        and block_hash_of(block.seq, block.prev_hash, block.tx_ids) == block.block_hash
    )


class Simulation:
    """One run. Use :func:`run_simulation` unless you need node internals."""

    def __init__(self, config: SimConfig):
        config.validate()
        self.config = config
        self.rng = random.Random(config.seed)
        self.key = KeyPair(hashlib.sha256(b"coopledger-sim:%d" % config.seed).digest())
        self.sequencer = Ledger(block_size=config.block_size, authorizer=lambda tx: self.key.public_key)
        self.replicas = {
            r: Replica(r, Ledger(block_size=config.block_size)) for r in range(1, config.n_replicas + 1)
        }
        self.in_flight: dict[int, list[tuple[str, int, Any]]] = defaultdict(list)
        self.unacked: dict[tuple[int, int], int] = {}
        self.delivered = self.retransmissions = self.dropped = self.duplicates = 0
        self.safety_violations = 0
        self.tick = 0

    # -- network -------------------------------------------------------

    def _partitioned(self, replica: int, tick: int) -> bool:
        return any(s <= tick <= e and replica in reps for s, e, reps in self.config.partition_windows)

    def _lost(self, draining: bool) -> bool:
        p = self.config.loss_probability
        if draining or p == 0:
            return False
        return self.rng.randrange(p.denominator) < p.numerator

    def _send(self, dst: str, replica: int, msg: Any, draining: bool) -> None:
        copies = 2 if "duplicate" in self.config.faults else 1
        lo, hi = self.config.delay_ticks
        for _ in range(copies):
            if self._partitioned(replica, self.tick) or self._lost(draining):
                self.dropped += 1
                continue
            delay = self.rng.randint(lo, hi)
            if "reorder" in self.config.faults and dst == "replica" and msg.seq % 2 == 0:
                delay += hi + 1
            self.in_flight[self.tick + max(delay, 1)].append((dst, replica, msg))

    def _broadcast(self, block: Block, draining: bool) -> None:
        for r in self.replicas:
            self.unacked[(r, block.seq)] = self.tick
            self._send("replica", r, block, draining)

    # -- main loop -----------------------------------------------------

    def run(self) -> SimReport:
        cfg = self.config
        workload = sorted(enumerate(cfg.workload), key=lambda item: (item[1].tick, item[0]))
        by_tick: dict[int, list[WorkloadEvent]] = defaultdict(list)
        for _, ev in workload:
            by_tick[ev.tick].append(ev)
        last_submit = max(by_tick) if by_tick else -1
        end = cfg.max_ticks + (cfg.effective_drain_ticks if cfg.drain else 0)

        for self.tick in range(0, end + 1):
            draining = self.tick > cfg.max_ticks
            before = len(self.sequencer.blocks)
            for ev in by_tick.get(self.tick, []):
                tx = SignedTransaction.create(ev.kind, ev.payload, SIM_AUTHOR, self.tick, self.key)
                self.sequencer.append(tx)
            if self.tick == last_submit and self.sequencer.open_txs:
                self.sequencer.seal_block()
            for block in self.sequencer.blocks[before:]:
                self._broadcast(block, draining)

            for dst, replica, msg in self.in_flight.pop(self.tick, []):
                if self._partitioned(replica, self.tick) and not draining:
                    self.dropped += 1
                    continue
                if dst == "replica":
                    self.delivered += 1
                    accepted = self.replicas[replica].receive(msg)
                    if accepted is None:
                        continue
                    if accepted is False:
                        self.duplicates += 1
                    self._send("sequencer", replica, msg.seq, draining)
                else:
                    self.unacked.pop((replica, msg), None)

            for (r, seq), sent in sorted(self.unacked.items()):
                if self.tick - sent >= cfg.retransmit_interval:
                    self.unacked[(r, seq)] = self.tick
                    self.retransmissions += 1
                    self._send("replica", r, self.sequencer.blocks[seq], draining)

            self._check_prefix()
            if draining and not self.unacked and not self.in_flight:
                break
        return self._report()

    def _check_prefix(self) -> None:
        blocks = self.sequencer.blocks
        for rep in self.replicas.values():
            n = len(rep.ledger.blocks)
            if n > len(blocks) or (n and rep.ledger.head_hash != blocks[n - 1].block_hash):
                self.safety_violations += 1

    def _report(self) -> SimReport:
        head = self.sequencer.head_hash
        heads = {SEQUENCER: head}
        divergence = {}
        keys = _SimKeys(self.key.public_key)
        verified = self.sequencer.verify_chain(keys).ok
        in_order = True
        for r, rep in self.replicas.items():
            heads[f"replica-{r}"] = rep.ledger.head_hash
            if rep.ledger.head_hash != head:
                divergence[f"replica-{r}"] = len(rep.ledger.blocks)
            verified = verified and rep.ledger.verify_chain(keys).ok
            in_order = in_order and rep.apply_log == list(range(len(rep.apply_log)))
        return SimReport(
            delivered_count=self.delivered,
            retransmission_count=self.retransmissions,
            dropped_count=self.dropped,
            duplicate_deliveries=self.duplicates,
            converged=not divergence,
            head_hashes=heads,
            divergence_detail=divergence or None,
            safety_violations=self.safety_violations,
            applied_in_order=in_order,
            replicas_verified=verified,
            blocks=len(self.sequencer.blocks),
            final_tick=self.tick,
        )


def run_simulation(config: SimConfig) -> SimReport:
    return Simulation(config).run()


def inject_fault(config: SimConfig, kind: str) -> SimReport:
    """Run ``config`` with an extra ``duplicate`` or ``reorder`` fault."""
    if kind not in FAULTS:
        raise InvalidConfig(f"unknown fault {kind!r}")
    return run_simulation(replace(config, faults=tuple(dict.fromkeys(config.faults + (kind,)))))
