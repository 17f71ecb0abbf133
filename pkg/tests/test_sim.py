import json
from fractions import Fraction
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from coopledger.errors import InvalidConfig
from coopledger.sim import SimConfig, Simulation, inject_fault, run_simulation, synthetic_workload

GOLDEN = Path(__file__).parent / "golden"


def config(n=3, seed=1, loss=0, delay=(1, 1), txs=40, **extra):
    return SimConfig(n_replicas=n, seed=seed, delay_ticks=delay, loss_probability=loss,
                     workload=synthetic_workload(txs, 100, seed), **extra)


def test_lossless_run_needs_no_retransmission():
    report = run_simulation(config())
    assert report.converged and report.retransmission_count == 0
    assert report.dropped_count == 0 and report.safety_violations == 0
    assert len(set(report.head_hashes.values())) == 1


def test_golden_report_is_byte_identical():
    doc = json.loads((GOLDEN / "sim_5r_loss30_seed42.config.json").read_text())
    report = run_simulation(SimConfig.from_doc(doc))
    assert report.converged and report.retransmission_count > 0
    assert report.to_bytes() + b"\n" == (GOLDEN / "sim_5r_loss30_seed42.report.json").read_bytes()


def test_permanent_partition_without_drain_diverges():
    cfg = config(n=3, partition_windows=[(0, 500, {2})], drain=False)
    report = run_simulation(cfg)
    assert not report.converged
    assert set(report.divergence_detail) == {"replica-2"}
    assert report.divergence_detail["replica-2"] == 0
    assert report.safety_violations == 0


def test_partition_heals_during_drain():
    report = run_simulation(config(n=3, partition_windows=[(0, 300, {2})]))
    assert report.converged


def test_same_config_same_bytes():
    cfg = config(n=5, seed=9, loss=Fraction(1, 4), delay=(1, 3))
    assert run_simulation(cfg).to_bytes() == run_simulation(cfg).to_bytes()
    assert run_simulation(cfg).to_bytes() != run_simulation(config(n=5, seed=10, loss=Fraction(1, 4),
                                                                   delay=(1, 3))).to_bytes()


def test_duplicate_fault_applies_each_block_once():
    sim = Simulation(config(n=4, faults=("duplicate",)))
    report = sim.run()
    assert report.converged and report.duplicate_deliveries > 0
    for rep in sim.replicas.values():
        assert rep.apply_log == list(range(report.blocks))


def test_reorder_fault_is_buffered():
    report = inject_fault(config(n=3, delay=(1, 2)), "reorder")
    assert report.converged and report.applied_in_order


def test_duplicate_with_heavy_loss():
    report = inject_fault(config(n=3, seed=7, loss=Fraction(1, 2)), "duplicate")
    assert report.converged and report.retransmission_count > 0


@pytest.mark.parametrize("bad", [
    dict(n_replicas=0, seed=1),
    dict(n_replicas=2, seed=1, delay_ticks=(3, 1)),
    dict(n_replicas=2, seed=1, loss_probability=1),
    dict(n_replicas=2, seed=1, partition_windows=[(0, 900, {1})]),
    dict(n_replicas=2, seed=1, partition_windows=[(0, 10, {7})]),
    dict(n_replicas=2, seed=-1),
])
def test_invalid_config(bad):
    with pytest.raises(InvalidConfig):
        run_simulation(SimConfig(**bad))


def test_unknown_fault_kind():
    with pytest.raises(InvalidConfig):
        inject_fault(config(), "corrupt")


def test_config_from_doc_rejects_garbage():
    with pytest.raises(InvalidConfig):
        SimConfig.from_doc({"n_replicas": 2})


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 6), seed=st.integers(0, 2**32), loss=st.sampled_from(["0", "1/10", "1/3", "3/5"]),
       hi=st.integers(1, 4), txs=st.integers(0, 60), faults=st.sets(st.sampled_from(["duplicate", "reorder"])))
def test_drained_runs_converge_safely(n, seed, loss, hi, txs, faults):
    sim = Simulation(config(n=n, seed=seed, loss=Fraction(loss), delay=(1, hi), txs=txs, faults=tuple(sorted(faults))))
    report = sim.run()
    assert report.converged and report.safety_violations == 0 and report.replicas_verified
    for rep in sim.replicas.values():
        assert [b.block_hash for b in rep.ledger.blocks] == [b.block_hash for b in sim.sequencer.blocks]
        assert rep.apply_log == sorted(rep.apply_log)
