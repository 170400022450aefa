import json
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from allocgap.dpbfr import AllocatorConfig, simulate
from allocgap.workload import (ClusterState, MetricsReport, Scenario, Server, VmPredictions, WorkloadError,
                               dump_workload, excess_servers, ground_truth_predictions, load_workload,
                               over_utilized_servers, risk_of_migration, sort_vms)

from conftest import make_vm, random_vms


def report(servers_used):
    return MetricsReport((0,) * len(servers_used), 0.0, tuple(servers_used))


def test_empty_cluster_counts_zero():
    assert over_utilized_servers(ClusterState.empty([], 3)) == [0, 0, 0]
    assert over_utilized_servers(ClusterState.empty([Server(0, (10, 32))], 3)) == [0, 0, 0]


def test_underpredicted_vm_overloads_shared_server():
    # 10-core VM predicted 0 reserves 6.5 but uses 10; the 5-core neighbour reserves and uses 3.25
    cfg = AllocatorConfig(pool_mode="fixed", num_servers=1, server_capacity=(10, 32))
    a = make_vm(0, 10, 16, arrival=0, cpu_label=1, life=4)
    b = make_vm(1, 5, 8, arrival=1, cpu_label=0, life=2)
    sc = Scenario((a, b), (VmPredictions(0, 0), VmPredictions(0, 0)), horizon=5)
    trace, rep = simulate(sc, cfg)
    assert trace.chosen() == {a.id: 0, b.id: 0}
    assert trace.state.actual[0, 1, 0] == pytest.approx(13.25)
    assert list(rep.over_utilized_per_epoch) == [0, 1, 1, 0, 0]


def test_risk_of_migration_examples():
    assert risk_of_migration([0, 0, 0]) == 0.0
    assert risk_of_migration([2, 4]) == 3.0
    assert risk_of_migration([2, 4], 3.0) == 1.0
    with pytest.raises(WorkloadError):
        risk_of_migration([2, 4], 0)
    with pytest.raises(WorkloadError):
        risk_of_migration([])


@given(st.lists(st.integers(0, 50), min_size=1, max_size=40), st.randoms(use_true_random=False))
def test_risk_invariant_under_epoch_permutation(counts, rnd):
    shuffled = list(counts)
    rnd.shuffle(shuffled)
    assert risk_of_migration(shuffled) == pytest.approx(risk_of_migration(counts))


def test_excess_servers():
    assert excess_servers(report([3, 3]), report([3, 3])) == [0, 0]
    assert excess_servers(report([5, 6]), report([4, 4])) == [1, 2]
    assert excess_servers(report([2, 1]), report([4, 4])) == [-2, -3]
    with pytest.raises(WorkloadError):
        excess_servers(report([1]), report([1, 2]))


def test_vm_invariants_rejected():
    with pytest.raises(WorkloadError):
        make_vm(0, arrival=-1)
    with pytest.raises(WorkloadError):
        make_vm(0, decile=11)
    with pytest.raises(WorkloadError):
        make_vm(0, decile=0)


def test_alive_interval_is_half_open():
    vm = make_vm(0, arrival=2, life=3)
    assert [t for t in range(8) if vm.alive(t)] == [2, 3, 4]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_actual_usage_conserved(seed):
    rng = np.random.default_rng(seed)
    vms = random_vms(rng, 8, 10)
    cfg = AllocatorConfig()
    preds = tuple(VmPredictions(int(rng.integers(2)), int(rng.integers(2))) for _ in vms)
    trace, _ = simulate(Scenario(tuple(vms), preds, 10), cfg)
    for t in range(10):
        expected = np.zeros(2)
        for vm in vms:
            if vm.alive(t):
                expected += vm.actual_usage(cfg.oversub_fraction)
        assert trace.state.actual[:, t, :].sum(axis=0) == pytest.approx(expected)


def test_workload_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    vms = random_vms(rng, 6, 12)
    random.Random(0).shuffle(vms)
    path = tmp_path / "w.json"
    dump_workload(vms, path)
    loaded = load_workload(path)
    assert loaded == sort_vms(vms)
    assert json.loads(path.read_text())[0]["true_mem_decile"] in range(1, 11)


def test_lifetime_label_checked_on_load(tmp_path):
    vm = make_vm(0, life=7)
    path = tmp_path / "w.json"
    dump_workload([vm], path)
    data = json.loads(path.read_text())
    data[0]["true_lifetime_label"] = 0
    path.write_text(json.dumps(data))
    with pytest.raises(WorkloadError):
        load_workload(path)


def test_ground_truth_scenario_copies_labels():
    vm = make_vm(0, cpu_label=1, decile=4, life=9)
    p = ground_truth_predictions(vm, with_mem=True)
    assert (p.cpu, p.life, p.mem) == (1, 1, 4)
