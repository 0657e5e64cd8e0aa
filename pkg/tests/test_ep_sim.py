import numpy as np
import pandas as pd
import pytest

from evomoe.ep_sim import (
    Assignment,
    CommPlan,
    Message,
    Topology,
    assignment_from_loads,
    assignment_from_trace,
    compare,
    expert_loads,
    plan_hierarchical,
    plan_naive,
    simulate_time,
    straggler_makespan,
)
from evomoe.errors import ParameterError

PAYLOAD = 512


def _uniform(topology, tokens=1):
    workers = topology.workers
    return Assignment(tokens=np.full((workers, workers), tokens), bytes_per_token=PAYLOAD)


def _trace(loads_by_iter):
    rows = [
        {"iter": it, "layer": 0, "expert": e, "token_count": c}
        for it, loads in loads_by_iter.items()
        for e, c in enumerate(loads)
    ]
    return pd.DataFrame(rows)


def test_topology_validation():
    topology = Topology()
    assert topology.workers == 16 and topology.leader(1) == 8 and topology.node_of(9) == 1
    assert topology.tier(0, 7) == "intra" and topology.tier(7, 8) == "inter"
    with pytest.raises(ParameterError):
        Topology(intra_bw=0.0)
    with pytest.raises(ParameterError):
        Topology(nics_per_node=0)


def test_hierarchical_aggregates_gpu_pairs():
    """2 nodes x 8 GPUs: 64 naive inter-node messages per node pair become one of 64x the size."""
    topology = Topology(nodes=2, gpus_per_node=8)
    assignment = _uniform(topology)
    naive, hier = plan_naive(assignment, topology), plan_hierarchical(assignment, topology)
    assert len(naive.messages) == 256
    for a, b in ((0, 1), (1, 0)):
        pair = [m for m in naive.inter_messages if topology.node_of(m.src) == a and topology.node_of(m.dst) == b]
        assert len(pair) == 64 and {m.bytes for m in pair} == {PAYLOAD}
    assert len(hier.inter_messages) == 2
    assert {m.bytes for m in hier.inter_messages} == {64 * PAYLOAD}
    assert len(naive.inter_messages) == 64 * len(hier.inter_messages)
    assert sum(m.bytes for m in naive.inter_messages) == sum(m.bytes for m in hier.inter_messages)
    assert naive.routed_bytes == hier.routed_bytes == assignment.total_bytes
    assert hier.in_phase("layout") == []


def test_conservation_on_random_assignments():
    rng = np.random.default_rng(0)
    for nodes, gpus in ((1, 4), (2, 2), (3, 2), (2, 4)):
        topology = Topology(nodes=nodes, gpus_per_node=gpus)
        tokens = rng.integers(0, 5, size=(topology.workers, topology.workers))
        assignment = Assignment(tokens=tokens, bytes_per_token=8)
        assert plan_naive(assignment, topology).routed_bytes == assignment.total_bytes
        assert plan_hierarchical(assignment, topology).routed_bytes == assignment.total_bytes


def test_single_node_has_no_inter_traffic():
    topology = Topology(nodes=1, gpus_per_node=4)
    assignment = _uniform(topology)
    assert plan_naive(assignment, topology).inter_messages == []
    report = compare(assignment, topology)
    assert report["speedup"] == 1.0
    assert report["naive"]["inter_msgs"] == report["hierarchical"]["inter_msgs"] == 0


def test_cost_model():
    topology = Topology(nodes=2, gpus_per_node=2, inter_bw=1e9, inter_latency=1e-4)
    assert simulate_time(CommPlan(kind="naive", phases=("alltoall",)), topology)["total"] == 0.0
    one = CommPlan(kind="naive", phases=("alltoall",), messages=[Message(0, 2, 4000, "inter", "alltoall")])
    assert simulate_time(one, topology)["total"] == pytest.approx(1e-4 + 4000 / 1e9, rel=1e-12)
    own = CommPlan(kind="naive", phases=("alltoall",), messages=[Message(1, 1, 4000, "intra", "alltoall")])
    assert simulate_time(own, topology)["total"] == 0.0
    two_nics = Topology(nodes=2, gpus_per_node=2, inter_bw=1e9, inter_latency=1e-4, nics_per_node=2)
    pair = CommPlan(
        kind="naive",
        phases=("alltoall",),
        messages=[Message(0, 2, 4000, "inter", "alltoall"), Message(1, 3, 4000, "inter", "alltoall")],
    )
    assert simulate_time(pair, two_nics)["total"] == pytest.approx(simulate_time(one, topology)["total"])
    assert simulate_time(pair, topology)["total"] == pytest.approx(2 * simulate_time(one, topology)["total"])


def test_latency_dominated_regime_favours_hierarchical():
    topology = Topology(nodes=2, gpus_per_node=8, intra_latency=1e-4, inter_latency=1e-4)
    assignment = Assignment(tokens=np.ones((16, 16)), bytes_per_token=8)
    report = compare(assignment, topology)
    assert report["hierarchical"]["time"] < report["naive"]["time"]
    assert report["speedup"] > 1.0
    assert report["inter_message_size_ratio"] == 64.0


def test_more_payload_never_costs_less():
    topology = Topology(nodes=2, gpus_per_node=2)
    rng = np.random.default_rng(1)
    tokens = rng.integers(0, 10, size=(4, 4))
    for planner in (plan_naive, plan_hierarchical):
        base = simulate_time(planner(Assignment(tokens, 64), topology), topology)["total"]
        for src, dst in ((0, 3), (2, 1), (1, 1)):
            bigger = tokens.copy()
            bigger[src, dst] += 5
            assert simulate_time(planner(Assignment(bigger, 64), topology), topology)["total"] >= base


def test_assignment_from_trace_matches_scan():
    frame = _trace({0: [10, 3, 7, 4], 50: [2, 2, 2, 2]})
    topology = Topology(nodes=2, gpus_per_node=2)
    assignment = assignment_from_trace(frame, topology, d_model=4)
    scanned = frame.groupby("expert")["token_count"].sum().to_numpy()
    assert np.array_equal(expert_loads(frame), scanned)
    assert np.array_equal(assignment.tokens.sum(axis=0), scanned), "expert e lives on worker e % W"
    assert assignment.bytes_per_token == 32
    one = assignment_from_trace(frame, Topology(nodes=1, gpus_per_node=1), iteration=0)
    assert one.tokens.tolist() == [[24]]
    assert plan_naive(one, Topology(nodes=1, gpus_per_node=1)).inter_messages == []
    balanced = assignment_from_loads([8, 8, 8, 8], topology)
    assert (balanced.tokens.sum(axis=0) == 8).all()
    with pytest.raises(ParameterError):
        assignment_from_loads([1, 2, 3], topology)
    with pytest.raises(ParameterError):
        assignment_from_trace(frame, topology, iteration=7)


def test_plans_are_deterministic():
    topology = Topology(nodes=2, gpus_per_node=2)
    assignment = Assignment(np.random.default_rng(2).integers(0, 3, size=(4, 4)), 16)
    assert compare(assignment, topology) == compare(assignment, topology)


def test_straggler_makespan():
    assert straggler_makespan([100, 0, 0, 0], 2e-3) == {"makespan": pytest.approx(0.2), "utilization": 0.25}
    assert straggler_makespan([5, 5, 5, 5], 1e-3)["utilization"] == 1.0
    assert straggler_makespan([4, 0, 0, 4], 1.0, workers=2)["utilization"] == 1.0
    with pytest.raises(ParameterError):
        straggler_makespan([1, 2], 0.0)


def test_growing_one_payload_never_speeds_up_a_multi_nic_node():
    """Five single-GPU nodes on two NICs: a new small message must not reshuffle the big ones."""
    topology = Topology(nodes=5, gpus_per_node=1, nics_per_node=2, inter_bw=1e3, inter_latency=1e-6)
    tokens = np.zeros((5, 5), dtype=np.int64)
    tokens[0, 1], tokens[0, 3], tokens[0, 4] = 10, 1, 10
    before = simulate_time(plan_naive(Assignment(tokens, 8), topology), topology)["total"]
    tokens[0, 2] = 1
    after = simulate_time(plan_naive(Assignment(tokens, 8), topology), topology)["total"]
    assert after >= before, f"time fell from {before} to {after}"


@pytest.mark.parametrize("nodes,gpus,nics", [(5, 1, 2), (2, 2, 2), (3, 2, 3), (2, 4, 4)])
def test_raising_payloads_one_at_a_time_is_monotone(nodes, gpus, nics):
    topology = Topology(nodes=nodes, gpus_per_node=gpus, nics_per_node=nics)
    rng = np.random.default_rng(nodes * 100 + gpus * 10 + nics)
    tokens = np.zeros((topology.workers, topology.workers), dtype=np.int64)
    for planner in (plan_naive, plan_hierarchical):
        grown = tokens.copy()
        last = simulate_time(planner(Assignment(grown, 64), topology), topology)["total"]
        for _ in range(60):
            src, dst = rng.integers(topology.workers, size=2)
            grown[src, dst] += int(rng.integers(1, 20))
            now = simulate_time(planner(Assignment(grown, 64), topology), topology)["total"]
            assert now >= last, f"{planner.__name__}: {last} -> {now} after growing ({src}, {dst})"
            last = now
