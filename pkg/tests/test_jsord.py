import numpy as np
import pytest

from edgematrix import jsord
from edgematrix.cellspace import ResourceCell
from edgematrix.cli import random_channel_instance
from edgematrix.domain import ServiceClass
from edgematrix.jsord import (
    ChannelInstance, OrchestrationSet, TooLarge, bruteforce_oracle,
    build_dispatch_lp, dispatch_slot, greedy_orchestrate, audit_plan,
    merge_instances, monolithic_jsord, omega, solve_all_channels,
)
from edgematrix.lp import solve_lp


def make_service(l, r=100.0, w=1.0, t=20.0, o=5.0, lam_unused=None):
    return ServiceClass(sla_level=1, service_id=l, packet_size_h=0.1, memory_r=r,
                       compute_w=w, max_response_t=t, exec_time_o=o)


def make_cell(m, W=5.0, R=1000.0):
    return ResourceCell(cell_id=m, anchor_node=1, cpu_Wpm=W, mem_Rpm=R,
                        edge_backing={1: (W, R)}, cloud_backing=(0.0, 0.0))


def make_instance(services, cells, lam, latency=0.0):
    L, M = len(services), len(cells)
    lam = np.asarray(lam, dtype=float).reshape(L, -1)
    N = lam.shape[1]
    lat = np.full((L, N, M), float(latency))
    return ChannelInstance(channel_id=1, services=services, cells=cells,
                           node_ids=list(range(1, N + 1)), lam=lam, latency=lat)


def full_set(inst):
    pairs = frozenset((s.key, c.cell_id) for s in inst.services for c in inst.cells)
    return OrchestrationSet(pairs=pairs, channel=inst.channel_id)


def test_empty_set_dispatches_nothing():
    inst = make_instance([make_service(1)], [make_cell(1)], [[10.0]])
    S = OrchestrationSet(pairs=frozenset(), channel=1)
    prob = build_dispatch_lp(inst, S)
    assert np.all(prob.upper_bounds_u == 0.0)
    assert omega(inst, S) == 0.0


def test_single_constraint_hand_lp():
    inst = make_instance([make_service(1, w=1.0, t=20.0, o=5.0)],
                         [make_cell(1, W=5.0)], [[10.0]])
    sol = solve_lp(build_dispatch_lp(inst, full_set(inst)))
    assert sol.objective_value == pytest.approx(5.0)
    assert sol.y_star[0] == pytest.approx(0.5)
    assert omega(inst, full_set(inst)) == pytest.approx(5.0)


def test_latency_indicator_boundary_is_strict():
    # t - o - latency = 20 - 5 - 15 = 0, not > 0
    inst = make_instance([make_service(1, t=20.0, o=5.0)], [make_cell(1)],
                         [[10.0]], latency=15.0)
    assert not inst.indicator.any()
    assert omega(inst, full_set(inst)) == 0.0


def test_greedy_two_services_fit():
    A, B = make_service(1, r=1.0, w=0.01), make_service(2, r=1.0, w=0.01)
    inst = make_instance([A, B], [make_cell(1, W=5.0, R=2.0)], [[10.0], [5.0]])
    S, plan = greedy_orchestrate(inst)
    assert S.pairs == {((1, 1), 1), ((1, 2), 1)}
    assert plan.throughput_psi == pytest.approx(15.0)
    assert plan.scope == "frame_prediction"
    _, opt = bruteforce_oracle(inst)
    assert opt == pytest.approx(15.0)


def test_greedy_memory_limited_picks_larger_demand():
    A, B = make_service(1, r=1.0, w=0.01), make_service(2, r=1.0, w=0.01)
    inst = make_instance([A, B], [make_cell(1, W=5.0, R=1.0)], [[10.0], [5.0]])
    S, plan = greedy_orchestrate(inst)
    assert S.pairs == {((1, 1), 1)}
    assert plan.throughput_psi == pytest.approx(10.0)


def test_adversarial_knapsack_ratio_recorded():
    A = make_service(1, r=2.0, w=0.01)
    B = make_service(2, r=1.0, w=0.01)
    C = make_service(3, r=1.0, w=0.01)
    inst = make_instance([A, B, C], [make_cell(1, W=100.0, R=2.0)],
                         [[11.0], [6.0], [6.0]])
    S, plan = greedy_orchestrate(inst)
    assert S.pairs == {((1, 1), 1)}
    assert plan.throughput_psi == pytest.approx(11.0)
    opt_set, opt_val = bruteforce_oracle(inst)
    assert opt_val == pytest.approx(12.0)
    assert opt_set.pairs == {((1, 2), 1), ((1, 3), 1)}
    assert plan.throughput_psi / opt_val >= 0.5


def test_set_memory_invariant_checked():
    A = make_service(1, r=2.0)
    inst = make_instance([A], [make_cell(1, R=1.0)], [[1.0]])
    S = full_set(inst)
    with pytest.raises(jsord.JsordError):
        inst.check_set(S)


def test_omega_monotone_under_extension():
    rng = np.random.default_rng(11)
    for _ in range(30):
        inst = random_channel_instance(rng, max_pairs=8)
        S, _ = greedy_orchestrate(inst)
        val = omega(inst, S)
        pairs = set(S.pairs)
        used = {c.cell_id: 0.0 for c in inst.cells}
        for key, cid in pairs:
            used[cid] += next(s.memory_r for s in inst.services if s.key == key)
        for e in jsord._feasible_extensions(inst, pairs, used):
            bigger = OrchestrationSet(pairs=frozenset(pairs | {e}), channel=1)
            assert omega(inst, bigger) >= val - 1e-9


def test_dispatch_slot_zero_and_equal_demand():
    inst = make_instance([make_service(1)], [make_cell(1, W=5.0)], [[10.0]])
    S, plan = greedy_orchestrate(inst)
    zero = dispatch_slot(inst, S, np.zeros((1, 1)))
    assert zero.throughput_psi == 0.0
    assert zero.scope == "slot"
    same = dispatch_slot(inst, S, inst.lam)
    assert same.throughput_psi == pytest.approx(plan.throughput_psi)


def test_dispatch_slot_capacity_bound():
    w, W = 0.5, 5.0
    inst = make_instance([make_service(1, w=w)], [make_cell(1, W=W)], [[4.0]])
    S, _ = greedy_orchestrate(inst)
    flood = dispatch_slot(inst, S, np.array([[1000.0]]))
    assert flood.throughput_psi == pytest.approx(W / w)


def test_parallel_equals_sequential():
    rng = np.random.default_rng(5)
    instances = []
    for cid in range(1, 5):
        inst = random_channel_instance(rng, max_pairs=8)
        inst.channel_id = cid
        instances.append(inst)
    seq, _ = solve_all_channels(instances, mode="sequential")
    par, _ = solve_all_channels(instances, mode="parallel")
    assert seq.keys() == par.keys()
    for cid in seq:
        assert seq[cid][0].pairs == par[cid][0].pairs
        assert seq[cid][1].y == par[cid][1].y
        assert seq[cid][1].throughput_psi == par[cid][1].throughput_psi


def test_empty_channel_contributes_empty_plan():
    inst = ChannelInstance(channel_id=3, services=[], cells=[], node_ids=[1],
                           lam=np.zeros((0, 1)), latency=np.zeros((0, 1, 0)))
    results, _ = solve_all_channels([inst])
    S, plan = results[3]
    assert not S.pairs and plan.throughput_psi == 0.0


def test_monolithic_single_channel_matches():
    inst = make_instance([make_service(1, r=1.0, w=0.01),
                          make_service(2, r=1.0, w=0.01)],
                         [make_cell(1, W=5.0, R=2.0)], [[10.0], [5.0]])
    S_ch, plan_ch = greedy_orchestrate(inst)
    S_m, plan_m, _ = monolithic_jsord(inst)
    assert S_m.pairs == S_ch.pairs
    assert plan_m.throughput_psi == pytest.approx(plan_ch.throughput_psi)


def test_bruteforce_limits():
    rng = np.random.default_rng(9)
    big = random_channel_instance(rng, max_pairs=12)
    while big.shape[0] * big.shape[2] <= 16:
        big = random_channel_instance(rng, max_pairs=12)
        break
    huge = make_instance([make_service(l) for l in range(1, 6)],
                         [make_cell(m) for m in range(1, 5)],
                         np.ones((5, 1)))
    with pytest.raises(TooLarge):
        bruteforce_oracle(huge)


def test_bruteforce_infeasible_family_returns_empty():
    inst = make_instance([make_service(1, r=10.0)], [make_cell(1, R=1.0)], [[5.0]])
    S, val = bruteforce_oracle(inst)
    assert not S.pairs and val == 0.0


def test_audit_flags_corrupted_plan():
    inst = make_instance([make_service(1)], [make_cell(1, W=5.0)], [[10.0]])
    S = OrchestrationSet(pairs=frozenset(), channel=1)
    bad = jsord.DispatchPlan(y={(1, 1, 1, 1): 1.0}, throughput_psi=10.0, scope="slot")
    problems = audit_plan(inst, S, inst.lam, bad)
    assert any("(1e)" in p for p in problems)


def test_merge_instances_covers_all_pairs():
    a = make_instance([make_service(1)], [make_cell(1)], [[1.0]])
    a.channel_id = 1
    b = make_instance([make_service(2)], [make_cell(2)], [[1.0]])
    b.channel_id = 2
    from edgematrix.domain import DemandTensor
    from edgematrix.topology import ClusterGraph, EdgeNode
    g = ClusterGraph([EdgeNode(1, 4.0, 1000.0, 125.0)], [])
    demand = DemandTensor(counts={(1, 1, 1): 1.0, (1, 2, 1): 1.0},
                          scope="frame_average")
    merged = merge_instances([a, b], g, demand)
    assert merged.shape == (2, 1, 2)
    # cross-channel latencies exist for every (service, cell) pair
    assert merged.latency.shape == (2, 1, 2)
