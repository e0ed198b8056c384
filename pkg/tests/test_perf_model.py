import numpy as np
import pytest
from hypothesis import given, strategies as st

from epbalance.core import Assignment, DedupModel, EfficiencyCurve, SourceRouting
from epbalance.perf_model import (breakdown_csv, dedup_factors, exposed_overhead, expert_compute_time,
                                  layer_compute_latency, moe_step_latency, rank_compute_latency,
                                  rank_latencies, traffic_volumes, transfer_latency)
from epbalance.planner import init_locality_first

from conftest import make_spec


def test_expert_compute_time_hand_values():
    spec = make_spec(per_token_flops=1e9, peak_flops=1e15, n_sat=256)
    assert expert_compute_time(0, spec) == 0.0
    assert expert_compute_time(256, spec) == pytest.approx(2.56e-4, rel=1e-12)
    # below saturation the time does not shrink
    assert expert_compute_time(64, spec) == pytest.approx(2.56e-4, rel=1e-12)
    assert expert_compute_time(512, spec) == pytest.approx(5.12e-4, rel=1e-12)


def test_rank_compute_symmetry_and_proportionality():
    spec = make_spec(ep=4, num_experts=4, n_sat=1)
    even = init_locality_first(SourceRouting(np.full((4, 4), 25)), spec.base_placement())
    lat = rank_compute_latency(even, spec.base_placement(), spec)
    assert np.allclose(lat, lat[0])
    # loads 227, 91, 41, 41 -> max/mean exactly 2.27
    loads = np.array([227, 91, 41, 41])
    counts = np.zeros((4, 4), dtype=int)
    counts[0] = loads
    a = init_locality_first(SourceRouting(counts), spec.base_placement())
    mx, ratio = layer_compute_latency(rank_compute_latency(a, spec.base_placement(), spec))
    assert ratio == pytest.approx(2.27, rel=1e-12)


def test_rank_compute_rejects_invalid_assignment():
    spec = make_spec(ep=2, num_experts=2)
    split = np.zeros((2, 2, 2), dtype=int)
    split[0, 0, 1] = 5  # rank 1 does not host expert 0
    with pytest.raises(ValueError):
        rank_compute_latency(Assignment(split), spec.base_placement(), spec)


def test_layer_compute_latency_examples():
    assert layer_compute_latency([1, 1, 1, 1]) == (1.0, 1.0)
    assert layer_compute_latency([2, 1, 1, 0]) == (2.0, 2.0)
    with pytest.raises(ValueError):
        layer_compute_latency([])


def _one_way(n=100):
    split = np.zeros((2, 2, 2), dtype=int)
    split[0, 1, 1] = n  # r0 sources n tokens for e1 hosted on r1
    return Assignment(split)


def test_traffic_hand_values():
    spec = make_spec(ep=2, num_experts=2, hidden_bytes=4096.0)
    v_in, v_out = traffic_volumes(_one_way(), spec.base_placement(), spec)
    assert v_out[0] == 409600.0 and v_in[1] == 409600.0
    assert v_in[0] == 0.0 and v_out[1] == 0.0
    v_in, _ = traffic_volumes(_one_way(), spec.base_placement(), spec,
                              lambdas=(np.array([1.0, 2.0]), np.ones(2)))
    assert v_in[1] == 204800.0


def test_local_routing_has_no_traffic():
    spec = make_spec(ep=2, num_experts=4)
    counts = np.array([[5, 7, 0, 0], [0, 0, 3, 9]])
    a = init_locality_first(SourceRouting(counts), spec.base_placement())
    v_in, v_out = traffic_volumes(a, spec.base_placement(), spec)
    assert not v_in.any() and not v_out.any()
    t, bd = moe_step_latency(a, spec.base_placement(), spec)
    assert t == max(b.compute for b in bd)


def test_moe_step_latency_exact_sum():
    spec = make_spec(ep=2, num_experts=2, n_sat=1, hidden_bytes=4096.0, net_bandwidth=9e11,
                     per_token_flops=1e8, peak_flops=1e15)
    split = np.zeros((2, 2, 2), dtype=int)
    split[0, 0, 0] = 50
    split[0, 1, 1] = 100
    split[1, 1, 1] = 30
    t, bd = moe_step_latency(Assignment(split), spec.base_placement(), spec)
    comp = 130 * 1e8 / 1e15
    comm = 2 * 100 * 4096.0 / 9e11
    assert t == pytest.approx(comp + comm, rel=1e-12)
    assert bd[1].compute == pytest.approx(comp)
    assert "rank,compute_s" in breakdown_csv(bd)


def test_double_penalty_witness():
    spec = make_spec(ep=2, num_experts=2, n_sat=1)
    routing = SourceRouting([[150, 50], [150, 50]])
    base = spec.base_placement()
    a = init_locality_first(routing, base)
    comp = rank_compute_latency(a, base, spec)
    v_in, _ = traffic_volumes(a, base, spec)
    assert np.argmax(comp) == np.argmax(v_in) == 0
    split = np.zeros((2, 2, 2), dtype=int)
    split[0, 0, 0], split[1, 0, 0], split[1, 0, 1] = 150, 50, 100
    split[0, 1, 1], split[1, 1, 1] = 50, 50
    bal = Assignment(split)
    placed = base.with_replicas([[], [0]])
    comp2 = rank_compute_latency(bal, placed, spec)
    v_in2, _ = traffic_volumes(bal, placed, spec)
    assert comp2.max() < comp.max() and v_in2.max() < v_in.max()


def test_transfer_latency_hand_values():
    spec = make_spec(expert_weight_bytes=1e8, net_bandwidth=9e11)
    assert transfer_latency((), (), spec) == 0.0
    assert transfer_latency((1, 2), (3,), spec) == pytest.approx(2.222e-4, rel=1e-3)
    assert transfer_latency((1, 2, 3), (4, 5, 6), spec) == pytest.approx(3.333e-4, rel=1e-3)


def test_exposed_overhead_examples():
    assert exposed_overhead([1e-4, 2e-4], [3e-4, 3e-4]) == 0.0
    assert exposed_overhead([5e-4, 1e-4], [3e-4, 3e-4]) == pytest.approx(2e-4)
    with pytest.raises(ValueError):
        exposed_overhead([1.0], [1.0, 2.0])


@given(st.lists(st.floats(0, 1), min_size=1, max_size=8), st.lists(st.floats(0, 1), min_size=1, max_size=8))
def test_exposed_overhead_nonnegative(t, w):
    n = min(len(t), len(w))
    assert exposed_overhead(t[:n], w[:n]) >= 0.0


def test_dedup_fanin_counts_distinct_deliveries():
    spec = make_spec(ep=2, num_experts=4, top_k=2, dedup_model=DedupModel(kind="fanin"))
    # rank 0's token hits experts 2 and 3, both on rank 1: one delivery, two hits
    r = SourceRouting(token_experts=[np.array([[2, 3]]), np.array([[2, 3]])], num_experts=4)
    lam_in, lam_out = dedup_factors(spec, r)
    assert lam_in.tolist() == [1.0, 2.0] and lam_out.tolist() == [2.0, 1.0]
    const = make_spec(dedup_model=DedupModel(lambda_in=2.0, lambda_out=1.5))
    assert dedup_factors(const)[0].tolist() == [2.0, 2.0]


@given(st.integers(1, 4), st.integers(0, 200), st.integers(0, 200))
def test_rank_latencies_monotone_in_tokens(seed, a, b):
    spec = make_spec(ep=2, num_experts=2, efficiency_curve=EfficiencyCurve(n_sat=64))
    lo, hi = sorted((a, b))
    f = lambda n: rank_latencies(init_locality_first(SourceRouting([[n, 0], [0, 0]]), spec.base_placement()),
                                 spec.base_placement(), spec)[0]
    assert f(lo) <= f(hi)
