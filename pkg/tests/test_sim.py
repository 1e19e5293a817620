import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rcnc.randomized import RandomizedPolicy
from rcnc.sim import (GreedyPolicy, InadmissibleFlow, ZeroPolicy, check_admissible,
                      compute_metrics, run_simulation, step_slot, telescoping_violation, total_cost)
from rcnc.traffic import ArrivalEntry, ArrivalSpec

from conftest import chain_net, diamond_net, link_net, source_spec


def test_admissible_within_queue_and_capacity(diamond):
    Q = np.zeros(diamond.queue_shape)
    Q[diamond.node_of(0, "1"), 1] = 6
    x = np.zeros(diamond.shape)
    x[diamond.find_edge("1", "2"), 1] = 5
    assert check_admissible(Q, x, diamond, "peak") is None


def test_availability_violation_reports_node_and_lifetime(diamond):
    Q = np.zeros(diamond.queue_shape)
    Q[0, 1] = 6
    x = np.zeros(diamond.shape)
    x[diamond.find_edge("1", "2"), 1] = 7
    v = check_admissible(Q, x, diamond, "average")
    assert v.kind == "availability" and v.where == "node 1, l=2"
    assert (v.amount, v.limit) == (7, 6)


def test_lifetime_one_only_into_destination(diamond):
    Q = np.full(diamond.queue_shape, 3.0)
    x = np.zeros(diamond.shape)
    x[diamond.find_edge("1", "3"), 0] = 1
    v = check_admissible(Q, x, diamond)
    assert v.kind == "forbidden (edge, lifetime) pair"


def test_peak_capacity_only_in_peak_mode(diamond):
    Q = np.full(diamond.queue_shape, 9.0)
    x = np.zeros(diamond.shape)
    x[diamond.find_edge("1", "2"), 1] = 6
    assert check_admissible(Q, x, diamond, "peak").kind == "peak capacity"
    assert check_admissible(Q, x, diamond, "average") is None


@pytest.mark.parametrize("value, kind", [(-1.0, "negative flow"), (np.nan, "non-finite flow"),
                                         (0.5, "non-integer flow in integer mode")])
def test_other_violations(diamond, value, kind):
    Q = np.full(diamond.queue_shape, 9.0)
    x = np.zeros(diamond.shape)
    x[diamond.find_edge("1", "2"), 1] = value
    assert check_admissible(Q, x, diamond, integer=True).kind == kind


def test_full_drain_to_destination():
    net = link_net(capacity=3)
    Q = np.array([[3.0], [0.0]])
    x = np.array([[3.0]])
    Qn, rec = step_slot(Q, x, np.zeros_like(Q), net)
    assert rec["delivered"][0] == 3 and rec["dropped"][0] == 0
    assert not Qn.any()


def test_expiry_drops():
    net = link_net()
    Q = np.array([[2.0], [0.0]])
    Qn, rec = step_slot(Q, np.zeros((1, 1)), np.zeros_like(Q), net)
    assert rec["dropped"][0] == 2 and not Qn.any()


def test_processing_scales_flow():
    net = chain_net(scaling=(2.0,), workload=(1.0,), lifetime=3)
    Q = np.zeros(net.queue_shape)
    a_node = net.node_of(0, "a", 1)
    Q[a_node, 2] = 1
    e = int(np.flatnonzero(net.is_processing & (net.tail == a_node))[0])
    x = np.zeros(net.shape)
    x[e, 2] = 1
    Qn, rec = step_slot(Q, x, np.zeros_like(Q), net)
    assert Qn[net.node_of(0, "a", 2), 1] == 2
    assert Qn.sum() == 2 and rec["gain"] == 1


def test_delivery_normalized_by_cumulative_scaling():
    net = chain_net(scaling=(1.0, 2.0), workload=(1.0, 1.0), lifetime=3)
    b2 = net.node_of(0, "b", 2)
    Q = np.zeros(net.queue_shape)
    Q[b2, 0] = 1
    e = int(np.flatnonzero(net.is_processing & (net.tail == b2))[0])
    x = np.zeros(net.shape)
    x[e, 0] = 1
    _, rec = step_slot(Q, x, np.zeros_like(Q), net)
    assert rec["delivered"][0] == pytest.approx(1.0)
    assert rec["raw_delivered"] == pytest.approx(2.0)
    assert rec["cost"][0] == pytest.approx(3.0)


def test_zero_policy_drops_everything(diamond):
    spec = source_spec(diamond, kind="poisson", lam=6)
    tr = run_simulation(diamond, spec, ZeroPolicy(), 500, seed=1)
    assert tr.delivered.sum() == 0
    # everything that arrived has expired except what is still queued
    assert tr.dropped.sum() + tr.final_queue.sum() == tr.arrivals.sum()


def test_greedy_two_slot_traces():
    net = link_net(capacity=1, lifetime=1, gamma=0.5)
    spec = source_spec(net, "s", kind="trace", values=[2, 0])
    tr = run_simulation(net, spec, GreedyPolicy(), 1000)
    assert tr.aligned_reliability()[0] == 0.5
    spec = source_spec(net, "s", kind="constant", value=1)
    tr = run_simulation(net, spec, GreedyPolicy(), 1000)
    assert tr.aligned_reliability()[0] == 1.0


def test_inadmissible_policy_fails_fast(diamond):
    class Bad(ZeroPolicy):
        def decide(self, Q, t):
            x = np.zeros(diamond.shape)
            if t == 7:
                x[diamond.find_edge("1", "2"), 1] = 100
            return x

    with pytest.raises(InadmissibleFlow) as err:
        run_simulation(diamond, source_spec(diamond, lam=1), Bad(), 20)
    assert err.value.slot == 7


def test_metrics_when_everything_is_delivered():
    net = link_net(capacity=5, lifetime=1, gamma=0.8, cost=2.0)
    spec = source_spec(net, "s", kind="constant", value=3)
    tr = run_simulation(net, spec, GreedyPolicy(), 200)
    m = compute_metrics(tr, burn_in=1)[0]
    assert m.reliability_ratio == pytest.approx(1 / 0.8)
    assert m.meets_target and m.cost == pytest.approx(6.0)
    assert total_cost(tr, 1) == pytest.approx(6.0)


def test_determinism(diamond):
    spec = source_spec(diamond, lam=6)
    a = run_simulation(diamond, spec, RandomizedPolicy(10), 3000, seed=4, mode="average")
    b = run_simulation(diamond, spec, RandomizedPolicy(10), 3000, seed=4, mode="average")
    for f in ("arrivals", "delivered", "dropped", "cost", "flow_sum"):
        assert getattr(a, f).tobytes() == getattr(b, f).tobytes()


def test_fused_and_slot_paths_agree(diamond):
    spec = source_spec(diamond, lam=6)
    fast = run_simulation(diamond, spec, RandomizedPolicy(10), 2000, seed=2, mode="average")
    slow = run_simulation(diamond, spec, RandomizedPolicy(10, compiled=False), 2000, seed=2,
                          mode="average")
    assert np.array_equal(fast.delivered, slow.delivered)
    assert np.array_equal(fast.flow_sum, slow.flow_sum)


def test_trace_csv_layout(tmp_path):
    net = link_net(capacity=1)
    tr = run_simulation(net, source_spec(net, "s", kind="constant", value=1), GreedyPolicy(), 3)
    path = tmp_path / "trace.csv"
    tr.to_csv(path)
    lines = path.read_bytes().split(b"\n")
    assert lines[0] == b"slot,commodity,arrivals,delivered,dropped,cost,reliability_gap"
    assert lines[1] == b"0,flow,1,0,0,0,0.5"
    assert len(lines) == 5 and lines[-1] == b""


@st.composite
def flows_on_diamond(draw):
    lam = draw(st.integers(0, 8))
    L = draw(st.integers(1, 4))
    return lam, L, draw(st.integers(0, 2**16))


@settings(max_examples=25, deadline=None)
@given(flows_on_diamond())
def test_mass_balance_and_telescoping(case):
    lam, L, seed = case
    net = diamond_net(lifetime=L)
    spec = source_spec(net, kind="uniform", lam=lam)
    tr = run_simulation(net, spec, RandomizedPolicy(5, compiled=False), 150, seed=seed,
                        mode="average", record_flows=True)
    assert tr.checks["mass_balance_error"] == 0.0
    assert telescoping_violation(tr, net) <= 1e-9


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 4), st.floats(0.1, 9.0), st.integers(0, 1000))
def test_backlog_is_bounded(L, lam, seed):
    net = diamond_net(lifetime=L)
    spec = source_spec(net, kind="poisson", lam=lam)
    tr = run_simulation(net, spec, GreedyPolicy(), 300, seed=seed, numeric="fluid")
    bound = net.num_nodes * L * (spec.a_max + net.resource_capacity.sum())
    assert tr.checks["max_backlog"] <= bound


def test_fluid_mass_balance_with_scaling():
    net = chain_net(scaling=(0.5,), workload=(0.25,), lifetime=4)
    spec = ArrivalSpec((ArrivalEntry(net.node_of(0, "a"), 4, "poisson", {"lam": 3}),),
                       net.num_nodes, 4)
    tr = run_simulation(net, spec, GreedyPolicy(), 400, seed=3, numeric="fluid")
    assert tr.checks["mass_balance_error"] <= 1e-9
    assert tr.delivered.sum() > 0
