import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rcnc.analysis import (BackpressurePolicy, StabilityQuery, epsilon_convergence_time,
                           min_cost_flow_lp, stability_margin_lp, write_assignment_csv)
from rcnc.network import make_graph, single_commodity
from rcnc.randomized import RandomizedPolicy, routing_pdf
from rcnc.sim import run_simulation

from conftest import diamond_net, link_net, source_spec


def unit_at_source(net, rate=1.0, lifetime=None):
    lam = np.zeros(net.queue_shape)
    lam[net.node_of(0, "1"), (lifetime or net.max_lifetime) - 1] = rate
    return lam


def test_region_of_diamond(diamond):
    res = stability_margin_lp(StabilityQuery(diamond, unit_at_source(diamond)))
    assert res.theta == pytest.approx(100 / 9)


def test_vacuous_reliability_is_unbounded(diamond):
    res = stability_margin_lp(StabilityQuery(diamond, unit_at_source(diamond), gamma=0.0))
    assert res.status == "unbounded" and res.theta == float("inf")


def test_lifetime_too_short_for_two_hops():
    net = diamond_net(lifetime=1)
    res = stability_margin_lp(StabilityQuery(net, unit_at_source(net)))
    assert res.theta == pytest.approx(0.0, abs=1e-12)
    assert res.x.sum() == pytest.approx(0.0, abs=1e-12)


def test_min_cost_of_diamond(diamond):
    res = min_cost_flow_lp(StabilityQuery(diamond, unit_at_source(diamond, 6.0)))
    assert res.cost == pytest.approx(14.0)
    tot = res.edge_totals()
    assert tot[diamond.find_edge("1", "2")] == pytest.approx(5.0)
    assert tot[diamond.find_edge("1", "3")] == pytest.approx(0.4)


def test_min_cost_with_cheapened_route():
    net = diamond_net(cost13=2.0, cost34=2.0)
    res = min_cost_flow_lp(StabilityQuery(net, unit_at_source(net, 6.0)))
    assert res.cost == pytest.approx(11.6)


def test_no_required_delivery_costs_nothing(diamond):
    res = min_cost_flow_lp(StabilityQuery(diamond, unit_at_source(diamond, 6.0), gamma=0.0))
    assert res.cost == pytest.approx(0.0) and not res.x.any()


def test_infeasible_demand_is_reported(diamond):
    res = min_cost_flow_lp(StabilityQuery(diamond, unit_at_source(diamond, 20.0)))
    assert res.status == "infeasible"


@pytest.mark.parametrize("kw", [{"lam": -1.0}, {"lam": 0.0}, {"gamma": 1.5}])
def test_query_validation(diamond, kw):
    lam = np.full(diamond.queue_shape, kw.get("lam", 1.0))
    with pytest.raises(ValueError):
        StabilityQuery(diamond, lam, gamma=kw.get("gamma"))


def test_assignment_csv(diamond, tmp_path):
    res = min_cost_flow_lp(StabilityQuery(diamond, unit_at_source(diamond, 6.0)))
    path = tmp_path / "x.csv"
    write_assignment_csv(path, res, diamond)
    lines = path.read_text().splitlines()
    assert lines[0] == "theta,cost,edge,lifetime,flow"
    assert any(l.startswith("1,14,1->2,2,5") for l in lines[1:])


def test_immediate_convergence():
    assert epsilon_convergence_time(np.full(50, 5.4), 0.9, 6.0, 0.01) == 1


def test_no_delivery_never_converges():
    assert epsilon_convergence_time(np.zeros(50), 0.9, 6.0, 0.01) is None


def test_convergence_after_slow_start():
    d = np.concatenate([[0.0], np.full(99, 6.0)])
    # running averages: 0, 3, 4, 4.5, 4.8, 5, ... first within 0.01 of 5.4 from s = 10
    assert epsilon_convergence_time(d, 0.9, 6.0, 0.01) == 10


def test_backpressure_sends_on_positive_differential():
    net = link_net(capacity=3, lifetime=2, cost=1.0)
    p = BackpressurePolicy(V=2.0)
    p.reset(net, None, 0)
    Q = np.array([[4.0, 6.0], [0.0, 0.0]])
    x = p.decide(Q, 0)
    assert x.sum() == 3 and x[0, 1] == 3  # newest packets first


def test_backpressure_idles_on_empty_network(diamond):
    p = BackpressurePolicy(V=0.0)
    p.reset(diamond, None, 0)
    assert not p.decide(np.zeros(diamond.queue_shape), 0).any()


def test_backpressure_idles_when_cost_dominates():
    net = link_net(capacity=3, lifetime=2, cost=1.0)
    p = BackpressurePolicy(V=20.0)
    p.reset(net, None, 0)
    assert not p.decide(np.array([[4.0, 6.0], [0.0, 0.0]]), 0).any()


def test_backpressure_reaches_target_with_loose_deadline():
    net = diamond_net(lifetime=12)
    spec = source_spec(net, kind="poisson", lam=6)
    tr = run_simulation(net, spec, BackpressurePolicy(V=1.0), 20_000, seed=1)
    assert tr.delivered[2000:].mean() >= 0.9 * 6


@st.composite
def region_instances(draw):
    n = draw(st.integers(2, 5))
    pairs = [(u, v) for u in range(n) for v in range(n) if u != v]
    edges = draw(st.lists(st.sampled_from(pairs), min_size=1, unique=True))
    caps = draw(st.lists(st.integers(1, 3), min_size=len(edges), max_size=len(edges)))
    g = make_graph([str(i) for i in range(n)], edges, caps, np.ones(len(edges)),
                   destination=n - 1)
    L = draw(st.integers(1, 3))
    net = single_commodity(g, L + 1, 0.5)
    lam = np.zeros(net.queue_shape)
    src = draw(st.integers(0, n - 2))
    lam[src, draw(st.integers(0, L - 1))] = 1.0
    gamma = draw(st.floats(0.05, 1.0))
    return net, lam, L, gamma


def _theta(net, lam, L, gamma):
    return stability_margin_lp(StabilityQuery(net, lam, gamma=gamma, lifetime=L)).theta


@settings(max_examples=60, deadline=None)
@given(region_instances(), st.floats(0.0, 1.0))
def test_region_grows_with_lifetime_and_laxer_reliability(case, shrink):
    net, lam, L, gamma = case
    base = _theta(net, lam, L, gamma)
    assert _theta(net, lam, L + 1, gamma) >= base - 1e-9
    assert _theta(net, lam, L, gamma * shrink) >= base - 1e-9


@pytest.mark.slow
def test_lp_flow_is_realized_by_randomized_policy(diamond):
    lam = unit_at_source(diamond, 6.0)
    x = min_cost_flow_lp(StabilityQuery(diamond, lam)).x
    pdf = routing_pdf(x, lam, diamond)
    spec = source_spec(diamond, kind="poisson", lam=6)
    tr = run_simulation(diamond, spec, RandomizedPolicy(0, frozen_pdf=pdf), 200_000, seed=3,
                        mode="average")
    used = x > 1e-9
    assert np.allclose(tr.mean_flow[used], x[used], rtol=0.02)
    assert np.all(tr.mean_flow[~used] <= 0.02 * x.max())
