import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rcnc.config import bundled_config_path, load_config
from rcnc.lp import solve_lp, verify_solution
from rcnc.rcnc import (FlowMatchingLP, RCNCPolicy, assemble_flow_matching_lp, capacity_iteration,
                       delay_matrix, delay_propagate, repair, update_request_queues)
from rcnc.sim import check_admissible, run_simulation

from conftest import diamond_net, link_net


@pytest.mark.parametrize("R, nu, mu, expected", [(0, 3, 3, 0), (0, 3, 0, 3), (1, 0, 2, -1)])
def test_request_queue_update(R, nu, mu, expected):
    got = update_request_queues(np.array([[R]], float), np.array([[nu]], float),
                                np.array([[mu]], float))
    assert got[0, 0] == expected


def test_delay_first_column_unchanged():
    X = np.arange(6.0).reshape(3, 2)
    assert np.array_equal(delay_propagate(delay_matrix(3), X, 0), X[:, 0])


def test_delay_ages_lifetime_three_to_one():
    X = np.zeros((3, 3))
    X[2, 0] = 1
    assert delay_propagate(delay_matrix(3), X, 2).tolist() == [1.0, 0.0, 0.0]


def test_delay_with_lifetime_one_forgets_the_past():
    X = np.array([[4.0, 0.0, 0.0]])
    assert delay_propagate(delay_matrix(1), X, 2)[0] == 0


def test_delay_dimension_checks():
    with pytest.raises(ValueError):
        delay_propagate(delay_matrix(3), np.zeros((2, 2)), 0)
    with pytest.raises(ValueError):
        delay_propagate(delay_matrix(2), np.zeros((2, 2)), 2)


def test_single_slot_lp_is_queue_availability(diamond):
    Q = np.arange(diamond.num_nodes * 2, dtype=float).reshape(diamond.queue_shape)
    R = np.ones(diamond.shape)
    C = diamond.resource_capacity
    p1 = assemble_flow_matching_lp(diamond, R, Q, np.zeros(diamond.queue_shape), C, 1)[0]
    p2 = assemble_flow_matching_lp(diamond, R, Q, np.full(diamond.queue_shape, 9.0), C, 1)[0]
    assert np.array_equal(p1.b, p2.b)
    for label, rhs in zip(p1.row_labels, p1.b):
        if label.startswith("avail"):
            node, life = label[6:].split(",")[:2]
            k = int(life[2:]) - 1
            assert rhs == Q[diamond.node_of(0, node), k]


@pytest.mark.parametrize("n", [1, 2, 3])
def test_lp_dimensions(n):
    net = diamond_net(lifetime=3)
    lp = FlowMatchingLP(net, n)
    N, L = net.queue_shape
    E = net.num_edges
    # (edge, lifetime) pairs that can never reach the destination are left out
    assert lp.num_vars == n * int(net.useful_mask.sum())
    assert lp.num_vars <= n * L * E
    assert lp.A.shape[0] <= n * L * N + n * E
    caps = sum(1 for lab in lp.row_labels if lab.startswith("cap"))
    assert caps == n * len({int(net.resource[e]) for e in np.flatnonzero(net.useful_mask.any(1))})


def test_zero_requests_give_zero_flow(diamond):
    Q = np.full(diamond.queue_shape, 5.0)
    mu, _ = FlowMatchingLP(diamond, 2).solve(np.zeros(diamond.shape), Q,
                                             np.zeros(diamond.queue_shape),
                                             diamond.resource_capacity)
    assert not mu.any()


def test_empty_queues_give_zero_flow(diamond):
    mu, _ = FlowMatchingLP(diamond, 1).solve(np.full(diamond.shape, 3.0),
                                             np.zeros(diamond.queue_shape),
                                             np.zeros(diamond.queue_shape),
                                             diamond.resource_capacity)
    assert not mu.any()


def test_negative_requests_give_zero_flow(diamond):
    R = np.full(diamond.shape, 2.0)
    e12 = diamond.find_edge("1", "2")
    R[e12] = -1.0
    Q = np.full(diamond.queue_shape, 4.0)
    mu, _ = FlowMatchingLP(diamond, 2).solve(R, Q, np.full(diamond.queue_shape, 1.0),
                                             diamond.resource_capacity)
    assert not mu[e12].any()
    assert mu[diamond.find_edge("1", "3"), 1] > 0


@pytest.mark.parametrize("seed", range(20))
def test_slot_lp_residuals(seed):
    rng = np.random.default_rng(seed)
    net = diamond_net(lifetime=int(rng.integers(2, 4)))
    n = int(rng.integers(1, 4))
    R = rng.normal(size=net.shape) * 3
    Q = rng.integers(0, 8, net.queue_shape).astype(float)
    lam = rng.uniform(0, 3, net.queue_shape)
    prob = assemble_flow_matching_lp(net, R, Q, lam, net.resource_capacity, n)[0]
    sol = solve_lp(prob)
    assert sol.ok
    assert verify_solution(prob, sol).max_violation <= 1e-8
    mu, resid = FlowMatchingLP(net, n).solve(R, Q, lam, net.resource_capacity)
    assert resid <= 1e-8
    assert np.allclose(mu[net.useful_mask].sum(), sol.x[:int(net.useful_mask.sum())].sum())


def test_distributed_split_matches_centralized_when_n_is_one(diamond):
    rng = np.random.default_rng(5)
    R = rng.normal(size=diamond.shape)
    Q = rng.integers(0, 6, diamond.queue_shape).astype(float)
    lam = np.zeros(diamond.queue_shape)
    whole = solve_lp(assemble_flow_matching_lp(diamond, R, Q, lam, diamond.resource_capacity, 1)[0])
    parts = assemble_flow_matching_lp(diamond, R, Q, lam, diamond.resource_capacity, 1,
                                      mode="distributed")
    assert sum(solve_lp(p).objective for p in parts) == pytest.approx(whole.objective)


def test_repair_restores_admissibility(diamond):
    Q = np.zeros(diamond.queue_shape)
    n1 = diamond.node_of(0, "1")
    Q[n1, 1] = 3
    mu = np.zeros(diamond.shape)
    mu[diamond.find_edge("1", "2"), 1] = 3.0000004
    mu[diamond.find_edge("1", "3"), 1] = 0.9999997
    for integer in (True, False):
        fixed = repair(mu, Q, diamond, diamond.resource_capacity, integer)
        assert check_admissible(Q, fixed, diamond, "peak", integer=integer) is None


def test_repair_tolerates_tiny_negative_queues(diamond):
    Q = np.full(diamond.queue_shape, -1e-15)
    mu = np.full(diamond.shape, 0.5)
    fixed = repair(mu, Q, diamond, diamond.resource_capacity, integer=False)
    assert np.all(np.isfinite(fixed)) and not fixed.any()


def test_capacity_step_example():
    net = link_net(capacity=5)
    K = 100
    nxt, growth, eps = capacity_iteration(np.array([5.0]), np.array([5.0]), np.array([[0.5 * K]]),
                                          np.array([[1.0]]), K, 0.1, net)
    assert growth[0] == pytest.approx(0.5) and eps[0] == pytest.approx(0.5)
    assert nxt[0] == pytest.approx(4.55)


def test_stable_frame_is_a_fixed_point(diamond):
    C = diamond.resource_capacity.astype(float)
    nxt, _, _ = capacity_iteration(C, C, np.zeros(diamond.shape), np.ones(diamond.shape),
                                   1000, 0.1, diamond)
    assert np.array_equal(nxt, C)


def test_upstream_shortfall_is_not_charged_downstream(diamond):
    K = 10
    R = np.zeros(diamond.shape)
    R[diamond.find_edge("1", "2"), 1] = 2.0 * K
    R[diamond.find_edge("2", "4"), 0] = 2.0 * K
    nu = np.zeros(diamond.shape)
    nu[diamond.find_edge("2", "4"), 0] = 4.0
    C = diamond.resource_capacity.astype(float)
    _, _, eps = capacity_iteration(C, C, R, nu, K, 0.1, diamond)
    assert eps[diamond.resource[diamond.find_edge("2", "4")]] == pytest.approx(0.0)
    assert eps[diamond.resource[diamond.find_edge("1", "2")]] == pytest.approx(2.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 0.99))
def test_capacities_stay_clamped(seed, kappa):
    rng = np.random.default_rng(seed)
    net = diamond_net(lifetime=3)
    phys = net.resource_capacity.astype(float)
    C = rng.uniform(0, 1, phys.shape) * phys
    R = rng.normal(size=net.shape) * 1e4
    nu = rng.uniform(0, 5, net.shape)
    nxt, _, _ = capacity_iteration(C, phys, R, nu, 100, kappa, net)
    assert np.all(nxt >= 0) and np.all(nxt <= phys)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_request_queue_telescoping(seed, n):
    rng = np.random.default_rng(seed)
    R0 = rng.normal(size=(4, 3))
    nu = rng.uniform(0, 5, (n, 4, 3))
    mu = rng.uniform(0, 5, (n, 4, 3))
    R = R0.copy()
    for t in range(n):
        R = update_request_queues(R, nu[t], mu[t])
    assert np.allclose(R, R0 + (nu - mu).sum(axis=0), atol=1e-9, rtol=0)


@pytest.mark.parametrize("kw", [{"K": 0}, {"kappa": 0.0}, {"kappa": 1.0}, {"window": "x"}])
def test_policy_argument_checks(kw):
    with pytest.raises(ValueError):
        RCNCPolicy(5, **kw)


def test_short_peak_run_keeps_capacities_clamped():
    ex = load_config(bundled_config_path("illustrative_peak")).build()
    p = RCNCPolicy(5, n=2, K=200)
    tr = run_simulation(ex.net, ex.spec, p, 2000, seed=1, mode="peak")
    hist = np.array(p.capacity_history)
    assert len(hist) == 11
    assert np.all(hist >= 0) and np.all(hist <= ex.net.resource_capacity)
    assert p.lp_residual <= 1e-8
    assert tr.delivered.sum() > 0
