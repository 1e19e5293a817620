import numpy as np
import pytest

from rcnc.network import ServiceChain, build_layered_network, make_graph, single_commodity, validate_graph
from rcnc.traffic import ArrivalEntry, ArrivalSpec

DIAMOND = {
    "nodes": ["1", "2", "3", "4"],
    "links": [
        {"a": "1", "b": "2", "capacity": 5, "cost": 1},
        {"a": "1", "b": "3", "capacity": 5, "cost": 5},
        {"a": "2", "b": "4", "capacity": 5, "cost": 1},
        {"a": "3", "b": "4", "capacity": 5, "cost": 5},
    ],
}


def diamond_graph(cost13=5.0, cost34=5.0, capacity=5.0):
    raw = {"nodes": DIAMOND["nodes"],
           "links": [dict(l) for l in DIAMOND["links"]]}
    raw["links"][1]["cost"] = cost13
    raw["links"][3]["cost"] = cost34
    for l in raw["links"]:
        l["capacity"] = capacity
    return validate_graph(raw)


def diamond_net(lifetime=2, gamma=0.9, **kw):
    return single_commodity(diamond_graph(**kw), lifetime, gamma, destination="4")


def source_spec(net, node="1", lifetime=None, kind="poisson", **params):
    """Arrivals at ``node`` (single commodity, stage 1) with the given lifetime."""
    lifetime = net.max_lifetime if lifetime is None else lifetime
    entry = ArrivalEntry(node=net.node_of(0, node), lifetime=lifetime, kind=kind, params=params)
    return ArrivalSpec((entry,), net.num_nodes, net.max_lifetime, net.num_commodities)


def link_net(capacity=1.0, lifetime=1, gamma=0.5, cost=0.0):
    """Directed single link ``s -> d``."""
    g = make_graph(["s", "d"], [(0, 1)], [capacity], [cost], destination=1)
    return single_commodity(g, lifetime, gamma)


def chain_net(scaling=(2.0,), workload=(1.0,), lifetime=3, gamma=1.0, cpu=10.0):
    """Two nodes a -> b with compute at both and a one-or-more-function service to b."""
    g = make_graph(["a", "b"], [(0, 1), (1, 0)], [10.0, 10.0], [1.0, 1.0],
                   node_capacity=[cpu, cpu], node_cost=[2.0, 3.0])
    svc = ServiceChain("svc", "b", lifetime, gamma, tuple(scaling), tuple(workload), ("a",))
    return build_layered_network(g, [svc])


@pytest.fixture
def diamond():
    return diamond_net()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
