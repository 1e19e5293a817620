"""Physical networks, service chains and the layered-graph reduction.

Every controller in this package works on a :class:`LayeredGraph`.  A plain
single-commodity routing problem is a layered graph with one layer and
``zeta = rho = 1`` on every edge, so one code path serves both settings.

Lifetimes are stored zero-based in arrays: column ``k`` holds lifetime ``k + 1``.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np


class GraphError(ValueError):
    """Raised when a graph or service description breaks a model invariant."""


@dataclass(frozen=True)
class NetworkGraph:
    nodes: tuple[str, ...]
    edges: tuple[tuple[int, int], ...]
    capacity: np.ndarray
    cost: np.ndarray
    destination: int | None = None
    node_capacity: np.ndarray | None = None
    node_cost: np.ndarray | None = None
    out_edges: tuple[tuple[int, ...], ...] = field(default=(), repr=False)
    in_edges: tuple[tuple[int, ...], ...] = field(default=(), repr=False)

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def index(self, node: str) -> int:
        try:
            return self.nodes.index(str(node))
        except ValueError:
            raise GraphError(f"unknown node id {node!r}") from None

    def edge_index(self, tail: str, head: str) -> int:
        pair = (self.index(tail), self.index(head))
        try:
            return self.edges.index(pair)
        except ValueError:
            raise GraphError(f"no edge {tail}->{head}") from None

    def hop_distance(self, target: int) -> np.ndarray:
        """Hop count from every node to ``target`` (``inf`` when unreachable)."""
        return _bfs_to(target, self.num_nodes, self.edges)


def _bfs_to(target: int, n: int, edges: Sequence[tuple[int, int]]) -> np.ndarray:
    preds: list[list[int]] = [[] for _ in range(n)]
    for u, v in edges:
        preds[v].append(u)
    dist = np.full(n, np.inf)
    dist[target] = 0
    queue = deque([target])
    while queue:
        v = queue.popleft()
        for u in preds[v]:
            if dist[u] == np.inf:
                dist[u] = dist[v] + 1
                queue.append(u)
    return dist


def _nonneg(value, what: str) -> float:
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise GraphError(f"{what} must be a number, got {value!r}") from None
    if not math.isfinite(v) or v < 0:
        raise GraphError(f"{what} must be finite and >= 0, got {value!r}")
    return v


def validate_graph(raw: Mapping) -> NetworkGraph:
    """Build a :class:`NetworkGraph` from a parsed config mapping.

    ``raw`` holds ``nodes`` (ids), ``links`` (dicts with ``tail``/``head`` or
    ``a``/``b``, ``capacity``, ``cost`` and optional ``directed``), optional
    ``destination`` and optional ``compute`` (node id -> capacity/cost).
    Undirected links become two independent directed edges.
    """
    nodes = tuple(str(n) for n in raw.get("nodes", ()))
    if len(set(nodes)) != len(nodes):
        raise GraphError("duplicate node id")
    index = {n: i for i, n in enumerate(nodes)}

    def lookup(node) -> int:
        key = str(node)
        if key not in index:
            raise GraphError(f"unknown node id {key!r} in edge")
        return index[key]

    edges: list[tuple[int, int]] = []
    caps: list[float] = []
    costs: list[float] = []
    seen: set[tuple[int, int]] = set()
    for link in raw.get("links", ()):
        tail = link.get("tail", link.get("a"))
        head = link.get("head", link.get("b"))
        u, v = lookup(tail), lookup(head)
        if u == v:
            raise GraphError(f"self-loop on node {nodes[u]!r}")
        cap = _nonneg(link.get("capacity"), f"capacity of link {tail}-{head}")
        cost = _nonneg(link.get("cost", 0.0), f"cost of link {tail}-{head}")
        pairs = [(u, v)] if link.get("directed", False) else [(u, v), (v, u)]
        for pair in pairs:
            if pair in seen:
                raise GraphError(f"duplicate edge {nodes[pair[0]]}->{nodes[pair[1]]}")
            seen.add(pair)
            edges.append(pair)
            caps.append(cap)
            costs.append(cost)

    dest = raw.get("destination")
    if "destination" in raw and dest is None:
        raise GraphError("destination missing")
    dest_idx = None
    if dest is not None:
        if str(dest) not in index:
            raise GraphError(f"destination {dest!r} is not a node")
        dest_idx = index[str(dest)]

    node_cap = np.zeros(len(nodes))
    node_cost = np.zeros(len(nodes))
    for node, spec in (raw.get("compute") or {}).items():
        i = index.get(str(node))
        if i is None:
            raise GraphError(f"unknown node id {node!r} in compute")
        node_cap[i] = _nonneg(spec.get("capacity"), f"compute capacity of {node}")
        node_cost[i] = _nonneg(spec.get("cost", 0.0), f"compute cost of {node}")

    return make_graph(nodes, edges, caps, costs, dest_idx, node_cap, node_cost)


def make_graph(nodes, edges, capacity, cost, destination=None,
               node_capacity=None, node_cost=None) -> NetworkGraph:
    """Assemble a graph from already-indexed parts and build adjacency."""
    nodes = tuple(str(n) for n in nodes)
    edges = tuple((int(u), int(v)) for u, v in edges)
    n = len(nodes)
    out_e: list[list[int]] = [[] for _ in range(n)]
    in_e: list[list[int]] = [[] for _ in range(n)]
    for k, (u, v) in enumerate(edges):
        if not (0 <= u < n and 0 <= v < n):
            raise GraphError(f"edge {k} references a missing node")
        if u == v:
            raise GraphError(f"self-loop on node {nodes[u]!r}")
        out_e[u].append(k)
        in_e[v].append(k)
    if len(set(edges)) != len(edges):
        raise GraphError("duplicate edge")
    cap = np.asarray(capacity, dtype=float).reshape(len(edges))
    cst = np.asarray(cost, dtype=float).reshape(len(edges))
    if np.any(~np.isfinite(cap)) or np.any(cap < 0) or np.any(~np.isfinite(cst)) or np.any(cst < 0):
        raise GraphError("capacities and costs must be finite and >= 0")
    ncap = np.zeros(n) if node_capacity is None else np.asarray(node_capacity, dtype=float)
    ncost = np.zeros(n) if node_cost is None else np.asarray(node_cost, dtype=float)
    return NetworkGraph(nodes, edges, cap, cst, destination, ncap, ncost,
                        tuple(map(tuple, out_e)), tuple(map(tuple, in_e)))


@dataclass(frozen=True)
class ServiceChain:
    """One commodity: a chain of ``M - 1`` functions from sources to a destination."""

    name: str
    destination: str
    lifetime: int
    reliability: float
    scaling: tuple[float, ...] = ()
    workload: tuple[float, ...] = ()
    sources: tuple[str, ...] = ()

    def __post_init__(self):
        if len(self.scaling) != len(self.workload):
            raise GraphError(f"service {self.name}: scaling and workload lengths differ")
        if any(not (x > 0 and math.isfinite(x)) for x in self.scaling + self.workload):
            raise GraphError(f"service {self.name}: scaling and workload must be positive")
        if not 0 < self.reliability <= 1:
            raise GraphError(f"service {self.name}: reliability must lie in (0, 1]")
        if int(self.lifetime) != self.lifetime or self.lifetime < 1:
            raise GraphError(f"service {self.name}: lifetime must be an integer >= 1")

    @property
    def stages(self) -> int:
        """M, the number of layers (functions + 1)."""
        return len(self.scaling) + 1


def cumulative_scaling(service: ServiceChain, m: int) -> float:
    """Product of the scaling factors of functions ``1 .. m-1``."""
    if not 1 <= m <= service.stages:
        raise GraphError(f"stage {m} outside 1..{service.stages}")
    return float(math.prod(service.scaling[: m - 1]))


@dataclass(frozen=True)
class Commodity:
    name: str
    service: ServiceChain
    node_offset: int
    destination: int
    xi_final: float
    reliability: float
    lifetime: int


@dataclass(frozen=True, eq=False)
class LayeredGraph:
    """Union of the per-service layered graphs over one physical network.

    Layered node ``offset_c + (m - 1) * |V| + i`` is physical node ``i`` at
    stage ``m`` of commodity ``c``.  Resources ``0 .. |E|-1`` are physical
    links; ``|E| + i`` is the compute unit of node ``i`` (present only when
    some service has a function).
    """

    graph: NetworkGraph
    commodities: tuple[Commodity, ...]
    node_commodity: np.ndarray
    node_phys: np.ndarray
    node_stage: np.ndarray
    is_dest: np.ndarray
    beta: np.ndarray
    tail: np.ndarray
    head: np.ndarray
    edge_commodity: np.ndarray
    zeta: np.ndarray
    rho: np.ndarray
    unit_cost: np.ndarray
    resource: np.ndarray
    is_processing: np.ndarray
    resource_capacity: np.ndarray
    resource_labels: tuple[str, ...]
    max_lifetime: int
    model_mask: np.ndarray
    useful_mask: np.ndarray

    @property
    def num_nodes(self) -> int:
        return len(self.node_commodity)

    @property
    def num_edges(self) -> int:
        return len(self.tail)

    @property
    def num_resources(self) -> int:
        return len(self.resource_capacity)

    @property
    def num_commodities(self) -> int:
        return len(self.commodities)

    @property
    def shape(self) -> tuple[int, int]:
        """Shape of a flow array: (edges, lifetimes)."""
        return (self.num_edges, self.max_lifetime)

    @property
    def queue_shape(self) -> tuple[int, int]:
        return (self.num_nodes, self.max_lifetime)

    def node_label(self, i: int) -> str:
        c = self.commodities[self.node_commodity[i]]
        name = self.graph.nodes[self.node_phys[i]]
        if len(self.commodities) == 1 and c.service.stages == 1:
            return name
        return f"{c.name}:{name}@{self.node_stage[i]}"

    def edge_label(self, e: int) -> str:
        return f"{self.node_label(self.tail[e])}->{self.node_label(self.head[e])}"

    def node_of(self, commodity: int, phys: str | int, stage: int = 1) -> int:
        c = self.commodities[commodity]
        i = phys if isinstance(phys, (int, np.integer)) else self.graph.index(phys)
        if not 1 <= stage <= c.service.stages:
            raise GraphError(f"stage {stage} outside 1..{c.service.stages}")
        return c.node_offset + (stage - 1) * self.graph.num_nodes + int(i)

    def find_edge(self, tail: str, head: str, commodity: int = 0, stage: int = 1) -> int:
        """Index of the transmission edge ``tail -> head`` in one layer."""
        u = self.node_of(commodity, tail, stage)
        v = self.node_of(commodity, head, stage)
        hits = np.flatnonzero((self.tail == u) & (self.head == v))
        if len(hits) == 0:
            raise GraphError(f"no layered edge {tail}->{head}")
        return int(hits[0])

    @cached_property
    def csr(self) -> "Adjacency":
        return Adjacency.build(self)

    def resource_members(self) -> list[np.ndarray]:
        """Layered edges grouped by the physical resource they consume."""
        order = np.argsort(self.resource, kind="stable")
        bounds = np.searchsorted(self.resource[order], np.arange(self.num_resources + 1))
        return [order[bounds[r]:bounds[r + 1]] for r in range(self.num_resources)]


def _csr(keys: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(keys, kind="stable").astype(np.int64)
    ptr = np.searchsorted(keys[order], np.arange(n + 1)).astype(np.int64)
    return ptr, order


@dataclass(frozen=True)
class Adjacency:
    """CSR views used by the compiled kernels (edge lists sorted by index)."""

    out_ptr: np.ndarray
    out_edges: np.ndarray
    in_ptr: np.ndarray
    in_edges: np.ndarray
    res_ptr: np.ndarray
    res_edges: np.ndarray
    dest_of: np.ndarray
    xi_final: np.ndarray
    gamma: np.ndarray

    @classmethod
    def build(cls, net: "LayeredGraph") -> "Adjacency":
        out_ptr, out_edges = _csr(net.tail, net.num_nodes)
        in_ptr, in_edges = _csr(net.head, net.num_nodes)
        res_ptr, res_edges = _csr(net.resource, net.num_resources)
        return cls(out_ptr, out_edges, in_ptr, in_edges, res_ptr, res_edges,
                   np.array([c.destination for c in net.commodities], dtype=np.int64),
                   np.array([c.xi_final for c in net.commodities], dtype=float),
                   np.array([c.reliability for c in net.commodities], dtype=float))


def build_layered_graph(graph: NetworkGraph, service: ServiceChain,
                        prune: bool = True) -> LayeredGraph:
    """Layered graph of a single service chain."""
    return build_layered_network(graph, [service], prune=prune)


def build_layered_network(graph: NetworkGraph, services: Iterable[ServiceChain],
                          prune: bool = True) -> LayeredGraph:
    """Stack the layered graphs of all services over one physical network.

    With ``prune`` the controller mask also drops (edge, lifetime) pairs from
    which the destination cannot be reached before expiry.  The model mask,
    used for admissibility, only encodes the lifetime-1 rule and the ban on
    leaving the destination.
    """
    services = tuple(services)
    if not services:
        raise GraphError("at least one service is required")
    nv, ne = graph.num_nodes, graph.num_edges
    with_compute = any(s.stages > 1 for s in services)
    n_res = ne + (nv if with_compute else 0)

    commodities = []
    node_comm, node_phys, node_stage, beta = [], [], [], []
    tail, head, ecomm, zeta, rho, cost, res, proc = [], [], [], [], [], [], [], []
    offset = 0
    for c, svc in enumerate(services):
        if svc.stages < 1:
            raise GraphError("service needs at least one stage")
        d = graph.index(svc.destination)
        M = svc.stages
        for m in range(1, M + 1):
            xi = cumulative_scaling(svc, m)
            for i in range(nv):
                node_comm.append(c)
                node_phys.append(i)
                node_stage.append(m)
                beta.append(1.0 / xi)
        for m in range(M):
            base = offset + m * nv
            for k, (u, v) in enumerate(graph.edges):
                tail.append(base + u)
                head.append(base + v)
                ecomm.append(c)
                zeta.append(1.0)
                rho.append(1.0)
                cost.append(graph.cost[k])
                res.append(k)
                proc.append(False)
        for m in range(M - 1):
            base = offset + m * nv
            for i in range(nv):
                tail.append(base + i)
                head.append(base + nv + i)
                ecomm.append(c)
                zeta.append(svc.scaling[m])
                rho.append(svc.workload[m])
                cost.append(graph.node_cost[i])
                res.append(ne + i)
                proc.append(True)
        commodities.append(Commodity(
            name=svc.name, service=svc, node_offset=offset,
            destination=offset + (M - 1) * nv + d,
            xi_final=cumulative_scaling(svc, M), reliability=svc.reliability,
            lifetime=int(svc.lifetime)))
        offset += M * nv

    N = offset
    is_dest = np.zeros(N, dtype=bool)
    for c in commodities:
        is_dest[c.destination] = True
    tail_a = np.asarray(tail, dtype=np.int64)
    head_a = np.asarray(head, dtype=np.int64)
    ecomm_a = np.asarray(ecomm, dtype=np.int64)
    L = max(int(s.lifetime) for s in services)

    cap = np.concatenate([graph.capacity, graph.node_capacity if with_compute else []])
    labels = [f"{graph.nodes[u]}->{graph.nodes[v]}" for u, v in graph.edges]
    if with_compute:
        labels += [f"cpu:{n}" for n in graph.nodes]

    E = len(tail_a)
    model = np.ones((E, L), dtype=bool)
    dest_head = is_dest[head_a]
    model[~dest_head, 0] = False
    model[is_dest[tail_a], :] = False
    for e in range(E):
        model[e, commodities[ecomm_a[e]].lifetime:] = False

    useful = model.copy()
    if prune:
        dist = np.full(N, np.inf)
        for c in commodities:
            lo, hi = c.node_offset, c.node_offset + c.service.stages * nv
            sub = [(int(t) - lo, int(h) - lo) for t, h in zip(tail_a, head_a) if lo <= t < hi]
            dist[lo:hi] = _bfs_to(c.destination - lo, hi - lo, sub)
        lifetimes = np.arange(1, L + 1)
        reach = dist[head_a][:, None] <= (lifetimes[None, :] - 1)
        useful &= reach | dest_head[:, None]

    return LayeredGraph(
        graph=graph, commodities=tuple(commodities),
        node_commodity=np.asarray(node_comm, dtype=np.int64),
        node_phys=np.asarray(node_phys, dtype=np.int64),
        node_stage=np.asarray(node_stage, dtype=np.int64),
        is_dest=is_dest, beta=np.asarray(beta, dtype=float),
        tail=tail_a, head=head_a, edge_commodity=ecomm_a,
        zeta=np.asarray(zeta, dtype=float), rho=np.asarray(rho, dtype=float),
        unit_cost=np.asarray(cost, dtype=float), resource=np.asarray(res, dtype=np.int64),
        is_processing=np.asarray(proc, dtype=bool),
        resource_capacity=np.asarray(cap, dtype=float), resource_labels=tuple(labels),
        max_lifetime=L, model_mask=model, useful_mask=useful)


def single_commodity(graph: NetworkGraph, lifetime: int, reliability: float,
                     destination: str | None = None, prune: bool = True) -> LayeredGraph:
    """One-layer layered graph for plain deadline-constrained routing."""
    if destination is None:
        if graph.destination is None:
            raise GraphError("destination missing")
        destination = graph.nodes[graph.destination]
    svc = ServiceChain(name="flow", destination=str(destination), lifetime=lifetime,
                       reliability=reliability)
    return build_layered_network(graph, [svc], prune=prune)


def shortest_hops(graph: NetworkGraph, source: str, destination: str) -> int:
    dist = graph.hop_distance(graph.index(destination))[graph.index(source)]
    if not np.isfinite(dist):
        raise GraphError(f"{destination} unreachable from {source}")
    return int(dist)
