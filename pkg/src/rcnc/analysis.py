"""Offline oracles and a comparison baseline.

The stability LP asks for the largest scaling ``theta`` of an arrival-rate
direction that some stationary flow assignment can serve at the required
reliability, under lifetime-aware flow conservation and capacity limits.
The same constraints with ``theta = 1`` and a cost objective give the
least average cost any policy can reach.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .lp import OPTIMAL, UNBOUNDED, LpProblem, solve_lp
from .network import LayeredGraph


@dataclass
class StabilityQuery:
    """Arrival-rate direction ``lam[node, col]`` on a layered graph.

    ``gamma`` overrides the per-commodity reliability levels of the graph;
    lifetimes beyond ``lifetime`` (default: the graph's) are unusable.
    """

    net: LayeredGraph
    lam: np.ndarray
    gamma: np.ndarray | None = None
    lifetime: int | None = None

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=float)
        if self.lam.shape != self.net.queue_shape:
            raise ValueError(f"lam must have shape {self.net.queue_shape}")
        if np.any(self.lam < 0) or not np.any(self.lam > 0):
            raise ValueError("lam must be nonnegative and not all zero")
        g = self.net.csr.gamma if self.gamma is None else np.broadcast_to(
            np.asarray(self.gamma, dtype=float), (self.net.num_commodities,))
        if np.any(g < 0) or np.any(g > 1):
            raise ValueError("gamma must lie in [0, 1]")
        self.gamma = np.array(g, dtype=float)

    def mask(self) -> np.ndarray:
        m = self.net.model_mask.copy()
        if self.lifetime is not None:
            m[:, self.lifetime:] = False
        return m

    def norm(self) -> np.ndarray:
        """Per-commodity l1 norm of ``lam`` in input units."""
        per_node = self.lam.sum(axis=1) * self.net.beta
        return np.bincount(self.net.node_commodity, weights=per_node,
                           minlength=self.net.num_commodities)


@dataclass
class FlowAssignment:
    """Result of a region or cost LP."""

    status: str
    theta: float
    cost: float
    x: np.ndarray  # (edges, lifetimes)
    residual: float

    def edge_totals(self) -> np.ndarray:
        return self.x.sum(axis=1)


def _constraints(q: StabilityQuery, with_theta: bool):
    """Rows of the region LP over variables ``x[pairs]`` (+ ``theta`` last)."""
    net = q.net
    mask = q.mask()
    pairs = np.argwhere(mask)
    P = len(pairs)
    n = P + (1 if with_theta else 0)
    L = net.max_lifetime
    pid = -np.ones(mask.shape, dtype=np.int64)
    pid[pairs[:, 0], pairs[:, 1]] = np.arange(P)
    rows, rhs, labels = [], [], []
    norm = q.norm()
    # reliability: (1 / Xi) * zeta-weighted inflow at the destination >= gamma * theta * |lam|
    for c, com in enumerate(net.commodities):
        row = np.zeros(n)
        for e in np.flatnonzero(net.head == com.destination):
            for k in range(L):
                if pid[e, k] >= 0:
                    row[pid[e, k]] = -net.zeta[e] / com.xi_final
        target = q.gamma[c] * norm[c]
        if with_theta:
            row[-1] = target
            rows.append(row)
            rhs.append(0.0)
        else:
            rows.append(row)
            rhs.append(-target)
        labels.append(f"reliability[{com.name}]")
    # capacity per physical resource
    for r, edges in enumerate(net.resource_members()):
        row = np.zeros(n)
        for e in edges:
            for k in range(L):
                if pid[e, k] >= 0:
                    row[pid[e, k]] = net.rho[e]
        if row.any():
            rows.append(row)
            rhs.append(net.resource_capacity[r])
            labels.append(f"capacity[{net.resource_labels[r]}]")
    # lifetime conservation: out^(>=l) <= zeta * in^(>=l+1) + theta * lam^(>=l)
    g = net.csr
    for i in range(net.num_nodes):
        if net.is_dest[i]:
            continue
        outs = g.out_edges[g.out_ptr[i]:g.out_ptr[i + 1]]
        ins = g.in_edges[g.in_ptr[i]:g.in_ptr[i + 1]]
        for k in range(L):
            row = np.zeros(n)
            for e in outs:
                for kk in range(k, L):
                    if pid[e, kk] >= 0:
                        row[pid[e, kk]] += 1.0
            if not row.any():
                continue
            for e in ins:
                for kk in range(k + 1, L):
                    if pid[e, kk] >= 0:
                        row[pid[e, kk]] -= net.zeta[e]
            supply = q.lam[i, k:].sum()
            if with_theta:
                row[-1] = -supply
                rhs.append(0.0)
            else:
                rhs.append(supply)
            rows.append(row)
            labels.append(f"conservation[{net.node_label(i)},l={k + 1}]")
    A = np.array(rows).reshape(-1, n)
    return pairs, A, np.array(rhs), labels


def stability_margin_lp(q: StabilityQuery, backend: str = "simplex") -> FlowAssignment:
    """Largest ``theta`` such that ``theta * lam`` is supportable (``inf`` if unbounded)."""
    pairs, A, b, labels = _constraints(q, with_theta=True)
    n = A.shape[1]
    c = np.zeros(n)
    c[-1] = 1.0
    sol = solve_lp(LpProblem(c=c, A=A, b=b, sense="max", row_labels=labels), backend=backend)
    x = np.zeros(q.net.shape)
    if sol.status == UNBOUNDED:
        return FlowAssignment(UNBOUNDED, float("inf"), float("nan"), x, float("nan"))
    if sol.status != OPTIMAL:
        raise RuntimeError(f"region LP failed: {sol.status}")
    x[pairs[:, 0], pairs[:, 1]] = sol.x[:-1]
    cost = float((q.net.unit_cost * q.net.rho) @ x.sum(axis=1))
    return FlowAssignment(OPTIMAL, float(sol.x[-1]), cost, x, sol.residual)


def min_cost_flow_lp(q: StabilityQuery, backend: str = "simplex") -> FlowAssignment:
    """Least-cost stationary flow serving ``lam`` at the required reliability."""
    net = q.net
    pairs, A, b, labels = _constraints(q, with_theta=False)
    unit = (net.unit_cost * net.rho)[pairs[:, 0]]
    sol = solve_lp(LpProblem(c=unit, A=A, b=b, sense="min", row_labels=labels), backend=backend)
    x = np.zeros(net.shape)
    if sol.status != OPTIMAL:
        return FlowAssignment(sol.status, 1.0, float("nan"), x, float("nan"))
    x[pairs[:, 0], pairs[:, 1]] = sol.x
    return FlowAssignment(OPTIMAL, 1.0, float(sol.objective), x, sol.residual)


def epsilon_convergence_time(delivered: np.ndarray, gamma: float, norm: float,
                             eps: float) -> int | None:
    """First ``tau`` after which the running-average shortfall stays within ``eps``.

    ``delivered[t]`` is the amount delivered in slot ``t``; the running
    average at ``s`` covers slots ``0 .. s-1``.  Returns ``None`` when the
    condition does not hold at the end of the trace.
    """
    d = np.asarray(delivered, dtype=float)
    if d.size == 0:
        return None
    s = np.arange(1, d.size + 1)
    gap = gamma * norm - np.cumsum(d) / s
    bad = np.flatnonzero(gap > eps)
    if bad.size == 0:
        return 1
    last = int(bad[-1]) + 1  # running-average index s of the last violation
    if last >= d.size:
        return None
    return last + 1


class BackpressurePolicy:
    """Deadline-blind drift-plus-penalty routing over total backlogs.

    Each resource goes to the edge maximizing
    ``(B_tail - zeta * B_head) / rho - V * e`` where ``B`` sums a node's queue
    over lifetimes (zero at destinations).  The winner is served newest packets
    first, i.e. from the highest lifetime down.
    """

    def __init__(self, V: float, integer: bool = True):
        self.V = float(V)
        self.integer = integer

    def reset(self, net, spec, seed):
        self.net = net
        self.members = net.resource_members()

    def decide(self, Q, t):
        net = self.net
        B = Q.sum(axis=1)
        B[net.is_dest] = 0.0
        w = (B[net.tail] - net.zeta * B[net.head]) / net.rho - self.V * net.unit_cost
        usable = net.model_mask.any(axis=1)
        x = np.zeros(net.shape)
        left = Q.copy()
        L = net.max_lifetime
        for r, edges in enumerate(self.members):
            cand = [e for e in edges if usable[e]]
            if not cand:
                continue
            e = max(cand, key=lambda j: (w[j], -j))
            if w[e] <= 0:
                continue
            budget = net.resource_capacity[r] / net.rho[e]
            if self.integer:
                budget = np.floor(budget + 1e-9)
            u = net.tail[e]
            for k in range(L - 1, -1, -1):
                if budget <= 0:
                    break
                if not net.model_mask[e, k]:
                    continue
                send = min(left[u, k], budget)
                if send > 0:
                    x[e, k] = send
                    left[u, k] -= send
                    budget -= send
        return x

    def observe(self, a, x, t):
        pass


def baseline_backpressure_policy(net: LayeredGraph, V: float, integer: bool = True):
    return BackpressurePolicy(V, integer)


def write_assignment_csv(path: str | Path, result: FlowAssignment, net: LayeredGraph) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["theta", "cost", "edge", "lifetime", "flow"])
        for e in range(net.num_edges):
            for k in range(net.max_lifetime):
                if result.x[e, k] != 0:
                    w.writerow([format(result.theta, ".12g"), format(result.cost, ".12g"),
                                net.edge_label(e), k + 1, format(result.x[e, k], ".12g")])
