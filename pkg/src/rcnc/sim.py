"""Slot-level simulator for lifetime queues.

One slot has two phases.  Nodes first transmit the flow chosen by the policy;
then every queue ages by one slot, receives inflow and fresh arrivals, loses
whatever reached lifetime 0, and the destination consumes its inflow.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from . import _kernels as K
from .network import LayeredGraph
from .traffic import BLOCK, ArrivalSpec, ArrivalStream, TraceExhausted, mean_rate

MODES = ("peak", "average")
NUMERIC = ("integer", "fluid")

_REASONS = {
    K.NEGATIVE: "negative flow",
    K.MASKED: "forbidden (edge, lifetime) pair",
    K.AVAILABILITY: "availability",
    K.CAPACITY: "peak capacity",
    K.NON_INTEGER: "non-integer flow in integer mode",
    K.NON_FINITE: "non-finite flow",
}


class InadmissibleFlow(RuntimeError):
    def __init__(self, report: "Violation", slot: int | None = None):
        self.report = report
        self.slot = slot
        where = "" if slot is None else f"slot {slot}: "
        super().__init__(where + str(report))


@dataclass(frozen=True)
class Violation:
    kind: str
    where: str
    amount: float
    limit: float

    def __str__(self) -> str:
        return f"{self.kind} violated at {self.where}: {self.amount:g} (limit {self.limit:g})"


def check_admissible(Q: np.ndarray, x: np.ndarray, net: LayeredGraph, mode: str = "peak",
                     integer: bool = False, tol: float = 1e-9) -> Violation | None:
    """Return the first violated constraint, or ``None`` when ``x`` is admissible."""
    g = net.csr
    code, idx, k, amount, limit = K.admissible(
        Q, x, net.tail, net.model_mask, net.rho, g.res_ptr, g.res_edges,
        net.resource_capacity, mode == "peak", integer, tol)
    if code == K.OK:
        return None
    if code == K.AVAILABILITY:
        where = f"node {net.node_label(idx)}, l={k + 1}"
    elif code == K.CAPACITY:
        where = f"resource {net.resource_labels[idx]}"
    else:
        where = f"edge {net.edge_label(idx)}, l={k + 1}"
    return Violation(_REASONS[code], where, float(amount), float(limit))


class Policy(Protocol):
    def reset(self, net: LayeredGraph, spec: ArrivalSpec, seed: int) -> None: ...

    def decide(self, Q: np.ndarray, t: int) -> np.ndarray: ...

    def observe(self, a: np.ndarray, x: np.ndarray, t: int) -> None: ...


class ZeroPolicy:
    """Never transmits."""

    def reset(self, net, spec, seed):
        self._x = np.zeros(net.shape)

    def decide(self, Q, t):
        return self._x

    def observe(self, a, x, t):
        pass


class GreedyPolicy:
    """Send each queue, highest lifetime first, on its first usable edge up to capacity."""

    def reset(self, net, spec, seed):
        self.net = net
        self._members = net.resource_members()

    def decide(self, Q, t):
        net = self.net
        x = np.zeros(net.shape)
        left = Q.copy()
        for r, edges in enumerate(self._members):
            budget = net.resource_capacity[r]
            for e in edges:
                for k in range(net.max_lifetime - 1, -1, -1):
                    if budget <= 0 or not net.useful_mask[e, k]:
                        continue
                    send = min(left[net.tail[e], k], budget / net.rho[e])
                    if send > 0:
                        x[e, k] += send
                        left[net.tail[e], k] -= send
                        budget -= send * net.rho[e]
        return x

    def observe(self, a, x, t):
        pass


@dataclass
class MetricsTrace:
    """Per-slot records; rows are slots, columns are commodities."""

    arrivals: np.ndarray
    delivered: np.ndarray
    dropped: np.ndarray
    cost: np.ndarray
    flow_sum: np.ndarray
    norm: np.ndarray
    gamma: np.ndarray
    names: tuple[str, ...]
    final_queue: np.ndarray
    flows: np.ndarray | None = None
    node_arrivals: np.ndarray | None = None
    checks: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return self.delivered.shape[0]

    @property
    def mean_flow(self) -> np.ndarray:
        return self.flow_sum / self.horizon

    def reliability_gap(self) -> np.ndarray:
        """Target minus running-average delivered rate, per slot and commodity."""
        t = np.arange(1, self.horizon + 1)[:, None]
        return self.gamma * self.norm - np.cumsum(self.delivered, axis=0) / t

    def aligned_reliability(self, lag: int = 1) -> np.ndarray:
        """Delivered in slots ``lag..T-1`` over arrivals in slots ``0..T-1-lag``.

        Arrivals join the queues one slot after they occur, so with lifetime
        1 every packet's fate is settled exactly one slot later and ``lag=1``
        measures the fraction of a window's arrivals that got through.
        """
        if not 0 <= lag < self.horizon:
            raise ValueError("lag must lie in 0..T-1")
        arr = self.arrivals[: self.horizon - lag].sum(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.delivered[lag:].sum(axis=0) / arr

    def to_csv(self, path: str | Path) -> None:
        gap = self.reliability_gap()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["slot", "commodity", "arrivals", "delivered", "dropped", "cost",
                        "reliability_gap"])
            for t in range(self.horizon):
                for c, name in enumerate(self.names):
                    w.writerow([t, name, _num(self.arrivals[t, c]), _num(self.delivered[t, c]),
                                _num(self.dropped[t, c]), _num(self.cost[t, c]), _num(gap[t, c])])


def _num(v: float) -> str:
    return format(float(v), ".12g")


def step_slot(Q: np.ndarray, x: np.ndarray, a: np.ndarray, net: LayeredGraph):
    """Apply one slot of the queue dynamics.

    Returns ``(Q_next, record)``; ``record`` holds per-commodity delivered,
    dropped and cost, plus the raw totals used for mass balance.
    """
    C = net.num_commodities
    Qn = np.empty_like(Q)
    delivered, dropped, cost = np.zeros(C), np.zeros(C), np.zeros(C)
    raw_del, raw_drop, gain = K.step(
        Q, x, a, net.tail, net.head, net.zeta, net.beta, net.is_dest, net.node_commodity,
        net.edge_commodity, net.unit_cost, net.rho, Qn, delivered, dropped, cost)
    return Qn, {"delivered": delivered, "dropped": dropped, "cost": cost,
                "raw_delivered": raw_del, "raw_dropped": raw_drop, "gain": gain}


@dataclass
class SlotLog:
    """Output buffers for a block of slots, filled in place."""

    delivered: np.ndarray
    dropped: np.ndarray
    cost: np.ndarray
    arrivals: np.ndarray
    flow_sum: np.ndarray
    flows: np.ndarray
    record: bool
    stats: np.ndarray  # virtual cost, balance error, backlog, failure report


def run_simulation(net: LayeredGraph, spec: ArrivalSpec, policy: Policy, horizon: int,
                   seed: int = 0, mode: str = "peak", numeric: str = "integer",
                   check: bool = True, record_flows: bool = False) -> MetricsTrace:
    """Run ``policy`` for ``horizon`` slots from empty queues.

    With ``check`` every emitted flow is tested for admissibility (the run
    stops with :class:`InadmissibleFlow` on the first violation) and the
    per-slot mass balance is verified.  Policies that provide ``run_block``
    advance a whole block of slots in compiled code with the same semantics.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if numeric not in NUMERIC:
        raise ValueError(f"numeric must be one of {NUMERIC}")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    integer = numeric == "integer"
    peak = mode == "peak"
    g = net.csr
    N, L = net.queue_shape
    C = net.num_commodities
    _, norm = mean_rate(spec)
    ent_node = np.array([e.node for e in spec.entries], dtype=np.int64)
    ent_col = np.array([e.lifetime - 1 for e in spec.entries], dtype=np.int64)

    stream = ArrivalStream(spec, seed)
    policy.reset(net, spec, seed)
    fused = getattr(policy, "run_block", None)

    arrivals = np.zeros((horizon, C))
    delivered = np.zeros((horizon, C))
    dropped = np.zeros((horizon, C))
    cost = np.zeros((horizon, C))
    flow_sum = np.zeros(net.shape)
    flows = np.zeros((horizon,) + net.shape) if record_flows else None
    node_arr = np.zeros((horizon, N, L)) if record_flows else None
    stats = np.zeros(9)
    no_flows = np.zeros((0,) + net.shape)

    Q = np.zeros((N, L))
    Qn = np.empty_like(Q)
    for b in range((horizon + BLOCK - 1) // BLOCK):
        t0 = b * BLOCK
        n = min(BLOCK, horizon - t0)
        rows = stream.block(b)[:n]
        bad = np.isnan(rows).any(axis=1)
        if bad.any():
            raise TraceExhausted(f"arrival trace exhausted at slot {t0 + int(np.argmax(bad))}")
        dense = np.zeros((n, N, L))
        for j in range(len(ent_node)):
            dense[:, ent_node[j], ent_col[j]] += rows[:, j]
        if record_flows:
            node_arr[t0:t0 + n] = dense
        sl = slice(t0, t0 + n)
        log = SlotLog(delivered[sl], dropped[sl], cost[sl], arrivals[sl], flow_sum,
                      flows[sl] if record_flows else no_flows, record_flows, stats)
        if fused is not None:
            done = fused(Q, Qn, dense, log, check, peak, integer)
            if done < n:
                raise InadmissibleFlow(_report(stats, net), slot=int(stats[4]))
            continue
        for j in range(n):
            t = t0 + j
            a = dense[j]
            x = policy.decide(Q, t)
            if check:
                v = check_admissible(Q, x, net, mode, integer)
                if v is not None:
                    raise InadmissibleFlow(v, slot=t)
            raw_del, raw_drop, gain = K.step(
                Q, x, a, net.tail, net.head, net.zeta, net.beta, net.is_dest,
                net.node_commodity, net.edge_commodity, net.unit_cost, net.rho, Qn,
                log.delivered[j], log.dropped[j], log.cost[j])
            K.commodity_totals(a, net.beta, net.node_commodity, log.arrivals[j])
            if check:
                expect = Q.sum() + a.sum() + gain - raw_del - raw_drop
                stats[1] = max(stats[1], abs(Qn.sum() - expect))
            flow_sum += x
            if record_flows:
                log.flows[j] = x
            policy.observe(a, x, t)
            Q, Qn = Qn, Q
            if check:
                stats[2] = max(stats[2], Q.sum())

    return MetricsTrace(
        arrivals=arrivals, delivered=delivered, dropped=dropped, cost=cost,
        flow_sum=flow_sum, norm=norm, gamma=g.gamma.copy(),
        names=tuple(c.name for c in net.commodities), final_queue=Q.copy(),
        flows=flows, node_arrivals=node_arr,
        checks={"mass_balance_error": float(stats[1]), "max_backlog": float(stats[2]),
                "checked": check})


def _report(stats: np.ndarray, net: LayeredGraph) -> Violation:
    code, idx, k = int(stats[3]), int(stats[5]), int(stats[6])
    if code == K.AVAILABILITY:
        where = f"node {net.node_label(idx)}, l={k + 1}"
    elif code == K.CAPACITY:
        where = f"resource {net.resource_labels[idx]}"
    else:
        where = f"edge {net.edge_label(idx)}, l={k + 1}"
    return Violation(_REASONS[code], where, float(stats[7]), float(stats[8]))


@dataclass(frozen=True)
class CommoditySummary:
    name: str
    timely_throughput: float
    target: float
    reliability_ratio: float
    achieved_reliability: float
    meets_target: bool
    cost: float
    drop_rate: float
    final_gap: float


def compute_metrics(trace: MetricsTrace, burn_in: int = 0, eps: float = 0.0) -> list[CommoditySummary]:
    """Per-commodity averages over slots ``burn_in .. T-1``."""
    if trace.horizon == 0:
        raise ValueError("empty trace")
    sl = slice(burn_in, None)
    gap = trace.reliability_gap()[-1]
    out = []
    for c, name in enumerate(trace.names):
        thr = float(trace.delivered[sl, c].mean())
        target = float(trace.gamma[c] * trace.norm[c])
        norm = float(trace.norm[c])
        out.append(CommoditySummary(
            name=name, timely_throughput=thr, target=target,
            reliability_ratio=thr / target if target > 0 else float("inf"),
            achieved_reliability=thr / norm if norm > 0 else float("nan"),
            meets_target=thr >= target - eps,
            cost=float(trace.cost[sl, c].mean()),
            drop_rate=float(trace.dropped[sl, c].mean()),
            final_gap=float(gap[c])))
    return out


def total_cost(trace: MetricsTrace, burn_in: int = 0) -> float:
    return float(trace.cost[burn_in:].sum(axis=1).mean())


def telescoping_violation(trace: MetricsTrace, net: LayeredGraph) -> float:
    """Largest violation of the finite-horizon queue bound on a recorded trace.

    For every non-destination node, lifetime ``l`` and horizon ``T``::

        Q^(>=l+1)(T) <= sum_{t<T} [in^(>=l+1)(t) + a^(>=l)(t)]
                        - sum_{t<T} [out^(l)(t+1) + out^(>=l+1)(t)]

    Needs ``record_flows=True``.  Queues are rebuilt from the recorded flows.
    """
    if trace.flows is None:
        raise ValueError("trace was recorded without flows")
    T, N, L = trace.node_arrivals.shape
    flows = trace.flows
    out = np.zeros((T, N, L))
    inn = np.zeros((T, N, L))
    for e in range(net.num_edges):
        out[:, net.tail[e], :] += flows[:, e, :]
        inn[:, net.head[e], :] += net.zeta[e] * flows[:, e, :]
    a = trace.node_arrivals
    # rebuild Q(t) for t = 0..T
    Q = np.zeros((T + 1, N, L))
    for t in range(T):
        Q[t + 1, :, :-1] = Q[t, :, 1:] - out[t, :, 1:] + inn[t, :, 1:] + a[t, :, :-1]
        Q[t + 1, :, -1] = a[t, :, -1]
        Q[t + 1, net.is_dest] = 0.0

    worst = -np.inf
    keep = ~net.is_dest
    zero = np.zeros((T, N))
    for l in range(L):  # bound for lifetime l; l = 0 has no out^(l) term
        q = Q[:, :, l:].sum(-1)
        inn_g = inn[:, :, l:].sum(-1)
        a_g = a[:, :, max(l - 1, 0):].sum(-1)
        out_g = out[:, :, l:].sum(-1)
        out_l = out[:, :, l - 1] if l >= 1 else zero
        rhs = np.cumsum(inn_g[:-1] + a_g[:-1] - out_g[:-1] - out_l[1:], axis=0)
        if len(rhs):
            worst = max(worst, float((q[1:T] - rhs)[:, keep].max()))
    return worst
