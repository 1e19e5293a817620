"""Peak-capacity control by request-queue flow matching.

The virtual controller plans a flow each slot on a network whose link
capacities ``C(k)`` are revised once per frame of ``K`` slots.  Signed request
queues ``R`` accumulate the gap between the running-average virtual flow and
the flow actually sent.  The actual flow is the first column of an ``n``-slot
look-ahead LP that pushes against ``R`` while respecting peak capacities and
the packets that will really be available.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .lp import OPTIMAL, LpProblem, solve_lp, solve_standard
from .network import LayeredGraph
from .virtual import VirtualController


class SolverFailure(RuntimeError):
    pass


def delay_matrix(L: int) -> np.ndarray:
    """``L x L`` shift taking lifetime ``l+1`` to ``l`` (nilpotent, ``D^L = 0``)."""
    return np.eye(L, k=1)


def delay_propagate(D: np.ndarray, X: np.ndarray, tau: int) -> np.ndarray:
    """``sum_{s<=tau} D^(tau-s) X[:, s]``: columns aged to slot ``tau``."""
    L = D.shape[0]
    if D.shape != (L, L) or X.shape[0] != L:
        raise ValueError("dimension mismatch between D and X")
    if not 0 <= tau < X.shape[1]:
        raise ValueError(f"tau={tau} needs at least {tau + 1} columns")
    out = np.zeros(L)
    for s in range(tau + 1):
        out += np.linalg.matrix_power(D, tau - s) @ X[:, s]
    return out


def update_request_queues(R: np.ndarray, nu_bar: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """Signed update ``R + nu_bar - mu`` (no clipping)."""
    return R + nu_bar - mu


class FlowMatchingLP:
    """Constraint structure of the look-ahead LP, built once and refilled per slot.

    Variables are ``M[p, tau]`` for (edge, lifetime) pairs ``p`` of the edges
    leaving ``scope`` nodes and look-ahead slots ``tau < n``.  Rows are peak
    capacity per resource and slot, and availability per (node, lifetime,
    slot): what a node plans to send by slot ``tau`` cannot exceed its queue
    plus expected arrivals and inflow, each aged to that slot.  When
    ``coupled`` is false, neighbour inflow enters the right-hand side as an
    estimate instead of as variables.
    """

    def __init__(self, net: LayeredGraph, n: int, scope: np.ndarray | None = None,
                 coupled: bool = True):
        if n < 1:
            raise ValueError("look-ahead n must be >= 1")
        self.net, self.n = net, n
        N, L = net.queue_shape
        nodes = np.arange(N) if scope is None else np.asarray(scope)
        in_scope = np.zeros(N, dtype=bool)
        in_scope[nodes] = True
        mask = net.useful_mask & in_scope[net.tail][:, None]
        self.pairs = np.argwhere(mask)  # (edge, col), row-major: sorted by edge then lifetime
        P = len(self.pairs)
        pid = -np.ones((net.num_edges, L), dtype=np.int64)
        pid[self.pairs[:, 0], self.pairs[:, 1]] = np.arange(P)
        self.num_vars = P * n
        var = lambda p, tau: tau * P + p  # noqa: E731

        rows, rhs_cap, q_terms, l_terms, labels = [], [], [], [], []
        members = net.resource_members()
        for tau in range(n):
            for r, edges in enumerate(members):
                coeffs = {}
                for e in edges:
                    for k in range(L):
                        if pid[e, k] >= 0:
                            coeffs[var(pid[e, k], tau)] = net.rho[e]
                if coeffs:
                    rows.append(coeffs)
                    rhs_cap.append(r)
                    q_terms.append(-1)
                    l_terms.append(())
                    labels.append(f"cap[{net.resource_labels[r]},t+{tau}]")
        g = net.csr
        for i in nodes:
            if net.is_dest[i]:
                continue
            outs = g.out_edges[g.out_ptr[i]:g.out_ptr[i + 1]]
            ins = g.in_edges[g.in_ptr[i]:g.in_ptr[i + 1]]
            for tau in range(n):
                for k in range(L):
                    coeffs = {}
                    for s in range(tau + 1):
                        col = k + tau - s
                        if col >= L:
                            continue
                        for e in outs:
                            if pid[e, col] >= 0:
                                coeffs[var(pid[e, col], s)] = 1.0
                    if not coeffs:
                        continue
                    if coupled:
                        for s in range(tau):
                            col = k + tau - s
                            if col >= L:
                                continue
                            for e in ins:
                                if pid[e, col] >= 0:
                                    v = var(pid[e, col], s)
                                    coeffs[v] = coeffs.get(v, 0.0) - net.zeta[e]
                    rows.append(coeffs)
                    rhs_cap.append(-1)
                    q_terms.append(i * L + (k + tau) if k + tau < L else -1)
                    # expected arrivals of slots 1..tau, aged to slot tau
                    l_terms.append(tuple(i * L + (k + tau - s) for s in range(1, tau + 1)
                                         if k + tau - s < L))
                    labels.append(f"avail[{net.node_label(i)},l={k + 1},t+{tau}]")

        m = len(rows)
        self.A = np.zeros((m, self.num_vars))
        for r, coeffs in enumerate(rows):
            for v, a in coeffs.items():
                self.A[r, v] = a
        self.row_labels = labels
        self.cap_res = np.asarray(rhs_cap, dtype=np.int64)
        self.Gq = np.zeros((m, N * L))
        self.Gl = np.zeros((m, N * L))
        for r in range(m):
            if q_terms[r] >= 0:
                self.Gq[r, q_terms[r]] = 1.0
            for j in l_terms[r]:
                self.Gl[r, j] += 1.0
        self._is_cap = self.cap_res >= 0
        self.positive = self.A > 0

    def var_labels(self) -> list[str]:
        P = len(self.pairs)
        return [f"M[{self.net.edge_label(e)},l={k + 1},t+{tau}]"
                for tau in range(self.n) for e, k in self.pairs[:P]]

    def objective(self, R: np.ndarray) -> np.ndarray:
        return np.tile(R[self.pairs[:, 0], self.pairs[:, 1]], self.n)

    def rhs(self, Q: np.ndarray, lam: np.ndarray, capacity: np.ndarray) -> np.ndarray:
        b = self.Gq @ Q.ravel() + self.Gl @ lam.ravel()
        b[self._is_cap] = capacity[self.cap_res[self._is_cap]]
        return b

    def problem(self, R, Q, lam, capacity) -> LpProblem:
        return LpProblem(c=self.objective(R), A=self.A, b=self.rhs(Q, lam, capacity), sense="max",
                         var_labels=self.var_labels(), row_labels=list(self.row_labels))

    def solve(self, R, Q, lam, capacity, prune: bool = False, backend: str = "simplex"):
        """First planned column as an (edge, lifetime) array, plus the LP residual.

        ``prune`` drops variables with nonpositive objective, which loses
        nothing when ``n = 1`` (every row is then a packing constraint).
        """
        c = self.objective(R)
        b = self.rhs(Q, lam, capacity)
        A = self.A
        cols = None
        if prune:
            cols = np.flatnonzero(c > 0)
            if cols.size == 0:
                return np.zeros(self.net.shape), 0.0
            keep = self.positive[:, cols].any(axis=1)
            A = A[np.ix_(keep, cols)]
            b = b[keep]
            c = c[cols]
        if backend == "simplex":
            status, y, _ = solve_standard(A, b, c)
        else:
            sol = solve_lp(LpProblem(c=c, A=A, b=b), backend=backend)
            status, y = sol.status, sol.x
        if status != OPTIMAL:
            raise SolverFailure(f"flow-matching LP returned {status}")
        resid = float(np.max(A @ y - b, initial=0.0))
        full = np.zeros(self.num_vars)
        if cols is None:
            full[:] = y
        else:
            full[cols] = y
        mu = np.zeros(self.net.shape)
        P = len(self.pairs)
        mu[self.pairs[:, 0], self.pairs[:, 1]] = full[:P]
        return mu, resid


def assemble_flow_matching_lp(net: LayeredGraph, R: np.ndarray, Q: np.ndarray,
                              lam_hat: np.ndarray, capacity: np.ndarray, n: int,
                              mode: str = "centralized",
                              u_hat: np.ndarray | None = None) -> list[LpProblem]:
    """The look-ahead LP, or one LP per physical node in distributed mode."""
    if mode == "centralized":
        return [FlowMatchingLP(net, n).problem(R, Q, lam_hat, capacity)]
    if mode != "distributed":
        raise ValueError(f"unknown mode {mode!r}")
    lam = expected_supply(net, lam_hat, np.zeros(net.shape) if u_hat is None else u_hat)
    out = []
    for p in range(net.graph.num_nodes):
        scope = np.flatnonzero(net.node_phys == p)
        out.append(FlowMatchingLP(net, n, scope, coupled=False).problem(R, Q, lam, capacity))
    return out


def expected_supply(net: LayeredGraph, lam_hat: np.ndarray, u_hat: np.ndarray) -> np.ndarray:
    """Per-slot expected new packets at each (node, lifetime): arrivals plus aged inflow."""
    inflow = np.zeros(net.queue_shape)
    np.add.at(inflow, net.head, net.zeta[:, None] * u_hat)
    sup = lam_hat.copy()
    sup[:, :-1] += inflow[:, 1:]
    return sup


def repair(mu: np.ndarray, Q: np.ndarray, net: LayeredGraph, capacity: np.ndarray,
           integer: bool) -> np.ndarray:
    """Clip solver noise so the flow is exactly admissible.

    Each (node, lifetime) outflow group is scaled down to its queue, then
    each resource group to its capacity.  Integer mode rounds down and hands
    out the remaining units by largest fractional part while both limits hold.
    """
    mu = np.where(mu > 0, mu, 0.0)
    mu[~net.model_mask] = 0.0
    Q = np.maximum(Q, 0.0)  # fluid round-off can leave tiny negatives
    out = np.zeros(net.queue_shape)
    np.add.at(out, net.tail, mu)
    f = np.divide(Q, out, out=np.ones_like(out), where=out > Q)
    mu *= f[net.tail]
    used = np.bincount(net.resource, weights=net.rho * mu.sum(axis=1), minlength=net.num_resources)
    g = np.divide(capacity, used, out=np.ones_like(used), where=used > capacity)
    mu *= g[net.resource][:, None]
    if not integer:
        return mu
    base = np.floor(mu + 1e-9)
    frac = mu - base
    left_q = Q - _outflow(net, base)
    left_c = capacity - np.bincount(net.resource, weights=net.rho * base.sum(axis=1),
                                    minlength=net.num_resources)
    order = np.lexsort((np.arange(frac.size), -frac.ravel()))
    for idx in order:
        fr = frac.flat[idx]
        if fr <= 1e-9:
            break
        e, k = divmod(int(idx), mu.shape[1])
        r = net.resource[e]
        if left_q[net.tail[e], k] >= 1 and left_c[r] >= net.rho[e] - 1e-12:
            base[e, k] += 1
            left_q[net.tail[e], k] -= 1
            left_c[r] -= net.rho[e]
    return base


def _outflow(net: LayeredGraph, x: np.ndarray) -> np.ndarray:
    out = np.zeros(net.queue_shape)
    np.add.at(out, net.tail, x)
    return out


@dataclass
class FrameRecord:
    frame: int
    resource: str
    capacity: float
    growth: float
    correction: float
    next_capacity: float


def capacity_iteration(capacity: np.ndarray, physical: np.ndarray, R: np.ndarray,
                       nu_bar: np.ndarray, K: int, kappa: float, net: LayeredGraph):
    """One frame-end revision of the virtual capacities.

    Request-queue growth per edge is ``r = sum_l max(R_l / K, 0)``.  Part of a
    node's growth is inherited from upstream shortfall, so each edge is
    credited its share (by planned flow) of the growth on the node's inflow.
    The remaining correction ``eps`` shrinks the capacity, smoothed towards
    the physical value by ``kappa``.  Returns ``(next, growth, eps)`` per
    resource.
    """
    r_edge = np.maximum(R / K, 0.0).sum(axis=1)
    inflow = np.bincount(net.head, weights=net.zeta * r_edge, minlength=net.num_nodes)
    planned = nu_bar.sum(axis=1)
    out_total = np.bincount(net.tail, weights=planned, minlength=net.num_nodes)
    with np.errstate(divide="ignore", invalid="ignore"):
        share = np.where(out_total[net.tail] > 0, planned / out_total[net.tail], 0.0)
    eps_edge = r_edge - inflow[net.tail] * share
    n_res = net.num_resources
    eps = np.bincount(net.resource, weights=net.rho * eps_edge, minlength=n_res)
    growth = np.bincount(net.resource, weights=net.rho * r_edge, minlength=n_res)
    nxt = np.clip((1 - kappa) * (capacity - eps) + kappa * physical, 0.0, physical)
    return nxt, growth, eps


class RCNCPolicy:
    """Request-queue flow matching with per-frame capacity iteration."""

    def __init__(self, V: float, n: int | None = None, K: int = 2000, kappa: float = 0.1,
                 distributed: bool = False, integer: bool = True, backend: str = "simplex",
                 frame_log: bool = True, window: str = "cumulative", carry_requests: bool = False):
        if K < 1:
            raise ValueError("frame length K must be >= 1")
        if not 0 < kappa < 1:
            raise ValueError("kappa must lie in (0, 1)")
        self.V, self.n, self.K, self.kappa = float(V), n, int(K), float(kappa)
        self.distributed = distributed
        self.integer = integer
        self.backend = backend
        self.keep_log = frame_log
        if window not in ("frame", "cumulative"):
            raise ValueError("window must be 'frame' or 'cumulative'")
        self.window = window
        self.carry_requests = carry_requests

    def reset(self, net, spec, seed):
        self.net = net
        self.n_eff = net.max_lifetime if self.n is None else int(self.n)
        self.physical = net.resource_capacity.astype(float)
        self.ctrl = VirtualController(net, self.V, self.physical.copy())
        self.R = np.zeros(net.shape)
        self._R_start = np.zeros(net.shape)
        self.frame = 0
        self.t = 0
        self.frames: list[FrameRecord] = []
        self.capacity_history = [self.ctrl.capacity.copy()]
        self.lp_residual = 0.0
        self.lp_solves = 0
        self._nu_bar = np.zeros(net.shape)
        self._frame_nu = np.zeros(net.shape)
        self._frame_count = 0
        split = self.distributed or self.n_eff == 1
        self.prune = self.n_eff == 1
        if split:
            # with n = 1 there is no coupling between nodes, so the LP splits exactly
            coupled = False
            self.parts = [FlowMatchingLP(net, self.n_eff, np.flatnonzero(net.node_phys == p),
                                         coupled=coupled)
                          for p in range(net.graph.num_nodes)]
            self.parts = [p for p in self.parts if p.num_vars > 0]
        else:
            self.parts = [FlowMatchingLP(net, self.n_eff)]
        self.coupled = not split

    @property
    def capacity(self) -> np.ndarray:
        return self.ctrl.capacity

    def decide(self, Q, t):
        ctrl = self.ctrl
        nu = ctrl.plan()
        avg = ctrl.avg
        if self.window == "frame":
            self._nu_bar = self._frame_nu + (nu - self._frame_nu) / (self._frame_count + 1)
        else:
            self._nu_bar = avg.nu + (nu - avg.nu) / (avg.count + 1)
        if self.coupled:
            lam = avg.lam
        else:
            lam = expected_supply(self.net, avg.lam, avg.mu)
        mu = np.zeros(self.net.shape)
        for part in self.parts:
            m, resid = part.solve(self.R, Q, lam, self.physical, prune=self.prune,
                                  backend=self.backend)
            mu += m
            self.lp_residual = max(self.lp_residual, resid)
            self.lp_solves += 1
        mu = repair(mu, Q, self.net, self.physical, self.integer)
        self.mu = mu
        return mu

    def observe(self, a, x, t):
        self.ctrl.advance(a, x)
        self.R += self._nu_bar - x
        self._frame_nu[:] = self._nu_bar
        self._frame_count += 1
        self.t += 1
        if self.t % self.K == 0:
            self._end_frame()

    def _end_frame(self):
        net = self.net
        cap = self.ctrl.capacity
        share = self._frame_nu if self.window == "frame" else self.ctrl.avg.nu
        nxt, growth, eps = capacity_iteration(cap, self.physical, self.R - self._R_start, share,
                                              self.K, self.kappa, net)
        if self.keep_log:
            for r in range(net.num_resources):
                self.frames.append(FrameRecord(self.frame, net.resource_labels[r], float(cap[r]),
                                               float(growth[r]), float(eps[r]), float(nxt[r])))
        self.ctrl.capacity[:] = nxt
        self.capacity_history.append(nxt.copy())
        if self.carry_requests:
            self._R_start[:] = self.R
        else:
            self.R[:] = 0.0
        if self.window == "frame":
            self._frame_nu[:] = 0.0
            self._frame_count = 0
        self.frame += 1

    def write_frames(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["frame", "resource", "capacity", "growth", "correction", "next_capacity"])
            for f in self.frames:
                w.writerow([f.frame, f.resource, *(format(v, ".12g") for v in
                                                   (f.capacity, f.growth, f.correction,
                                                    f.next_capacity))])
