"""Compiled per-slot loops shared by the simulator and the controllers.

Array conventions: queues are ``(nodes, L)``, flows are ``(edges, L)`` and
column ``k`` holds lifetime ``k + 1``.
"""

import numpy as np
from numba import njit

OK, NEGATIVE, MASKED, AVAILABILITY, CAPACITY, NON_INTEGER, NON_FINITE = range(7)


@njit(cache=True)
def step(Q, x, a, tail, head, zeta, beta, is_dest, node_comm, edge_comm,
         unit_cost, rho, Qn, delivered, dropped, cost):
    """Advance the lifetime queues by one slot.

    Writes the next state into ``Qn`` and per-commodity delivered, dropped
    (both in input units) and cost into the output vectors.  Returns the raw
    (unnormalized) delivered, dropped and (zeta - 1)-weighted processed totals
    for mass-balance checks.
    """
    N, L = Q.shape
    E = x.shape[0]
    out = np.zeros((N, L))
    inn = np.zeros((N, L))
    delivered[:] = 0.0
    dropped[:] = 0.0
    cost[:] = 0.0
    gain = 0.0
    for e in range(E):
        u = tail[e]
        v = head[e]
        z = zeta[e]
        tot = 0.0
        for k in range(L):
            f = x[e, k]
            if f != 0.0:
                out[u, k] += f
                inn[v, k] += z * f
                tot += f
        gain += (z - 1.0) * tot
        cost[edge_comm[e]] += unit_cost[e] * rho[e] * tot
    raw_del = 0.0
    raw_drop = 0.0
    for i in range(N):
        c = node_comm[i]
        if is_dest[i]:
            s = 0.0
            for k in range(L):
                s += inn[i, k]
                Qn[i, k] = 0.0
            raw_del += s
            delivered[c] += s * beta[i]
            continue
        left = Q[i, 0] - out[i, 0] + inn[i, 0]
        raw_drop += left
        dropped[c] += left * beta[i]
        for k in range(L - 1):
            Qn[i, k] = Q[i, k + 1] - out[i, k + 1] + inn[i, k + 1] + a[i, k]
        Qn[i, L - 1] = a[i, L - 1]
    return raw_del, raw_drop, gain


@njit(cache=True)
def admissible(Q, x, tail, mask, rho, res_ptr, res_edges, capacity, peak, integer, tol):
    """First violated constraint as ``(code, index, lifetime_col, amount, limit)``."""
    N, L = Q.shape
    E = x.shape[0]
    out = np.zeros((N, L))
    for e in range(E):
        for k in range(L):
            f = x[e, k]
            if not np.isfinite(f):
                return NON_FINITE, e, k, f, 0.0
            if f < -tol:
                return NEGATIVE, e, k, f, 0.0
            if f != 0.0 and not mask[e, k]:
                return MASKED, e, k, f, 0.0
            if integer and f != np.floor(f):
                return NON_INTEGER, e, k, f, 0.0
            out[tail[e], k] += f
    for i in range(N):
        for k in range(L):
            if out[i, k] > Q[i, k] + tol:
                return AVAILABILITY, i, k, out[i, k], Q[i, k]
    if peak:
        for r in range(len(res_ptr) - 1):
            s = 0.0
            for j in range(res_ptr[r], res_ptr[r + 1]):
                e = res_edges[j]
                for k in range(L):
                    s += rho[e] * x[e, k]
            if s > capacity[r] + tol * max(1.0, capacity[r]):
                return CAPACITY, r, -1, s, capacity[r]
    return OK, -1, -1, 0.0, 0.0


@njit(cache=True)
def weights(U, Ud, V, unit_cost, rho, zeta, beta, tail, head, is_dest, node_comm, mask, w):
    """Drift-plus-penalty weight per unit of resource for every (edge, lifetime)."""
    N, L = U.shape
    E = w.shape[0]
    cum = np.zeros((N, L))
    for i in range(N):
        s = 0.0
        for k in range(L):
            s += U[i, k]
            cum[i, k] = s
    for e in range(E):
        u = tail[e]
        v = head[e]
        r = rho[e]
        for k in range(L):
            if not mask[e, k]:
                w[e, k] = -np.inf
                continue
            val = -V * unit_cost[e] - beta[u] * cum[u, k] / r
            if is_dest[v]:
                val += zeta[e] * beta[v] * Ud[node_comm[v]] / r
            elif k >= 1:
                val += zeta[e] * beta[v] * cum[v, k - 1] / r
            w[e, k] = val


@njit(cache=True)
def maxweight(w, res_ptr, res_edges, capacity, rho, nu):
    """Give each resource wholly to its best positive-weight (edge, lifetime).

    Ties go to the smaller lifetime, then to the smaller edge index (the
    resource's edge list is sorted by index).
    """
    L = w.shape[1]
    nu[:, :] = 0.0
    for r in range(len(res_ptr) - 1):
        best = 0.0
        be = -1
        bk = -1
        for k in range(L):
            for j in range(res_ptr[r], res_ptr[r + 1]):
                e = res_edges[j]
                if w[e, k] > best:
                    best = w[e, k]
                    be = e
                    bk = k
        if be >= 0 and capacity[r] > 0.0:
            nu[be, bk] = capacity[r] / rho[be]


@njit(cache=True)
def virtual_update(U, Ud, nu, a, A, gamma, xi_final, tail, head, zeta, is_dest, node_comm):
    """Deficit-queue update; ``A`` holds per-commodity total arrivals in input units."""
    N, L = U.shape
    E = nu.shape[0]
    out = np.zeros((N, L))
    inn = np.zeros((N, L))
    into_d = np.zeros(Ud.shape[0])
    for e in range(E):
        u = tail[e]
        v = head[e]
        for k in range(L):
            f = nu[e, k]
            if f != 0.0:
                out[u, k] += f
                inn[v, k] += zeta[e] * f
                if is_dest[v]:
                    into_d[node_comm[v]] += zeta[e] * f
    for c in range(Ud.shape[0]):
        Ud[c] = max(Ud[c] + gamma[c] * xi_final[c] * A[c] - into_d[c], 0.0)
    for i in range(N):
        if is_dest[i]:
            continue
        so = 0.0  # outflow at lifetimes >= l
        si = 0.0  # inflow at lifetimes >= l + 1
        sa = 0.0  # arrivals at lifetimes >= l
        for k in range(L - 1, -1, -1):
            so += out[i, k]
            sa += a[i, k]
            if k + 1 < L:
                si += inn[i, k + 1]
            U[i, k] = max(U[i, k] + so - si - sa, 0.0)


@njit(cache=True)
def routing_pdf(nu_bar, lam_hat, alpha, stale, tail, head, zeta, is_dest,
                out_ptr, out_edges, in_ptr, in_edges, skip_excess):
    """Refresh the per-(node, lifetime) routing probabilities in place.

    ``alpha[e, k]`` is the probability of sending a lifetime-``k+1`` packet
    on edge ``e``; the idle probability is the remainder.  Entries with a
    non-positive denominator keep their previous values and are flagged
    stale.  When the planned outflow exceeds the denominator the entry is
    either skipped too (``skip_excess``) or scaled so that idle is zero.
    """
    N, L = lam_hat.shape
    for i in range(N):
        if is_dest[i]:
            continue
        inflow = 0.0   # zeta-weighted inflow at lifetimes >= l + 1
        outflow = 0.0  # outflow at lifetimes >= l + 1
        arr = 0.0      # arrivals at lifetimes >= l
        for k in range(L - 1, -1, -1):
            arr += lam_hat[i, k]
            if k + 1 < L:
                for j in range(in_ptr[i], in_ptr[i + 1]):
                    e = in_edges[j]
                    inflow += zeta[e] * nu_bar[e, k + 1]
                for j in range(out_ptr[i], out_ptr[i + 1]):
                    outflow += nu_bar[out_edges[j], k + 1]
            dnm = inflow + arr - outflow
            planned = 0.0
            for j in range(out_ptr[i], out_ptr[i + 1]):
                planned += nu_bar[out_edges[j], k]
            if dnm <= 0.0 or (skip_excess and planned > dnm):
                stale[i, k] = True
                continue
            stale[i, k] = planned > dnm
            dnm = max(dnm, planned)
            for j in range(out_ptr[i], out_ptr[i + 1]):
                e = out_edges[j]
                alpha[e, k] = nu_bar[e, k] / dnm


@njit(cache=True)
def sample_flows(Q, alpha, out_ptr, out_edges, rng, integer, x):
    """Split each queue over its outgoing edges and idle.

    Integer mode draws a multinomial through successive conditional binomials;
    fluid mode splits deterministically in proportion to ``alpha``.
    """
    N, L = Q.shape
    x[:, :] = 0.0
    for i in range(N):
        for k in range(L):
            q = Q[i, k]
            if q <= 0.0:
                continue
            if not integer:
                for j in range(out_ptr[i], out_ptr[i + 1]):
                    e = out_edges[j]
                    x[e, k] = q * alpha[e, k]
                continue
            left = int(q)
            rest = 1.0
            for j in range(out_ptr[i], out_ptr[i + 1]):
                if left == 0:
                    break
                e = out_edges[j]
                p = alpha[e, k]
                if p <= 0.0:
                    continue
                share = min(p / rest, 1.0) if rest > 0.0 else 1.0
                n = rng.binomial(left, share)
                x[e, k] = n
                left -= n
                rest -= p


@njit(cache=True)
def commodity_totals(a, beta, node_comm, out):
    out[:] = 0.0
    N, L = a.shape
    for i in range(N):
        s = 0.0
        for k in range(L):
            s += a[i, k]
        out[node_comm[i]] += s * beta[i]


@njit(cache=True)
def randomized_block(Q, Qn, arr, V, unit_cost, rho, zeta, beta, tail, head, is_dest,
                     node_comm, edge_comm, useful, model, res_ptr, res_edges, capacity,
                     out_ptr, out_edges, in_ptr, in_edges, gamma, xi_final,
                     U, Ud, w, nu, nu_bar, lam_hat, mu_bar, counters, alpha, stale,
                     learn, warmup, skip_excess, integer, rng, x,
                     check, peak, tol, delivered, dropped, cost, arrivals, flow_sum,
                     flows, record, stats):
    """Run the randomized policy and the queue dynamics for ``arr.shape[0]`` slots.

    Mirrors ``RandomizedPolicy`` driven by ``run_simulation`` slot for slot.
    ``counters`` holds ``[slot, samples]``; ``stats`` collects virtual cost,
    mass-balance error, peak backlog and, on failure, the admissibility
    report ``(code, slot, index, col, amount, limit)`` in entries 3..8.
    """
    B = arr.shape[0]
    N, L = Q.shape
    E = x.shape[0]
    tmp = np.empty((E, L))
    for b in range(B):
        t = counters[0]
        a = arr[b]
        if learn:
            weights(U, Ud, V, unit_cost, rho, zeta, beta, tail, head, is_dest, node_comm,
                    useful, w)
            maxweight(w, res_ptr, res_edges, capacity, rho, nu)
            vc = 0.0
            for e in range(E):
                s = 0.0
                for k in range(L):
                    s += nu[e, k]
                vc += unit_cost[e] * rho[e] * s
            stats[0] += vc
            if t >= warmup:
                n = counters[1]
                for e in range(E):
                    for k in range(L):
                        tmp[e, k] = nu_bar[e, k] + (nu[e, k] - nu_bar[e, k]) / (n + 1)
                routing_pdf(tmp, lam_hat, alpha, stale, tail, head, zeta, is_dest,
                            out_ptr, out_edges, in_ptr, in_edges, skip_excess)
        sample_flows(Q, alpha, out_ptr, out_edges, rng, integer, x)
        if check:
            code, idx, k, amount, limit = admissible(Q, x, tail, model, rho, res_ptr,
                                                     res_edges, capacity, peak, integer, tol)
            if code != OK:
                stats[3] = code
                stats[4] = t
                stats[5] = idx
                stats[6] = k
                stats[7] = amount
                stats[8] = limit
                return b
        raw_del, raw_drop, gain = step(Q, x, a, tail, head, zeta, beta, is_dest, node_comm,
                                       edge_comm, unit_cost, rho, Qn, delivered[b],
                                       dropped[b], cost[b])
        commodity_totals(a, beta, node_comm, arrivals[b])
        if check:
            expect = Q.sum() + a.sum() + gain - raw_del - raw_drop
            stats[1] = max(stats[1], abs(Qn.sum() - expect))
        for e in range(E):
            for k in range(L):
                flow_sum[e, k] += x[e, k]
        if record:
            flows[b] = x
        if learn:
            virtual_update(U, Ud, nu, a, arrivals[b], gamma, xi_final, tail, head, zeta,
                           is_dest, node_comm)
            n = counters[1]
            for e in range(E):
                for k in range(L):
                    nu_bar[e, k] += (nu[e, k] - nu_bar[e, k]) / (n + 1)
                    mu_bar[e, k] += (x[e, k] - mu_bar[e, k]) / (n + 1)
            for i in range(N):
                for k in range(L):
                    lam_hat[i, k] += (a[i, k] - lam_hat[i, k]) / (n + 1)
            counters[1] = n + 1
        Q[:, :] = Qn
        if check:
            stats[2] = max(stats[2], Q.sum())
        counters[0] = t + 1
    return B
