"""Randomized flow matching for average capacity constraints.

Each slot the virtual controller plans a flow; its running average ``nu_bar``
together with the arrival-rate estimate fixes, for every (node, lifetime), a
distribution over outgoing edges and idling.  Every queued packet then picks
independently, which amounts to one multinomial draw per queue.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .network import LayeredGraph
from .virtual import VirtualController

POLICY_STREAM = 0x504F4C59
WARMUP = 10


def policy_rng(seed: int, tag: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(POLICY_STREAM, tag))
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class RoutingPdf:
    """``alpha[e, k]``: chance a lifetime-``k+1`` packet at ``tail[e]`` goes on ``e``."""

    alpha: np.ndarray
    stale: np.ndarray

    @classmethod
    def idle(cls, net: LayeredGraph) -> "RoutingPdf":
        return cls(np.zeros(net.shape), np.zeros(net.queue_shape, dtype=bool))

    def idle_prob(self, net: LayeredGraph) -> np.ndarray:
        """Probability of staying put, per (node, lifetime)."""
        out = np.zeros(net.queue_shape)
        np.add.at(out, net.tail, self.alpha)
        return 1.0 - out


def routing_pdf(nu_bar: np.ndarray, lam_hat: np.ndarray, net: LayeredGraph,
                previous: RoutingPdf | None = None, skip_excess: bool = False) -> RoutingPdf:
    """Update every entry from the running averages.

    The denominator is the expected supply of lifetime-``l`` packets at the
    node: inflow and arrivals at lifetimes ``>= l`` minus what the plan sends
    earlier.  Entries with no supply keep their previous pdf.  If the plan
    asks for more than the supply, which happens at relays whose deficit
    queue stays positive, the pdf is scaled to send everything
    (``skip_excess=True`` keeps the previous pdf instead).
    """
    pdf = RoutingPdf.idle(net) if previous is None else previous
    g = net.csr
    K.routing_pdf(nu_bar, lam_hat, pdf.alpha, pdf.stale, net.tail, net.head, net.zeta,
                  net.is_dest, g.out_ptr, g.out_edges, g.in_ptr, g.in_edges, skip_excess)
    return pdf


def sample_decisions(Q: np.ndarray, pdf: RoutingPdf, net: LayeredGraph,
                     rng: np.random.Generator, integer: bool = True) -> np.ndarray:
    g = net.csr
    x = np.zeros(net.shape)
    K.sample_flows(Q, pdf.alpha, g.out_ptr, g.out_edges, rng, integer, x)
    return x


class RandomizedPolicy:
    """Flow matching driven by the virtual controller.

    ``frozen_pdf`` switches off learning and samples from a fixed pdf, which
    is how the flow distribution is studied in isolation.
    """

    def __init__(self, V: float, integer: bool = True, warmup: int = WARMUP,
                 frozen_pdf: RoutingPdf | None = None, skip_excess: bool = False,
                 compiled: bool = True):
        self.V = float(V)
        self.skip_excess = skip_excess
        if not compiled:
            self.run_block = None
        self.integer = integer
        self.warmup = warmup
        self.frozen = frozen_pdf

    def reset(self, net, spec, seed):
        self.net = net
        self.ctrl = VirtualController(net, self.V)
        self.pdf = RoutingPdf.idle(net) if self.frozen is None else self.frozen
        self.rng = policy_rng(seed)
        self.x = np.zeros(net.shape)
        self._t = 0
        g = net.csr
        self._pdf_args = (net.tail, net.head, net.zeta, net.is_dest,
                          g.out_ptr, g.out_edges, g.in_ptr, g.in_edges, self.skip_excess)
        self._adj = (g.out_ptr, g.out_edges)

    def decide(self, Q, t):
        if self.frozen is None:
            self.ctrl.plan()
            # the pdf uses averages that include this slot's plan
            avg = self.ctrl.avg
            nu_bar = avg.nu + (self.ctrl.nu - avg.nu) / (avg.count + 1)
            if t >= self.warmup:
                K.routing_pdf(nu_bar, avg.lam, self.pdf.alpha,
                              self.pdf.stale, *self._pdf_args)
        K.sample_flows(Q, self.pdf.alpha, self._adj[0], self._adj[1], self.rng, self.integer,
                       self.x)
        return self.x

    def observe(self, a, x, t):
        if self.frozen is None:
            self.ctrl.advance(a, x)

    def run_block(self, Q, Qn, arr, log, check, peak, integer):
        """Compiled equivalent of ``decide``/``observe`` over a block of slots."""
        net, c = self.net, self.ctrl
        g = net.csr
        counters = np.array([self._t, c.avg.count], dtype=np.int64)
        log.stats[0] = c.cost_sum
        done = K.randomized_block(
            Q, Qn, arr, self.V, net.unit_cost, net.rho, net.zeta, net.beta, net.tail, net.head,
            net.is_dest, net.node_commodity, net.edge_commodity, net.useful_mask,
            net.model_mask, g.res_ptr, g.res_edges, c.capacity, g.out_ptr, g.out_edges,
            g.in_ptr, g.in_edges, g.gamma, g.xi_final, c.state.U, c.state.Ud, c.w, c.nu,
            c.avg.nu, c.avg.lam, c.avg.mu, counters, self.pdf.alpha, self.pdf.stale,
            self.frozen is None, self.warmup, self.skip_excess, self.integer, self.rng, self.x,
            check, peak, 1e-9, log.delivered, log.dropped, log.cost, log.arrivals,
            log.flow_sum, log.flows, log.record, log.stats)
        self._t = int(counters[0])
        c.avg.count = int(counters[1])
        c.cost_sum = float(log.stats[0])
        return done
