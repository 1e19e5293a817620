"""Virtual network controller: deficit queues, weights and max-weight flow.

In the virtual network every node may send data it does not hold; the
deficit queues ``U`` record how far the virtual decisions run ahead of what
arrivals and inflows can support.  Each slot the controller picks, per
physical resource, the single (edge, lifetime) with the best positive weight
and gives it the whole resource.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .network import LayeredGraph


@dataclass
class VirtualQueueState:
    """``U[i, k]`` per layered node and lifetime, ``Ud[c]`` per commodity."""

    U: np.ndarray
    Ud: np.ndarray

    @classmethod
    def zeros(cls, net: LayeredGraph) -> "VirtualQueueState":
        return cls(np.zeros(net.queue_shape), np.zeros(net.num_commodities))

    def total(self) -> float:
        return float(self.U.sum() + self.Ud.sum())


@dataclass
class EmpiricalAverages:
    """Running means of virtual flow, arrivals and actual flow."""

    nu: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    count: int = 0

    @classmethod
    def zeros(cls, net: LayeredGraph) -> "EmpiricalAverages":
        return cls(np.zeros(net.shape), np.zeros(net.queue_shape), np.zeros(net.shape))


def running_mean(mean: np.ndarray, sample: np.ndarray, count: int) -> None:
    """In-place ``mean += (sample - mean) / (count + 1)``."""
    mean += (sample - mean) / (count + 1)


def update_empirical(avg: EmpiricalAverages, nu: np.ndarray, a: np.ndarray,
                     mu: np.ndarray | None = None) -> EmpiricalAverages:
    running_mean(avg.nu, nu, avg.count)
    running_mean(avg.lam, a, avg.count)
    if mu is not None:
        running_mean(avg.mu, mu, avg.count)
    avg.count += 1
    return avg


def commodity_arrivals(net: LayeredGraph, a: np.ndarray) -> np.ndarray:
    """Total arrivals per commodity in input units (stage-m amounts divided by their scaling)."""
    out = np.zeros(net.num_commodities)
    K.commodity_totals(a, net.beta, net.node_commodity, out)
    return out


def update_virtual_queues(state: VirtualQueueState, nu: np.ndarray, a: np.ndarray,
                          net: LayeredGraph, A: np.ndarray | None = None) -> VirtualQueueState:
    """One deficit-queue step for virtual flow ``nu`` and arrivals ``a``."""
    if np.any(nu < 0) or np.any(a < 0):
        raise ValueError("virtual flow and arrivals must be nonnegative")
    if A is None:
        A = commodity_arrivals(net, a)
    g = net.csr
    K.virtual_update(state.U, state.Ud, nu, a, np.asarray(A, dtype=float), g.gamma, g.xi_final,
                     net.tail, net.head, net.zeta, net.is_dest, net.node_commodity)
    return state


def compute_weights(state: VirtualQueueState, V: float, net: LayeredGraph,
                    mask: np.ndarray | None = None) -> np.ndarray:
    """Weight per unit resource; masked pairs get ``-inf``."""
    w = np.empty(net.shape)
    K.weights(state.U, state.Ud, float(V), net.unit_cost, net.rho, net.zeta, net.beta,
              net.tail, net.head, net.is_dest, net.node_commodity,
              net.useful_mask if mask is None else mask, w)
    return w


def maxweight_virtual_flow(w: np.ndarray, capacity: np.ndarray, net: LayeredGraph) -> np.ndarray:
    if np.any(capacity < 0):
        raise ValueError("capacities must be nonnegative")
    g = net.csr
    nu = np.zeros(net.shape)
    K.maxweight(w, g.res_ptr, g.res_edges, np.asarray(capacity, dtype=float), net.rho, nu)
    return nu


class VirtualController:
    """Virtual queues plus empirical averages, advanced once per slot."""

    def __init__(self, net: LayeredGraph, V: float, capacity: np.ndarray | None = None):
        self.net = net
        self.V = float(V)
        self.capacity = (net.resource_capacity if capacity is None else capacity).astype(float)
        self.state = VirtualQueueState.zeros(net)
        self.avg = EmpiricalAverages.zeros(net)
        self.nu = np.zeros(net.shape)
        self.w = np.empty(net.shape)
        self.cost_sum = 0.0
        g = net.csr
        self._edge_cost = net.unit_cost * net.rho
        self._args = (net.unit_cost, net.rho, net.zeta, net.beta, net.tail, net.head,
                      net.is_dest, net.node_commodity, net.useful_mask)
        self._mw = (g.res_ptr, g.res_edges)
        self._vq = (g.gamma, g.xi_final, net.tail, net.head, net.zeta, net.is_dest,
                    net.node_commodity)

    def plan(self) -> np.ndarray:
        """Virtual flow for the current slot from the current deficit queues."""
        s = self.state
        K.weights(s.U, s.Ud, self.V, *self._args, self.w)
        K.maxweight(self.w, self._mw[0], self._mw[1], self.capacity, self.net.rho, self.nu)
        self.cost_sum += float(self._edge_cost @ self.nu.sum(axis=1))
        return self.nu

    def advance(self, a: np.ndarray, mu: np.ndarray | None = None) -> None:
        """Fold this slot's virtual flow and arrivals into the state."""
        A = commodity_arrivals(self.net, a)
        K.virtual_update(self.state.U, self.state.Ud, self.nu, a, A, *self._vq)
        update_empirical(self.avg, self.nu, a, mu)

    @property
    def mean_virtual_cost(self) -> float:
        return self.cost_sum / max(self.avg.count, 1)
