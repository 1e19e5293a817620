"""Exogenous arrival processes.

Each entry of an :class:`ArrivalSpec` feeds one (layered node, lifetime) queue.
Samples come from counter-based Philox streams keyed by ``(seed, entry,
block)``, so the draw for a given slot never depends on what a policy did
with its own random numbers.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

KINDS = ("poisson", "uniform", "binomial", "constant", "trace")
BLOCK = 4096
ARRIVAL_STREAM = 0x41525256  # stream tag kept apart from policy streams
POISSON_TAIL = 1e-12


class TraceExhausted(IndexError):
    pass


@dataclass(frozen=True)
class ArrivalEntry:
    """One arrival process.

    ``params`` by kind:

    * poisson: ``lam`` (mean), optional ``unit`` (amount per arrival event)
      and ``a_max``
    * uniform: ``lam`` (support ``0..2*lam``) or ``low``/``high``; ``unit``
    * binomial: ``lam`` (``n = 2*lam``, ``p = 1/2``) or ``n``/``p``; ``unit``
    * constant: ``value``
    * trace: ``values``, optional ``cyclic`` (default true)
    """

    node: int
    lifetime: int
    kind: str
    params: Mapping = field(default_factory=dict)
    commodity: int = 0
    xi: float = 1.0  # cumulative scaling at the entry's stage

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown arrival kind {self.kind!r}")
        if self.lifetime < 1:
            raise ValueError("arrival lifetime must be >= 1")
        p = self.params
        if self.kind == "uniform" and "lam" in p and "low" not in p:
            if float(2 * p["lam"]) != int(2 * p["lam"]):
                raise ValueError("uniform arrivals need an integer 2*lam")
        if self.kind == "trace" and len(self.values) == 0:
            raise ValueError("trace arrivals need at least one value")

    @property
    def unit(self) -> float:
        return float(self.params.get("unit", 1.0))

    @property
    def values(self) -> np.ndarray:
        return np.asarray(self.params.get("values", ()), dtype=float)

    def _binomial(self) -> tuple[int, float]:
        p = self.params
        if "n" in p:
            return int(p["n"]), float(p.get("p", 0.5))
        return int(round(2 * float(p["lam"]))), 0.5

    def _uniform(self) -> tuple[int, int]:
        p = self.params
        if "low" in p:
            return int(p["low"]), int(p["high"])
        return 0, int(round(2 * float(p["lam"])))

    @property
    def mean(self) -> float:
        """Analytic mean amount per slot."""
        k = self.kind
        if k == "poisson":
            return float(self.params["lam"])
        if k == "uniform":
            lo, hi = self._uniform()
            return self.unit * (lo + hi) / 2
        if k == "binomial":
            n, q = self._binomial()
            return self.unit * n * q
        if k == "constant":
            return float(self.params["value"])
        return float(self.values.mean())

    @property
    def a_max(self) -> float:
        k = self.kind
        if k == "poisson":
            if "a_max" in self.params:
                return float(self.params["a_max"])
            return self.unit * float(stats.poisson.ppf(1 - POISSON_TAIL, self._poisson_count_mean()))
        if k == "uniform":
            return self.unit * self._uniform()[1]
        if k == "binomial":
            return self.unit * self._binomial()[0]
        if k == "constant":
            return float(self.params["value"])
        return float(self.values.max())

    def _poisson_count_mean(self) -> float:
        # with a unit size, ``lam`` is the mean amount, so events arrive at lam/unit
        return float(self.params["lam"]) / self.unit

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        k = self.kind
        if k == "poisson":
            mu = self._poisson_count_mean()
            cap = self.a_max / self.unit
            out = rng.poisson(mu, n).astype(float)
            bad = out > cap
            while bad.any():
                out[bad] = rng.poisson(mu, int(bad.sum()))
                bad = out > cap
            return out * self.unit
        if k == "uniform":
            lo, hi = self._uniform()
            return rng.integers(lo, hi + 1, n).astype(float) * self.unit
        if k == "binomial":
            m, q = self._binomial()
            return rng.binomial(m, q, n).astype(float) * self.unit
        if k == "constant":
            return np.full(n, float(self.params["value"]))
        raise AssertionError("trace entries are not random")


@dataclass(frozen=True)
class ArrivalSpec:
    entries: tuple[ArrivalEntry, ...]
    num_nodes: int
    max_lifetime: int
    num_commodities: int = 1

    def __post_init__(self):
        for e in self.entries:
            if not 0 <= e.node < self.num_nodes:
                raise ValueError(f"arrival node {e.node} out of range")
            if e.lifetime > self.max_lifetime:
                raise ValueError(f"arrival lifetime {e.lifetime} exceeds L={self.max_lifetime}")
            if not 0 <= e.commodity < self.num_commodities:
                raise ValueError(f"arrival commodity {e.commodity} out of range")

    @property
    def a_max(self) -> float:
        """Largest total arrival amount in one slot."""
        return float(sum(e.a_max for e in self.entries))


def mean_rate(spec: ArrivalSpec) -> tuple[np.ndarray, np.ndarray]:
    """Mean arrivals per (node, lifetime) and the per-commodity l1 norm.

    The norm is expressed in input units: an entry at a later stage is divided
    by its cumulative scaling.
    """
    lam = np.zeros((spec.num_nodes, spec.max_lifetime))
    norm = np.zeros(spec.num_commodities)
    for e in spec.entries:
        lam[e.node, e.lifetime - 1] += e.mean
        norm[e.commodity] += e.mean / e.xi
    return lam, norm


class ArrivalStream:
    """Slot-indexed arrival sampler for one seed.

    ``at(t)`` is a pure function of ``(spec, seed, t)``; blocks of
    :data:`BLOCK` slots are drawn at once and cached.
    """

    def __init__(self, spec: ArrivalSpec, seed: int):
        self.spec = spec
        self.seed = int(seed)
        self._block = -1
        self._data = np.zeros((0, len(spec.entries)))
        self._buf = np.zeros((spec.num_nodes, spec.max_lifetime))
        self._cols = [(e.node, e.lifetime - 1) for e in spec.entries]

    def _rng(self, entry: int, block: int) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(ARRIVAL_STREAM, entry, block))
        return np.random.Generator(np.random.Philox(ss))

    def block(self, b: int) -> np.ndarray:
        """Samples for slots ``b*BLOCK .. (b+1)*BLOCK - 1``, one column per entry."""
        out = np.empty((BLOCK, len(self.spec.entries)))
        t0 = b * BLOCK
        for j, e in enumerate(self.spec.entries):
            if e.kind == "trace":
                vals = e.values
                idx = np.arange(t0, t0 + BLOCK)
                if e.params.get("cyclic", True):
                    out[:, j] = vals[idx % len(vals)]
                else:
                    col = np.full(BLOCK, np.nan)
                    ok = idx < len(vals)
                    col[ok] = vals[idx[ok]]
                    out[:, j] = col
            else:
                out[:, j] = e.draw(self._rng(j, b), BLOCK)
        return out

    def row(self, t: int) -> np.ndarray:
        b = t // BLOCK
        if b != self._block:
            self._data = self.block(b)
            self._block = b
        r = self._data[t - b * BLOCK]
        if np.isnan(r).any():
            raise TraceExhausted(f"arrival trace exhausted at slot {t}")
        return r

    def at(self, t: int) -> np.ndarray:
        """Dense (node, lifetime) arrival array for slot ``t`` (a fresh copy)."""
        r = self.row(t)
        a = np.zeros_like(self._buf)
        for (i, k), v in zip(self._cols, r):
            a[i, k] += v
        return a


def sample_arrivals(spec: ArrivalSpec, seed: int, t: int) -> np.ndarray:
    if t < 0:
        raise ValueError("slot index must be >= 0")
    return ArrivalStream(spec, seed).at(t)


def read_trace_csv(path: str | Path, column: int | str = 0) -> list[float]:
    """One column of a trace CSV (header row optional)."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return []
    header = rows[0]
    try:
        [float(x) for x in header]
        body = rows
    except ValueError:
        body = rows[1:]
        if isinstance(column, str):
            column = header.index(column)
    return [float(r[int(column)]) for r in body if r]
