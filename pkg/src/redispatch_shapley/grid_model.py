"""Network records, per-unit array views and admittance assembly.

Records keep the units of the case file (MW, MVAr, degrees). Solvers work
on :attr:`Network.arrays`, a cached per-unit view on ``base_mva``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from functools import cached_property
from typing import NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .numerics import sparse_from_triplets


class BusKind(IntEnum):
    PQ = 1
    PV = 2
    SLACK = 3
    ISOLATED = 4


class NetworkError(ValueError):
    """Structurally invalid network data."""


@dataclass(frozen=True)
class Bus:
    id: int
    kind: BusKind
    p_load: float = 0.0
    q_load: float = 0.0
    gs: float = 0.0  # MW consumed at 1 pu voltage
    bs: float = 0.0  # MVAr injected at 1 pu voltage
    area: int = 1
    vm: float = 1.0
    va: float = 0.0  # degrees
    base_kv: float = 0.0
    zone: int = 1
    v_max: float = 1.1
    v_min: float = 0.9


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float = 0.0
    rate_a: float = 0.0  # MVA, 0 means unlimited
    rate_b: float = 0.0
    rate_c: float = 0.0
    tap: float = 0.0  # 0 means no transformer (ratio 1)
    shift: float = 0.0  # degrees
    in_service: bool = True
    ang_min: float = -360.0
    ang_max: float = 360.0

    @property
    def ratio(self) -> float:
        return self.tap if self.tap != 0 else 1.0

    @property
    def limited(self) -> bool:
        return self.in_service and self.rate_a > 0


@dataclass(frozen=True)
class Generator:
    bus: int
    p: float = 0.0
    q: float = 0.0
    q_max: float = 0.0
    q_min: float = 0.0
    v_set: float = 1.0
    m_base: float = 100.0
    in_service: bool = True
    p_max: float = 0.0
    p_min: float = 0.0


@dataclass(frozen=True)
class CostCurve:
    """Quadratic cost a·p² + b·p + c in $/h with p in MW."""

    a: float = 0.0
    b: float = 0.0
    c: float = 0.0
    startup: float = 0.0
    shutdown: float = 0.0

    def __call__(self, p_mw):
        return self.a * p_mw * p_mw + self.b * p_mw + self.c


@dataclass(frozen=True)
class NetworkArrays:
    """Per-unit, index-based view used by every solver.

    Generator arrays cover in-service generators only; branch arrays cover
    every branch, with ``in_service`` masking the ones that carry flow.
    """

    base_mva: float
    n_bus: int
    slack: int
    pv: np.ndarray
    pq: np.ndarray
    p_load: np.ndarray
    q_load: np.ndarray
    gs: np.ndarray
    bs: np.ndarray
    v_min: np.ndarray
    v_max: np.ndarray
    f: np.ndarray
    t: np.ndarray
    r: np.ndarray
    x: np.ndarray
    b: np.ndarray
    ratio: np.ndarray
    shift: np.ndarray  # rad
    rate: np.ndarray  # pu, 0 = unlimited
    in_service: np.ndarray
    ang_min: np.ndarray  # rad
    ang_max: np.ndarray  # rad
    gen_index: np.ndarray  # positions of in-service generators in Network.generators
    gen_bus: np.ndarray
    pg: np.ndarray
    qg: np.ndarray
    p_min: np.ndarray
    p_max: np.ndarray
    q_min: np.ndarray
    q_max: np.ndarray
    v_set: np.ndarray
    cost_a: np.ndarray  # $/h per pu², so cost = a p² + b p + c with p in pu
    cost_b: np.ndarray
    cost_c: np.ndarray

    @property
    def n_branch(self) -> int:
        return self.f.size

    @property
    def n_gen(self) -> int:
        return self.gen_bus.size

    def gen_incidence(self) -> sp.csr_matrix:
        """Bus-by-generator incidence matrix."""
        ng = self.n_gen
        return sp.csr_matrix((np.ones(ng), (self.gen_bus, np.arange(ng))), shape=(self.n_bus, ng))


@dataclass(frozen=True)
class Network:
    base_mva: float
    buses: tuple
    branches: tuple
    generators: tuple
    costs: tuple
    name: str = "network"

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "generators", tuple(self.generators))
        object.__setattr__(self, "costs", tuple(self.costs))
        self._validate()

    def _validate(self):
        if not self.base_mva > 0:
            raise NetworkError("base_mva must be positive")
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise NetworkError("duplicate bus ids")
        known = set(ids)
        slacks = [b.id for b in self.buses if b.kind == BusKind.SLACK]
        if len(slacks) != 1:
            raise NetworkError(f"expected exactly one slack bus, found {len(slacks)}")
        for bus in self.buses:
            if not 0 < bus.v_min <= bus.v_max:
                raise NetworkError(f"bus {bus.id}: voltage bounds must satisfy 0 < v_min <= v_max")
        for k, br in enumerate(self.branches, start=1):
            if br.from_bus not in known or br.to_bus not in known:
                raise NetworkError(f"branch {k}: unknown bus reference")
            if br.from_bus == br.to_bus:
                raise NetworkError(f"branch {k}: from_bus equals to_bus")
            if br.rate_a < 0:
                raise NetworkError(f"branch {k}: negative limit")
        if len(self.costs) != len(self.generators):
            raise NetworkError("one cost curve per generator required")
        for k, (g, c) in enumerate(zip(self.generators, self.costs), start=1):
            if g.bus not in known:
                raise NetworkError(f"generator {k}: unknown bus reference")
            if g.in_service and (g.p_min > g.p_max or g.q_min > g.q_max):
                raise NetworkError(f"generator {k}: inverted bounds")
            if c.a < 0:
                raise NetworkError(f"generator {k}: negative quadratic cost coefficient")

    def bus_position(self, bus_id: int) -> int:
        return self.bus_lookup[bus_id]

    @cached_property
    def bus_lookup(self) -> dict:
        return {b.id: i for i, b in enumerate(self.buses)}

    @cached_property
    def arrays(self) -> NetworkArrays:
        base = self.base_mva
        pos = self.bus_lookup
        kinds = np.array([int(b.kind) for b in self.buses])
        gens = [(k, g) for k, g in enumerate(self.generators) if g.in_service]
        gidx = np.array([k for k, _ in gens], dtype=int)
        gen_bus = np.array([pos[g.bus] for _, g in gens], dtype=int)
        costs = [self.costs[k] for k in gidx]
        pv_buses = set(gen_bus.tolist())
        slack = int(np.flatnonzero(kinds == BusKind.SLACK)[0])
        # a bus regulates voltage iff it hosts an in-service generator
        pv = np.array(sorted(i for i in pv_buses if i != slack and kinds[i] != BusKind.ISOLATED), dtype=int)
        pq = np.array(
            [i for i in range(len(self.buses)) if i != slack and i not in pv_buses and kinds[i] != BusKind.ISOLATED],
            dtype=int,
        )
        br = self.branches

        def col(attr, data):
            return np.array([getattr(d, attr) for d in data], dtype=float)

        return NetworkArrays(
            base_mva=base,
            n_bus=len(self.buses),
            slack=slack,
            pv=pv,
            pq=pq,
            p_load=col("p_load", self.buses) / base,
            q_load=col("q_load", self.buses) / base,
            gs=col("gs", self.buses) / base,
            bs=col("bs", self.buses) / base,
            v_min=col("v_min", self.buses),
            v_max=col("v_max", self.buses),
            f=np.array([pos[b.from_bus] for b in br], dtype=int),
            t=np.array([pos[b.to_bus] for b in br], dtype=int),
            r=col("r", br),
            x=col("x", br),
            b=col("b", br),
            ratio=np.array([b.ratio for b in br], dtype=float),
            shift=np.deg2rad(col("shift", br)),
            rate=col("rate_a", br) / base,
            in_service=np.array([b.in_service for b in br], dtype=bool),
            ang_min=np.deg2rad(col("ang_min", br)),
            ang_max=np.deg2rad(col("ang_max", br)),
            gen_index=gidx,
            gen_bus=gen_bus,
            pg=np.array([g.p for _, g in gens], dtype=float) / base,
            qg=np.array([g.q for _, g in gens], dtype=float) / base,
            p_min=np.array([g.p_min for _, g in gens], dtype=float) / base,
            p_max=np.array([g.p_max for _, g in gens], dtype=float) / base,
            q_min=np.array([g.q_min for _, g in gens], dtype=float) / base,
            q_max=np.array([g.q_max for _, g in gens], dtype=float) / base,
            v_set=np.array([g.v_set for _, g in gens], dtype=float),
            cost_a=np.array([c.a for c in costs], dtype=float) * base * base,
            cost_b=np.array([c.b for c in costs], dtype=float) * base,
            cost_c=np.array([c.c for c in costs], dtype=float),
        )

    def is_connected(self) -> bool:
        a = self.arrays
        on = a.in_service
        n = a.n_bus
        adj = sp.coo_matrix((np.ones(on.sum()), (a.f[on], a.t[on])), shape=(n, n))
        n_comp, _ = connected_components(adj, directed=False)
        return n_comp == 1


def to_pu(value_mw, base_mva: float):
    return np.asarray(value_mw, dtype=float) / base_mva


def from_pu(value_pu, base_mva: float):
    return np.asarray(value_pu, dtype=float) * base_mva


class ZeroImpedanceError(NetworkError):
    pass


@dataclass(frozen=True)
class AdmittanceMatrix:
    """Bus admittance G + jB plus the from/to-end branch admittances.

    ``yf @ V`` and ``yt @ V`` give branch currents injected at the from and to
    ends (one row per branch, zero rows for out-of-service branches).
    """

    G: sp.csr_matrix
    B: sp.csr_matrix
    yf: sp.csr_matrix = field(repr=False)
    yt: sp.csr_matrix = field(repr=False)

    @property
    def ybus(self) -> sp.csr_matrix:
        return (self.G + 1j * self.B).tocsr()


def branch_admittances(a: NetworkArrays):
    """Π-model two-port entries (yff, yft, ytf, ytt) per branch."""
    on = a.in_service
    z = a.r + 1j * a.x
    if np.any(on & (a.x == 0)):
        k = int(np.flatnonzero(on & (a.x == 0))[0]) + 1
        raise ZeroImpedanceError(f"branch {k}: zero reactance on an in-service branch")
    ys = np.zeros(a.n_branch, dtype=complex)
    ys[on] = 1.0 / z[on]
    bc = np.where(on, a.b, 0.0)
    tap = a.ratio * np.exp(1j * a.shift)
    ytt = ys + 0.5j * bc
    yff = ytt / (tap * np.conj(tap))
    yft = -ys / np.conj(tap)
    ytf = -ys / tap
    return yff, yft, ytf, ytt


def build_admittance(net: Network) -> AdmittanceMatrix:
    a = net.arrays
    nb, nl = a.n_bus, a.n_branch
    yff, yft, ytf, ytt = branch_admittances(a)
    rows = np.r_[np.arange(nl), np.arange(nl)]
    yf = sparse_from_triplets(nl, nb, rows, np.r_[a.f, a.t], np.r_[yff, yft]).tocsr()
    yt = sparse_from_triplets(nl, nb, rows, np.r_[a.f, a.t], np.r_[ytf, ytt]).tocsr()
    ysh = a.gs + 1j * a.bs
    ybus = sparse_from_triplets(
        nb,
        nb,
        np.r_[a.f, a.f, a.t, a.t, np.arange(nb)],
        np.r_[a.f, a.t, a.f, a.t, np.arange(nb)],
        np.r_[yff, yft, ytf, ytt, ysh],
    ).tocsr()
    return AdmittanceMatrix(G=ybus.real.tocsr(), B=ybus.imag.tocsr(), yf=yf, yt=yt)


def generation_cost(net: Network, p_g: Sequence[float]) -> float:
    """Total $/h for in-service generator outputs ``p_g`` in MW."""
    a = net.arrays
    p = np.asarray(p_g, dtype=float)
    if p.shape != (a.n_gen,):
        raise ValueError(f"expected {a.n_gen} generator outputs, got {p.shape}")
    costs = [net.costs[k] for k in a.gen_index]
    return float(sum(c.a * pk * pk + c.b * pk + c.c for c, pk in zip(costs, p)))


class BranchFlow(NamedTuple):
    p_from: np.ndarray
    q_from: np.ndarray
    s_from: np.ndarray
    p_to: np.ndarray
    q_to: np.ndarray
    s_to: np.ndarray


def branch_flows(net: Network, theta, v, admittance: AdmittanceMatrix | None = None) -> BranchFlow:
    """Flows at both ends of every branch in MW / MVAr / MVA."""
    adm = admittance or build_admittance(net)
    V = np.asarray(v) * np.exp(1j * np.asarray(theta))
    a = net.arrays
    sf = V[a.f] * np.conj(adm.yf @ V) * a.base_mva
    st = V[a.t] * np.conj(adm.yt @ V) * a.base_mva
    return BranchFlow(sf.real, sf.imag, np.abs(sf), st.real, st.imag, np.abs(st))


def branch_flow(net: Network, theta, v, branch: int):
    """(p, q, s) at the from end and at the to end of one branch (0-based)."""
    fl = branch_flows(net, theta, v)
    return (
        (fl.p_from[branch], fl.q_from[branch], fl.s_from[branch]),
        (fl.p_to[branch], fl.q_to[branch], fl.s_to[branch]),
    )
