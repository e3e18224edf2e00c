"""Cost-minimizing dispatch with a selectable set of enforced line limits.

Both formulations are solved by :mod:`redispatch_shapley.ipm`. Line limits
are enforced only on branches named in the :class:`LimitMask`; branches left
out have no flow constraint at all. Limits apply at both line ends.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

import numpy as np
import scipy.sparse as sp

from . import ipm
from .derivatives import d2abr_dv2, d2sbus_dv2, dabr_dv, dsbr_dv, dsbus_dv
from .grid_model import BranchFlow, Network, branch_flows, build_admittance, generation_cost
from .power_flow import build_dc_model

OPTIMAL = ipm.OPTIMAL

# linear cost nudge per generator position ($/MWh) so DC optima are unique
DC_TIE_BREAK = 1e-9


class OpfFailure(RuntimeError):
    def __init__(self, message: str, status: str):
        super().__init__(message)
        self.status = status


@dataclass(frozen=True)
class LimitMask:
    """0-based branch indices whose flow limit is enforced."""

    enforced: frozenset

    def __init__(self, enforced: Iterable[int] = ()):
        object.__setattr__(self, "enforced", frozenset(int(k) for k in enforced))

    @classmethod
    def all_limits(cls, net: Network) -> "LimitMask":
        return cls(k for k, br in enumerate(net.branches) if br.limited)

    @classmethod
    def none(cls) -> "LimitMask":
        return cls()

    def without(self, branches: Iterable[int]) -> "LimitMask":
        return LimitMask(self.enforced - set(branches))

    def with_(self, branches: Iterable[int]) -> "LimitMask":
        return LimitMask(self.enforced | set(branches))

    def rows(self, net: Network) -> np.ndarray:
        """Sorted branch indices that actually get a constraint row."""
        a = net.arrays
        idx = np.array(sorted(self.enforced), dtype=int)
        if idx.size and (idx.min() < 0 or idx.max() >= a.n_branch):
            raise IndexError("limit mask references a missing branch")
        return idx[(a.rate[idx] > 0) & a.in_service[idx]] if idx.size else idx


@dataclass(frozen=True)
class OpfProblem:
    net: Network
    mask: LimitMask
    formulation: str = "ac"
    reference_angle: float = 0.0  # rad

    def __post_init__(self):
        if self.formulation not in ("ac", "dc"):
            raise ValueError(f"formulation must be 'ac' or 'dc', got {self.formulation!r}")


@dataclass
class OpfSolution:
    formulation: str
    status: str
    objective: float  # $/h
    theta: np.ndarray  # rad
    vm: np.ndarray
    pg: np.ndarray  # MW, in-service generators
    qg: np.ndarray  # MVAr
    flows: BranchFlow
    price_p: np.ndarray  # $/MWh at each bus
    price_q: np.ndarray
    kkt: dict
    iterations: int
    wall_time: float
    x: np.ndarray = field(repr=False)
    dual_state: dict = field(default_factory=dict, repr=False)
    mask: LimitMask = field(default_factory=LimitMask)

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL

    def loading(self) -> np.ndarray:
        if self.formulation == "dc":
            return np.abs(self.flows.p_from)
        return np.maximum(self.flows.s_from, self.flows.s_to)


def cost_scale(net: Network) -> float:
    """Objective divisor that brings marginal costs (per pu) to order one."""
    a = net.arrays
    marg = np.abs(a.cost_b) + 2 * a.cost_a * np.maximum(np.abs(a.p_max), 1.0)
    return float(max(marg.max(initial=1.0), 1.0))


def _angle_rows(a):
    """Branches with a meaningful angle-difference window."""
    lim = a.in_service & ((a.ang_min > -np.pi * 2) | (a.ang_max < np.pi * 2))
    lim &= ~((a.ang_min == 0) & (a.ang_max == 0))
    return np.flatnonzero(lim)


def _angle_constraint(a, nx, offset=0):
    """Rows for θf - θt <= angmax and angmin <= θf - θt."""
    idx = _angle_rows(a)
    k = idx.size
    rows = np.r_[np.arange(k), np.arange(k)]
    cols = offset + np.r_[a.f[idx], a.t[idx]]
    d = sp.csr_matrix((np.r_[np.ones(k), -np.ones(k)], (rows, cols)), shape=(k, nx))
    lo = np.where(a.ang_min[idx] > -2 * np.pi, a.ang_min[idx], -np.inf)
    hi = np.where(a.ang_max[idx] < 2 * np.pi, a.ang_max[idx], np.inf)
    up_rows = np.flatnonzero(np.isfinite(hi))
    lo_rows = np.flatnonzero(np.isfinite(lo))
    amat = sp.vstack([d[up_rows], -d[lo_rows]], format="csr")
    bvec = np.r_[hi[up_rows], -lo[lo_rows]]
    return amat, bvec


def _initial_point(xmin, xmax, angle_slice, ref_angle):
    lo = np.where(np.isfinite(xmin) & (xmin > -1e10), xmin, -1e10)
    hi = np.where(np.isfinite(xmax) & (xmax < 1e10), xmax, 1e10)
    x0 = 0.5 * (lo + hi)
    x0[angle_slice] = ref_angle
    return x0


def _resolve_start(start, problem, x_flat, layout_size):
    """Pick x0 and optional dual state from ``start``."""
    if start is None or (isinstance(start, str) and start == "flat"):
        return x_flat, None
    if isinstance(start, OpfSolution):
        if start.formulation != problem.formulation or start.x.size != layout_size:
            return x_flat, None
        warm = start.dual_state if start.mask == problem.mask and start.ok else None
        return start.x.copy(), warm
    if isinstance(start, np.ndarray):
        return start.copy(), None
    raise ValueError(f"unsupported start {start!r}")


def _finish(problem, res, theta, vm, pg_pu, qg_pu, price_p, price_q, t0, dual_state):
    net = problem.net
    a = net.arrays
    flows = branch_flows(net, theta, vm)
    if problem.formulation == "dc":
        model = build_dc_model(net)
        p = (model.bf @ theta + model.pf_inj) * a.base_mva
        zero = np.zeros_like(p)
        flows = BranchFlow(p, zero, np.abs(p), -p, zero.copy(), np.abs(p))
    pg = pg_pu * a.base_mva
    return OpfSolution(
        formulation=problem.formulation,
        status=res.status,
        objective=generation_cost(net, pg),
        theta=theta,
        vm=vm,
        pg=pg,
        qg=qg_pu * a.base_mva,
        flows=flows,
        price_p=price_p,
        price_q=price_q,
        kkt=dict(res.residuals),
        iterations=res.iterations,
        wall_time=time.perf_counter() - t0,
        x=res.x,
        dual_state=dual_state,
        mask=problem.mask,
    )


def solve_dc_opf(
    problem: OpfProblem,
    start: Union[str, OpfSolution, np.ndarray, None] = "flat",
    options: ipm.IpmOptions = ipm.IpmOptions(),
) -> OpfSolution:
    """B-θ DC OPF; variables are bus angles then generator outputs (pu)."""
    t0 = time.perf_counter()
    net = problem.net
    a = net.arrays
    nb, ng = a.n_bus, a.n_gen
    nx = nb + ng
    model = build_dc_model(net)
    scale = cost_scale(net)
    tie = DC_TIE_BREAK * np.arange(ng) * a.base_mva
    qa, qb = a.cost_a / scale, (a.cost_b + tie) / scale
    cg = a.gen_incidence()

    geq = sp.hstack([model.bbus, -cg], format="csr")
    beq = -(a.p_load + a.gs + model.pbus_inj)
    rows = problem.mask.rows(net)
    bf = model.bf[rows]
    pf_inj = model.pf_inj[rows]
    rate = a.rate[rows]
    flow_rows = sp.hstack([bf, sp.csr_matrix((rows.size, ng))], format="csr")
    ang_a, ang_b = _angle_constraint(a, nx)
    aineq = sp.vstack([flow_rows, -flow_rows, ang_a], format="csr")
    bineq = np.r_[rate - pf_inj, rate + pf_inj, ang_b]
    hess = sp.block_diag([sp.csr_matrix((nb, nb)), sp.diags(2 * qa)], format="csr")

    def objective(x):
        pg = x[nb:]
        return float(qa @ (pg * pg) + qb @ pg), np.r_[np.zeros(nb), 2 * qa * pg + qb]

    def constraints(x):
        return aineq @ x - bineq, geq @ x - beq, aineq, geq

    xmin = np.r_[np.full(nb, -np.inf), a.p_min]
    xmax = np.r_[np.full(nb, np.inf), a.p_max]
    xmin[a.slack] = xmax[a.slack] = problem.reference_angle
    nlp = ipm.Nlp(objective, constraints, lambda x, lam, mu: hess, xmin, xmax)
    x0, warm = _resolve_start(start, problem, _initial_point(xmin, xmax, slice(0, nb), problem.reference_angle), nx)
    res = ipm.solve_nlp(nlp, x0, options, warm=warm)
    theta, pg = res.x[:nb], res.x[nb:]
    price = res.lam * scale / a.base_mva
    return _finish(problem, res, theta, np.ones(nb), pg, np.zeros(ng), price, np.zeros(nb), t0, res.state)


class AcModel:
    """Callbacks of the polar AC OPF; variables (θ, v, p, q) in pu."""

    def __init__(self, problem: OpfProblem):
        net = problem.net
        self.a = a = net.arrays
        self.nb, self.ng = a.n_bus, a.n_gen
        self.nx = 2 * self.nb + 2 * self.ng
        adm = build_admittance(net)
        self.ybus = adm.ybus.tocsr()
        self.rows = rows = problem.mask.rows(net)
        nl = rows.size
        self.yf = adm.yf[rows].tocsr()
        self.yt = adm.yt[rows].tocsr()
        self.cf = sp.csr_matrix((np.ones(nl), (np.arange(nl), a.f[rows])), shape=(nl, self.nb))
        self.ct = sp.csr_matrix((np.ones(nl), (np.arange(nl), a.t[rows])), shape=(nl, self.nb))
        self.flow_max2 = a.rate[rows] ** 2
        self.cg = a.gen_incidence().tocsr()
        self.scale = cost_scale(net)
        self.qa, self.qb, self.qc = a.cost_a / self.scale, a.cost_b / self.scale, a.cost_c / self.scale
        self.ang_a, self.ang_b = _angle_constraint(a, self.nx)
        self.sd = a.p_load + 1j * a.q_load

    def split(self, x):
        nb, ng = self.nb, self.ng
        return x[:nb], x[nb:2 * nb], x[2 * nb:2 * nb + ng], x[2 * nb + ng:]

    def voltage(self, x):
        va, vm, _, _ = self.split(x)
        return vm * np.exp(1j * va)

    def objective(self, x):
        _, _, pg, _ = self.split(x)
        f = float(self.qa @ (pg * pg) + self.qb @ pg + self.qc.sum())
        grad = np.zeros(self.nx)
        grad[2 * self.nb:2 * self.nb + self.ng] = 2 * self.qa * pg + self.qb
        return f, grad

    def constraints(self, x):
        nb, ng = self.nb, self.ng
        V = self.voltage(x)
        _, _, pg, qg = self.split(x)
        mis = V * np.conj(self.ybus @ V) + self.sd - self.cg @ (pg + 1j * qg)
        g = np.r_[mis.real, mis.imag]
        sa, sm = dsbus_dv(self.ybus, V)
        zero = sp.csr_matrix((nb, ng))
        dg = sp.vstack(
            [
                sp.hstack([sa.real, sm.real, -self.cg, zero]),
                sp.hstack([sa.imag, sm.imag, zero, -self.cg]),
            ],
            format="csr",
        )
        if self.rows.size:
            fa, fm, sf = dsbr_dv(self.yf, self.cf, V)
            ta, tm, st = dsbr_dv(self.yt, self.ct, V)
            afa, afm = dabr_dv(fa, fm, sf)
            ata, atm = dabr_dv(ta, tm, st)
            zl = sp.csr_matrix((self.rows.size, 2 * ng))
            dh_flow = sp.vstack([sp.hstack([afa, afm, zl]), sp.hstack([ata, atm, zl])], format="csr")
            h_flow = np.r_[np.abs(sf) ** 2 - self.flow_max2, np.abs(st) ** 2 - self.flow_max2]
        else:
            dh_flow = sp.csr_matrix((0, self.nx))
            h_flow = np.zeros(0)
        h = np.r_[h_flow, self.ang_a @ x - self.ang_b]
        dh = sp.vstack([dh_flow, self.ang_a], format="csr")
        return h, g, dh, dg

    def hessian(self, x, lam, mu):
        nb, ng = self.nb, self.ng
        V = self.voltage(x)
        lam_p, lam_q = lam[:nb], lam[nb:2 * nb]
        paa, pav, pva, pvv = d2sbus_dv2(self.ybus, V, lam_p)
        qaa, qav, qva, qvv = d2sbus_dv2(self.ybus, V, lam_q)
        haa = paa.real + qaa.imag
        hav = pav.real + qav.imag
        hva = pva.real + qva.imag
        hvv = pvv.real + qvv.imag
        nl = self.rows.size
        if nl:
            mu_f, mu_t = mu[:nl], mu[nl:2 * nl]
            fa, fm, sf = dsbr_dv(self.yf, self.cf, V)
            ta, tm, st = dsbr_dv(self.yt, self.ct, V)
            faa, fav, fva, fvv = d2abr_dv2(fa, fm, sf, self.cf, self.yf, V, mu_f)
            taa, tav, tva, tvv = d2abr_dv2(ta, tm, st, self.ct, self.yt, V, mu_t)
            haa, hav, hva, hvv = haa + faa + taa, hav + fav + tav, hva + fva + tva, hvv + fvv + tvv
        hv = sp.bmat([[haa, hav], [hva, hvv]], format="csr")
        hp = sp.diags(2 * self.qa)
        return sp.block_diag([hv, hp, sp.csr_matrix((ng, ng))], format="csr")

    def bounds(self, reference_angle):
        a = self.a
        nb = self.nb
        xmin = np.r_[np.full(nb, -np.inf), a.v_min, a.p_min, a.q_min]
        xmax = np.r_[np.full(nb, np.inf), a.v_max, a.p_max, a.q_max]
        xmin[a.slack] = xmax[a.slack] = reference_angle
        return xmin, xmax


def solve_ac_opf(
    problem: OpfProblem,
    start: Union[str, OpfSolution, np.ndarray, None] = "flat",
    options: ipm.IpmOptions = ipm.IpmOptions(),
    pf_solution=None,
) -> OpfSolution:
    """Polar AC OPF.

    ``start`` is ``"flat"`` (angles at the reference, every other variable at
    the middle of its bounds), ``"pf_warm"`` (voltages of ``pf_solution``), a
    previous :class:`OpfSolution` or a raw variable vector.
    """
    t0 = time.perf_counter()
    if problem.formulation != "ac":
        raise ValueError("solve_ac_opf needs an 'ac' problem")
    model = AcModel(problem)
    a, nb = model.a, model.nb
    xmin, xmax = model.bounds(problem.reference_angle)
    x_flat = _initial_point(xmin, xmax, slice(0, nb), problem.reference_angle)
    if isinstance(start, str) and start == "pf_warm":
        if pf_solution is None:
            raise ValueError("pf_warm start needs pf_solution")
        x0 = x_flat.copy()
        x0[:nb] = pf_solution.theta - pf_solution.theta[a.slack] + problem.reference_angle
        x0[nb:2 * nb] = pf_solution.vm
        warm = None
    else:
        x0, warm = _resolve_start(start, problem, x_flat, model.nx)
    nlp = ipm.Nlp(model.objective, model.constraints, model.hessian, xmin, xmax)
    res = ipm.solve_nlp(nlp, x0, options, warm=warm)
    va, vm, pg, qg = model.split(res.x)
    price_p = res.lam[:nb] * model.scale / a.base_mva
    price_q = res.lam[nb:2 * nb] * model.scale / a.base_mva
    return _finish(problem, res, va, vm, pg, qg, price_p, price_q, t0, res.state)


def solve_opf(problem: OpfProblem, start=None, options: ipm.IpmOptions = ipm.IpmOptions()) -> OpfSolution:
    start = "flat" if start is None else start
    if problem.formulation == "dc":
        return solve_dc_opf(problem, start, options)
    return solve_ac_opf(problem, start, options)


def check_ac_feasibility(net: Network, theta, vm, pg_mw, qg_mvar=None, mask: Optional[LimitMask] = None) -> dict:
    """Worst AC violations of a candidate operating point (pu).

    With ``qg_mvar=None`` each bus's reactive output is chosen within its
    bounds to best cover the reactive balance, so the reported reactive
    mismatch is the smallest achievable one for the given voltages.
    """
    a = net.arrays
    adm = build_admittance(net)
    V = np.asarray(vm) * np.exp(1j * np.asarray(theta))
    s = V * np.conj(adm.ybus @ V)
    cg = a.gen_incidence()
    p_mis = s.real + a.p_load - cg @ (np.asarray(pg_mw) / a.base_mva)
    need_q = s.imag + a.q_load
    if qg_mvar is None:
        qmin_bus = cg @ a.q_min
        qmax_bus = cg @ a.q_max
        q_mis = need_q - np.clip(need_q, qmin_bus, qmax_bus)
    else:
        q_mis = need_q - cg @ (np.asarray(qg_mvar) / a.base_mva)
    fl = branch_flows(net, theta, vm, adm)
    rows = (mask or LimitMask.all_limits(net)).rows(net)
    rate = a.rate[rows] * a.base_mva
    over = np.maximum(np.maximum(fl.s_from[rows], fl.s_to[rows]) - rate, 0.0)
    return {
        "p_balance": float(np.abs(p_mis).max()),
        "q_balance": float(np.abs(q_mis).max()),
        "flow_limit": float(over.max(initial=0.0)) / a.base_mva,
        "voltage": float(np.maximum(np.maximum(a.v_min - vm, vm - a.v_max), 0).max()),
    }
