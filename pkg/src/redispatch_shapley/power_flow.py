"""Market-clearing network solutions with the scheduled dispatch held fixed."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp

from .derivatives import dsbus_dv
from .grid_model import AdmittanceMatrix, BranchFlow, Network, branch_flows, build_admittance
from .numerics import SingularMatrixError, lu_factorize, solve_linear, sparse_from_triplets


class PowerFlowError(RuntimeError):
    pass


class PowerFlowDivergence(PowerFlowError):
    pass


@dataclass
class PowerFlowSolution:
    formulation: str
    theta: np.ndarray  # rad
    vm: np.ndarray
    pg: np.ndarray  # MW, in-service generators
    qg: np.ndarray  # MVAr
    flows: BranchFlow
    iterations: int
    converged: bool
    max_mismatch: float  # pu
    slack_p: float = 0.0  # MW injected at the slack bus
    slack_q: float = 0.0
    mismatch_history: list = field(default_factory=list)

    def loading(self) -> np.ndarray:
        """Per-branch flow magnitude compared against limits (MW for DC, MVA for AC)."""
        if self.formulation == "dc":
            return np.abs(self.flows.p_from)
        return np.maximum(self.flows.s_from, self.flows.s_to)


@dataclass(frozen=True)
class DcModel:
    """Linearized network: Bbus θ = P - pbus_inj, branch flow = Bf θ + pf_inj."""

    bbus: sp.csr_matrix
    bf: sp.csr_matrix
    pbus_inj: np.ndarray
    pf_inj: np.ndarray


def build_dc_model(net: Network) -> DcModel:
    a = net.arrays
    nb, nl = a.n_bus, a.n_branch
    on = a.in_service
    if np.any(on & (a.x == 0)):
        k = int(np.flatnonzero(on & (a.x == 0))[0]) + 1
        raise PowerFlowError(f"branch {k}: zero reactance")
    b = np.zeros(nl)
    b[on] = 1.0 / (a.x[on] * a.ratio[on])
    rows = np.r_[np.arange(nl), np.arange(nl)]
    bf = sparse_from_triplets(nl, nb, rows, np.r_[a.f, a.t], np.r_[b, -b]).tocsr()
    cft = sparse_from_triplets(nl, nb, rows, np.r_[a.f, a.t], np.r_[np.ones(nl), -np.ones(nl)]).tocsr()
    bbus = (cft.T @ bf).tocsr()
    pf_inj = -b * a.shift
    return DcModel(bbus=bbus, bf=bf, pbus_inj=cft.T @ pf_inj, pf_inj=pf_inj)


def dc_power_flow(net: Network, pg_mw: Optional[Sequence[float]] = None) -> PowerFlowSolution:
    """Solve Bbus θ = P with the slack angle at 0; slack generators absorb the balance."""
    a = net.arrays
    model = build_dc_model(net)
    pg = a.pg.copy() if pg_mw is None else np.asarray(pg_mw, float) / a.base_mva
    cg = a.gen_incidence()
    p = cg @ pg - a.p_load - a.gs - model.pbus_inj
    keep = np.r_[a.pv, a.pq].astype(int)
    keep.sort()
    theta = np.zeros(a.n_bus)
    fac = lu_factorize(model.bbus[keep][:, keep])
    try:
        theta[keep] = solve_linear(fac, p[keep])
    except SingularMatrixError as exc:
        raise PowerFlowError("singular B matrix: network is islanded") from exc
    flow = (model.bf @ theta + model.pf_inj) * a.base_mva
    zero = np.zeros_like(flow)
    flows = BranchFlow(flow, zero, np.abs(flow), -flow, zero.copy(), np.abs(flow))
    # slack mismatch assigned to generators at the slack bus
    p_calc = model.bbus @ theta
    slack_p = p_calc[a.slack] + a.p_load[a.slack] + a.gs[a.slack] + model.pbus_inj[a.slack]
    pg = pg.copy()
    at_slack = np.flatnonzero(a.gen_bus == a.slack)
    if at_slack.size:
        pg[at_slack] += (slack_p - pg[at_slack].sum()) / at_slack.size
    resid = model.bbus[keep] @ theta - p[keep]
    sol = PowerFlowSolution(
        formulation="dc",
        theta=theta,
        vm=np.ones(a.n_bus),
        pg=pg * a.base_mva,
        qg=np.zeros(a.n_gen),
        flows=flows,
        iterations=1,
        converged=True,
        max_mismatch=float(np.abs(resid).max()) if resid.size else 0.0,
        slack_p=float(slack_p * a.base_mva),
    )
    return sol


def _distribute_q(a, q_bus, qg_fixed, regulating):
    """Split reactive injections among generators at regulating buses by Q range."""
    qg = qg_fixed.copy()
    for bus in regulating:
        gens = np.flatnonzero(a.gen_bus == bus)
        if gens.size == 0:
            continue
        rng = a.q_max[gens] - a.q_min[gens]
        ok = np.all(np.isfinite(rng) & (rng > 0))
        w = rng / rng.sum() if ok else np.full(gens.size, 1.0 / gens.size)
        qg[gens] = q_bus[bus] * w
    return qg


def ac_power_flow(
    net: Network,
    start: Union[str, Tuple[np.ndarray, np.ndarray]] = "flat",
    tol: float = 1e-8,
    max_iter: int = 30,
    enforce_q_limits: bool = False,
    admittance: Optional[AdmittanceMatrix] = None,
) -> PowerFlowSolution:
    """Newton-Raphson in polar coordinates.

    ``start`` is ``"flat"`` (θ = 0, v = 1 with generator setpoints on regulating
    buses) or a ``(theta, vm)`` pair. Raises :class:`PowerFlowDivergence` when the
    mismatch grows three iterations in a row or the Jacobian is singular.
    """
    a = net.arrays
    adm = admittance or build_admittance(net)
    ybus = adm.ybus
    if isinstance(start, str):
        if start != "flat":
            raise ValueError(f"unknown start {start!r}")
        theta, vm = np.zeros(a.n_bus), np.ones(a.n_bus)
    else:
        theta, vm = (np.array(s, dtype=float) for s in start)
    pv, pq = a.pv.copy(), a.pq.copy()
    qg_fixed = np.zeros(a.n_gen)
    fixed_q_gens = np.zeros(a.n_gen, dtype=bool)

    total_iters = 0
    history: list = []
    while True:
        vm = vm.copy()
        for g, bus in enumerate(a.gen_bus):
            if (bus in pv or bus == a.slack) and not fixed_q_gens[g]:
                vm[bus] = a.v_set[g]
        V = vm * np.exp(1j * theta)
        cg = a.gen_incidence()
        sbus = cg @ (a.pg + 1j * np.where(fixed_q_gens, qg_fixed, 0.0)) - (a.p_load + 1j * a.q_load)
        V, iters, converged, history_k = _newton(ybus, sbus, V, pv, pq, tol, max_iter)
        total_iters += iters
        history += history_k
        if not (enforce_q_limits and converged):
            break
        s = V * np.conj(ybus @ V)
        q_bus = s.imag + a.q_load
        qg = _distribute_q(a, q_bus, qg_fixed, np.r_[pv, [a.slack]])
        over = ~fixed_q_gens & (qg > a.q_max + 1e-9)
        under = ~fixed_q_gens & (qg < a.q_min - 1e-9)
        switch = (over | under) & (a.gen_bus != a.slack) & np.isin(a.gen_bus, pv)
        if not switch.any():
            break
        qg_fixed[over & switch] = a.q_max[over & switch]
        qg_fixed[under & switch] = a.q_min[under & switch]
        fixed_q_gens |= switch
        for bus in np.unique(a.gen_bus[switch]):
            if np.all(fixed_q_gens[a.gen_bus == bus]):
                pv = pv[pv != bus]
                pq = np.sort(np.r_[pq, bus])
        theta, vm = np.angle(V), np.abs(V)

    theta, vm = np.angle(V), np.abs(V)
    s = V * np.conj(ybus @ V)
    mis = s - sbus
    idx_p = np.r_[pv, pq].astype(int)
    max_mis = float(max(np.abs(mis.real[idx_p]).max(initial=0), np.abs(mis.imag[pq.astype(int)]).max(initial=0)))
    pg = a.pg.copy()
    at_slack = np.flatnonzero(a.gen_bus == a.slack)
    p_slack = s.real[a.slack] + a.p_load[a.slack]
    if at_slack.size:
        pg[at_slack] += (p_slack - pg[at_slack].sum()) / at_slack.size
    q_bus = s.imag + a.q_load
    qg = _distribute_q(a, q_bus - cg @ np.where(fixed_q_gens, qg_fixed, 0.0), qg_fixed, np.r_[pv, [a.slack]])
    qg[fixed_q_gens] = qg_fixed[fixed_q_gens]
    sol = PowerFlowSolution(
        formulation="ac",
        theta=theta,
        vm=vm,
        pg=pg * a.base_mva,
        qg=qg * a.base_mva,
        flows=branch_flows(net, theta, vm, adm),
        iterations=total_iters,
        converged=converged,
        max_mismatch=max_mis,
        slack_p=float(p_slack * a.base_mva),
        slack_q=float(q_bus[a.slack] * a.base_mva),
        mismatch_history=history,
    )
    return sol


def _newton(ybus, sbus, V, pv, pq, tol, max_iter):
    pvpq = np.r_[pv, pq].astype(int)
    pq = pq.astype(int)
    npvpq, npq = pvpq.size, pq.size
    va, vm = np.angle(V), np.abs(V)

    def mismatch(V):
        mis = V * np.conj(ybus @ V) - sbus
        return np.r_[mis.real[pvpq], mis.imag[pq]]

    F = mismatch(V)
    norm = float(np.abs(F).max(initial=0.0))
    history = [norm]
    if norm < tol:
        return V, 0, True, history
    growth = 0
    for it in range(1, max_iter + 1):
        ds_dva, ds_dvm = dsbus_dv(ybus, V)
        j11 = ds_dva[pvpq][:, pvpq].real
        j12 = ds_dvm[pvpq][:, pq].real
        j21 = ds_dva[pq][:, pvpq].imag
        j22 = ds_dvm[pq][:, pq].imag
        jac = sp.bmat([[j11, j12], [j21, j22]], format="csc")
        fac = lu_factorize(jac)
        if fac.singular:
            raise PowerFlowDivergence(f"singular Jacobian at iteration {it}")
        dx = -solve_linear(fac, F)
        va[pvpq] += dx[:npvpq]
        vm[pq] += dx[npvpq:npvpq + npq]
        V = vm * np.exp(1j * va)
        va, vm = np.angle(V), np.abs(V)
        F = mismatch(V)
        new_norm = float(np.abs(F).max(initial=0.0))
        history.append(new_norm)
        if not np.isfinite(new_norm):
            raise PowerFlowDivergence(f"non-finite mismatch at iteration {it}")
        if new_norm < tol:
            return V, it, True, history
        growth = growth + 1 if new_norm > norm else 0
        if growth >= 3:
            raise PowerFlowDivergence(f"mismatch grew for 3 consecutive iterations (iteration {it})")
        norm = new_norm
    return V, max_iter, False, history
