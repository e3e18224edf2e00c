"""Primal-dual interior-point method for smooth nonlinear programs.

    minimize f(x)  subject to  g(x) = 0,  h(x) <= 0,  xmin <= x <= xmax

Each iteration solves the condensed Newton system

    [ M   dgᵀ ] [dx]   [-N]
    [ dg   0  ] [dλ] = [-g]

with M = ∇²L + dhᵀ diag(μ/z) dh and N = ∇L + dhᵀ ((μ∘h + γ)/z), then takes
fraction-to-boundary steps in the slacks z and multipliers μ. The barrier
parameter γ follows the average complementarity times a centering factor.

When the main iteration fails, an elastic restoration problem (minimize the
total constraint violation) decides between ``infeasible`` and the failure
status the main loop produced.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .numerics import lu_factorize, solve_linear

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
ITERATION_LIMIT = "iteration_limit"
NUMERICAL_FAILURE = "numerical_failure"

_BIG = 1e10


@dataclass(frozen=True)
class IpmOptions:
    tol_feasibility: float = 1e-8
    tol_stationarity: float = 1e-8
    tol_complementarity: float = 1e-8
    max_iter: int = 150
    step_fraction: float = 0.995
    centering: float = 0.2
    slack_floor: float = 1.0
    restoration: bool = True
    infeasibility_threshold: float = 1e-5
    # fallback when the iteration breaks down short of the tight tolerances
    tol_acceptable: float = 1e-6


@dataclass
class Nlp:
    """Callbacks use row-Jacobians: ``dh`` is (n_ineq × n), ``dg`` is (n_eq × n).

    ``hessian(x, lam, mu)`` returns ∇²f + Σ lam_i ∇²g_i + Σ mu_j ∇²h_j.
    """

    objective: Callable
    constraints: Callable
    hessian: Callable
    xmin: np.ndarray
    xmax: np.ndarray


@dataclass
class IpmResult:
    x: np.ndarray
    f: float
    lam: np.ndarray  # equality multipliers, problem rows only
    mu: np.ndarray  # inequality multipliers, problem rows only
    z: np.ndarray
    mu_lower: np.ndarray  # bound multipliers per variable
    mu_upper: np.ndarray
    status: str
    iterations: int
    residuals: dict
    wall_time: float = 0.0
    state: dict = field(default_factory=dict, repr=False)

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


class _BoundRows:
    """Variable bounds turned into linear rows appended to g and h."""

    def __init__(self, xmin, xmax):
        n = xmin.size
        self.n = n
        fixed = np.isfinite(xmin) & np.isfinite(xmax) & (xmin == xmax)
        lower = np.isfinite(xmin) & (xmin > -_BIG) & ~fixed
        upper = np.isfinite(xmax) & (xmax < _BIG) & ~fixed
        self.fixed = np.flatnonzero(fixed)
        self.lower = np.flatnonzero(lower)
        self.upper = np.flatnonzero(upper)
        self.xmin, self.xmax = xmin, xmax
        nf, nlo, nup = self.fixed.size, self.lower.size, self.upper.size
        self.dg = sp.csr_matrix((np.ones(nf), (np.arange(nf), self.fixed)), shape=(nf, n))
        self.dh = sp.vstack(
            [
                sp.csr_matrix((-np.ones(nlo), (np.arange(nlo), self.lower)), shape=(nlo, n)),
                sp.csr_matrix((np.ones(nup), (np.arange(nup), self.upper)), shape=(nup, n)),
            ],
            format="csr",
        )

    def g(self, x):
        return x[self.fixed] - self.xmin[self.fixed]

    def h(self, x):
        return np.r_[self.xmin[self.lower] - x[self.lower], x[self.upper] - self.xmax[self.upper]]


def _step_length(v, dv, fraction):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return min(fraction * float(np.min(-v[neg] / dv[neg])), 1.0)


def solve_nlp(
    nlp: Nlp,
    x0: np.ndarray,
    options: IpmOptions = IpmOptions(),
    warm: Optional[dict] = None,
) -> IpmResult:
    """Run the interior-point iteration from ``x0``.

    ``warm`` may carry ``lam``, ``mu`` and ``z`` from a previous solve of a
    problem with identical structure; those restart the dual iteration too.
    """
    t0 = time.perf_counter()
    bounds = _BoundRows(nlp.xmin, nlp.xmax)
    x = np.array(x0, dtype=float)
    x[bounds.fixed] = nlp.xmin[bounds.fixed]
    lo, up = np.isfinite(nlp.xmin), np.isfinite(nlp.xmax)
    x[lo] = np.maximum(x[lo], nlp.xmin[lo])
    x[up] = np.minimum(x[up], nlp.xmax[up])

    def evaluate(x):
        f, df = nlp.objective(x)
        hn, gn, dhn, dgn = nlp.constraints(x)
        h = np.r_[hn, bounds.h(x)]
        g = np.r_[gn, bounds.g(x)]
        dh = sp.vstack([sp.csr_matrix(dhn, shape=(hn.size, x.size)), bounds.dh], format="csr")
        dg = sp.vstack([sp.csr_matrix(dgn, shape=(gn.size, x.size)), bounds.dg], format="csr")
        return f, df, h, g, dh, dg, hn.size, gn.size

    f, df, h, g, dh, dg, nh, ng = evaluate(x)
    niq, neq = h.size, g.size
    n = x.size
    sigma, xi = options.centering, options.step_fraction

    if warm is not None and warm.get("z") is not None and warm["z"].size == niq and warm["lam"].size == neq:
        z = np.maximum(warm["z"].copy(), 1e-12)
        mu = np.maximum(warm["mu"].copy(), 1e-12)
        lam = warm["lam"].copy()
        gamma = sigma * float(z @ mu) / max(niq, 1)
    else:
        z = np.maximum(options.slack_floor, -h)
        gamma = 1.0
        mu = gamma / z
        lam = np.zeros(neq)

    def residuals(df, h, g, dh, dg, lam, mu):
        lx = df + dg.T @ lam + dh.T @ mu
        primal = max(float(np.abs(g).max(initial=0.0)), float(np.maximum(h, 0).max(initial=0.0)))
        return {
            "stationarity": float(np.abs(lx).max(initial=0.0)),
            "primal": primal,
            "complementarity": float(np.abs(h * mu).max(initial=0.0)),
        }, lx

    def converged(res):
        return (
            res["primal"] < options.tol_feasibility
            and res["stationarity"] < options.tol_stationarity
            and res["complementarity"] < options.tol_complementarity
        )

    status = ITERATION_LIMIT
    it = 0
    res, lx = residuals(df, h, g, dh, dg, lam, mu)
    if converged(res):
        status = OPTIMAL
    stalls = 0
    best = None
    while status != OPTIMAL and it < options.max_iter:
        it += 1
        lxx = nlp.hessian(x, lam[:ng], mu[:nh])
        zinv = 1.0 / z
        dh_z = dh.T @ sp.diags(mu * zinv)
        m = (lxx + dh_z @ dh).tocsr()
        nvec = lx + dh.T @ (zinv * (mu * h + gamma))
        rhs = np.r_[-nvec, -g]
        step = None
        delta = 0.0
        for _ in range(8):
            kkt = sp.bmat(
                [[m + delta * sp.identity(n), dg.T], [dg, -delta * sp.identity(neq) if neq else None]],
                format="csc",
            )
            fac = lu_factorize(kkt)
            if not fac.singular:
                step = solve_linear(fac, rhs)
                if np.all(np.isfinite(step)):
                    break
                step = None
            delta = 1e-8 if delta == 0 else delta * 100
        if step is None:
            status = NUMERICAL_FAILURE
            break
        dx, dlam = step[:n], step[n:]
        dz = -h - z - dh @ dx
        dmu = -mu + zinv * (gamma - mu * dz)
        alpha_p = _step_length(z, dz, xi)
        alpha_d = _step_length(mu, dmu, xi)
        x = x + alpha_p * dx
        z = z + alpha_p * dz
        lam = lam + alpha_d * dlam
        mu = mu + alpha_d * dmu
        if niq:
            gamma = sigma * float(z @ mu) / niq
        f, df, h, g, dh, dg, _, _ = evaluate(x)
        res, lx = residuals(df, h, g, dh, dg, lam, mu)
        log.debug(
            "it %3d f %.10g primal %.2e stat %.2e comp %.2e gamma %.2e ap %.3f ad %.3f",
            it, f, res["primal"], res["stationarity"], res["complementarity"], gamma, alpha_p, alpha_d,
        )
        if not (np.all(np.isfinite(x)) and np.isfinite(f)):
            status = NUMERICAL_FAILURE
            break
        if converged(res):
            status = OPTIMAL
            break
        worst = max(res.values())
        if worst < options.tol_acceptable and (best is None or worst < best[0]):
            best = (worst, it, x.copy(), z.copy(), lam.copy(), mu.copy(), f, res)
        stalls = stalls + 1 if max(alpha_p, alpha_d) < 1e-10 else 0
        if stalls >= 5:
            status = NUMERICAL_FAILURE
            break
        if max(np.abs(lam).max(initial=0.0), np.abs(mu).max(initial=0.0)) > 1e12:
            # multipliers diverging is the usual symptom of an infeasible program
            status = NUMERICAL_FAILURE
            break

    if status != OPTIMAL and best is not None:
        _, best_it, x, z, lam, mu, f, res = best
        log.info("%s at iteration %d; keeping acceptable iterate %d", status, it, best_it)
        status = OPTIMAL
        it = best_it

    nlo, nup = bounds.lower.size, bounds.upper.size
    mu_bounds = mu[nh:]
    mu_lower = np.zeros(n)
    mu_upper = np.zeros(n)
    mu_lower[bounds.lower] = mu_bounds[:nlo]
    mu_upper[bounds.upper] = mu_bounds[nlo:nlo + nup]
    lam_fixed = lam[ng:]
    mu_lower[bounds.fixed] = np.maximum(-lam_fixed, 0)
    mu_upper[bounds.fixed] = np.maximum(lam_fixed, 0)
    result = IpmResult(
        x=x,
        f=float(f),
        lam=lam[:ng],
        mu=mu[:nh],
        z=z[:nh],
        mu_lower=mu_lower,
        mu_upper=mu_upper,
        status=status,
        iterations=it,
        residuals=res,
        state={"lam": lam, "mu": mu, "z": z},
    )
    if status != OPTIMAL and options.restoration:
        violation = minimum_violation(nlp, x, options)
        result.residuals = dict(res, min_violation=violation)
        if violation > options.infeasibility_threshold:
            result.status = INFEASIBLE
    result.wall_time = time.perf_counter() - t0
    return result


def minimum_violation(nlp: Nlp, x0: np.ndarray, options: IpmOptions) -> float:
    """Smallest achievable total violation of g = 0, h <= 0 within the bounds.

    Solves min Σ(p + q) + Σ t  s.t.  g(x) - p + q = 0,  h(x) - t <= 0,  p, q, t >= 0.
    """
    hn, gn, _, _ = nlp.constraints(x0)
    n, ng, nh = x0.size, gn.size, hn.size
    if ng == 0 and nh == 0:
        return 0.0
    nv = n + 2 * ng + nh

    def split(y):
        return y[:n], y[n:n + ng], y[n + ng:n + 2 * ng], y[n + 2 * ng:]

    def objective(y):
        grad = np.r_[np.zeros(n), np.ones(2 * ng + nh)]
        return float(y[n:].sum()), grad

    def constraints(y):
        x, p, q, t = split(y)
        h, g, dh, dg = nlp.constraints(x)
        eye_g = sp.identity(ng, format="csr")
        eye_h = sp.identity(nh, format="csr")
        dg_e = sp.hstack([sp.csr_matrix(dg, shape=(ng, n)), -eye_g, eye_g, sp.csr_matrix((ng, nh))], format="csr")
        dh_e = sp.hstack([sp.csr_matrix(dh, shape=(nh, n)), sp.csr_matrix((nh, 2 * ng)), -eye_h], format="csr")
        return h - t, g - p + q, dh_e, dg_e

    def hessian(y, lam, mu):
        x = y[:n]
        # curvature of the constraints only; objective is linear
        hx = nlp.hessian(x, lam, mu) - nlp.hessian(x, np.zeros(ng), np.zeros(nh))
        return sp.block_diag([hx, sp.csr_matrix((nv - n, nv - n))], format="csr")

    h0, g0 = hn, gn
    y0 = np.r_[x0, np.maximum(g0, 0) + 1e-3, np.maximum(-g0, 0) + 1e-3, np.maximum(h0, 0) + 1e-3]
    elastic = Nlp(
        objective=objective,
        constraints=constraints,
        hessian=hessian,
        xmin=np.r_[nlp.xmin, np.zeros(2 * ng + nh)],
        xmax=np.r_[nlp.xmax, np.full(2 * ng + nh, np.inf)],
    )
    sub = solve_nlp(elastic, y0, replace(options, restoration=False, max_iter=max(options.max_iter, 200)))
    if sub.status != OPTIMAL:
        log.debug("restoration problem ended with status %s", sub.status)
    return max(sub.f, 0.0)
