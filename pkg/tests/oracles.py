"""Independent reference computations used only by the tests.

Each oracle takes a deliberately different route from the package code:
plain loops instead of sparse algebra, enumeration instead of optimization.
"""

from __future__ import annotations

import cmath
import itertools
import math

import numpy as np


def dense_gauss_solve(a, b):
    """Gaussian elimination with partial pivoting on Python floats."""
    n = len(b)
    m = [list(map(float, row)) + [float(rhs)] for row, rhs in zip(np.asarray(a), np.asarray(b))]
    for col in range(n):
        piv = max(range(col, n), key=lambda r: abs(m[r][col]))
        if m[piv][col] == 0.0:
            raise ZeroDivisionError("singular")
        m[col], m[piv] = m[piv], m[col]
        for r in range(col + 1, n):
            factor = m[r][col] / m[col][col]
            if factor:
                for c in range(col, n + 1):
                    m[r][c] -= factor * m[col][c]
    x = [0.0] * n
    for r in range(n - 1, -1, -1):
        s = m[r][n] - sum(m[r][c] * x[c] for c in range(r + 1, n))
        x[r] = s / m[r][r]
    return np.array(x)


def admittance_by_elements(net):
    """Bus admittance built branch by branch from the textbook two-port."""
    pos = {b.id: i for i, b in enumerate(net.buses)}
    n = len(net.buses)
    y = [[0j] * n for _ in range(n)]
    for br in net.branches:
        if not br.in_service:
            continue
        i, k = pos[br.from_bus], pos[br.to_bus]
        series = 1 / complex(br.r, br.x)
        charging = 1j * br.b / 2
        ratio = br.tap if br.tap else 1.0
        t = ratio * cmath.exp(1j * math.radians(br.shift))
        y[i][i] += (series + charging) / (abs(t) ** 2)
        y[k][k] += series + charging
        y[i][k] += -series / t.conjugate()
        y[k][i] += -series / t
    for bus in net.buses:
        i = pos[bus.id]
        y[i][i] += complex(bus.gs, bus.bs) / net.base_mva
    return np.array(y)


def shapley_by_permutations(values, n):
    """Average marginal contribution over all n! join orders."""
    total = [0.0] * n
    count = 0
    for order in itertools.permutations(range(n)):
        mask = 0
        for p in order:
            total[p] += values[mask | (1 << p)] - values[mask]
            mask |= 1 << p
        count += 1
    return np.array([t / count for t in total])


def central_difference(fun, x, h=1e-6):
    """Jacobian of ``fun`` by central differences, column by column."""
    f0 = np.asarray(fun(x))
    jac = np.zeros((f0.size, x.size), dtype=f0.dtype)
    for k in range(x.size):
        step = np.zeros_like(x)
        step[k] = h
        jac[:, k] = (np.asarray(fun(x + step)) - np.asarray(fun(x - step))) / (2 * h)
    return jac


def two_bus_ac_balance(v2, th2, x, r=0.0, v1=1.0):
    """Power injected at bus 1 and bus 2 of a single series line (pu)."""
    y = 1 / complex(r, x)
    V1, V2 = v1, v2 * cmath.exp(1j * th2)
    s1 = V1 * ((V1 - V2) * y).conjugate()
    s2 = V2 * ((V2 - V1) * y).conjugate()
    return s1, s2


def dc_dispatch_grid_search(reactances, load_bus, load_mw, costs, limits, step=1.0, p_max=300.0):
    """Cheapest two-generator dispatch on a small DC network by enumeration.

    Generators sit at buses 0 and 1, bus 0 is the reference; ``reactances``
    maps (i, k) to x in pu on a 100 MVA base, ``limits`` maps (i, k) to MW.
    """
    n = 1 + max(max(pair) for pair in reactances)
    b = np.zeros((n, n))
    for (i, k), x in reactances.items():
        b[i, i] += 1 / x
        b[k, k] += 1 / x
        b[i, k] -= 1 / x
        b[k, i] -= 1 / x
    best = (math.inf, None)
    for p0 in np.arange(0.0, min(load_mw, p_max) + step / 2, step):
        p1 = load_mw - p0
        if p1 < 0 or p1 > p_max:
            continue
        inj = np.zeros(n)
        inj[0], inj[1] = p0, p1
        inj[load_bus] -= load_mw
        theta = np.r_[0.0, dense_gauss_solve(b[1:, 1:], inj[1:] / 100.0)]
        ok = all(abs((theta[i] - theta[k]) / reactances[(i, k)] * 100.0) <= lim + 1e-9 for (i, k), lim in limits.items())
        if ok:
            cost = sum(a * p * p + c * p for (a, c), p in zip(costs, (p0, p1)))
            best = min(best, (cost, (p0, p1)), key=lambda t: t[0])
    return best


def two_bus_ac_min_generation(load, x, r, v1=1.0, v_range=(0.9, 1.1), th_range=(-0.5, 0.0), points=2001, rounds=6):
    """Slack injection that serves ``load`` (pu, complex) over one line, by zooming grid search on (v2, θ2)."""
    vlo, vhi = v_range
    tlo, thi = th_range
    best = None
    for _ in range(rounds):
        v2 = np.linspace(vlo, vhi, points)[:, None]
        th2 = np.linspace(tlo, thi, points)[None, :]
        y = 1 / complex(r, x)
        V2 = v2 * np.exp(1j * th2)
        s2 = V2 * np.conj((V2 - v1) * y)
        err = np.abs(s2 + load)
        i, k = np.unravel_index(np.argmin(err), err.shape)
        best = (float(v2[i, 0]), float(th2[0, k]))
        dv, dt = (vhi - vlo) / 20, (thi - tlo) / 20
        vlo, vhi = best[0] - dv, best[0] + dv
        tlo, thi = best[1] - dt, best[1] + dt
    s1, _ = two_bus_ac_balance(best[0], best[1], x, r=r, v1=v1)
    return s1, best
