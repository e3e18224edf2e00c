import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import two_bus_ac_balance
from redispatch_shapley.case_io import CASE_FILES, load_builtin
from redispatch_shapley.grid_model import Branch, Bus, BusKind, CostCurve, Generator, Network
from redispatch_shapley.power_flow import (
    PowerFlowDivergence,
    PowerFlowError,
    ac_power_flow,
    dc_power_flow,
)


def two_bus_net(load_mw=100.0, q_mvar=0.0, r=0.0, x=0.1):
    buses = [Bus(1, BusKind.SLACK), Bus(2, BusKind.PQ, p_load=load_mw, q_load=q_mvar)]
    return Network(100.0, buses, [Branch(1, 2, r, x, 0.0)], [Generator(1, p_max=500.0)], [CostCurve(b=10.0)])


def test_zero_injection_dc():
    net = replace(two_bus_net(load_mw=0.0))
    pf = dc_power_flow(net)
    assert np.all(pf.theta == 0) and np.all(pf.flows.p_from == 0)


def test_two_bus_dc_ohm_analog():
    pf = dc_power_flow(two_bus_net())
    assert pf.theta[1] == pytest.approx(-0.1, abs=1e-15)
    assert pf.flows.p_from[0] == pytest.approx(100.0, abs=1e-12)
    assert pf.slack_p == pytest.approx(100.0, abs=1e-12)


def test_dc_solution_has_flat_voltage_no_reactive(case9):
    pf = dc_power_flow(case9)
    assert np.all(pf.vm == 1) and np.all(pf.qg == 0)
    assert np.all(pf.flows.q_from == 0)


def test_case9_dc_base_dispatch(case9):
    pf = dc_power_flow(case9)
    assert pf.pg[0] == pytest.approx(315.0, abs=1e-9)
    assert pf.flows.p_from[0] == pytest.approx(315.0, abs=1e-9)
    limits = np.array([b.rate_a for b in case9.branches[:2]])
    overload = np.abs(pf.flows.p_from[:2]) - limits
    np.testing.assert_allclose(overload, [245.0, 100.2], atol=0.05)


def test_dc_injections_sum_to_zero(case118):
    pf = dc_power_flow(case118)
    a = case118.arrays
    total = pf.pg.sum() / a.base_mva - a.p_load.sum() - a.gs.sum()
    assert abs(total) < 1e-9


def test_dc_islanded_network_rejected(case9):
    cut = replace(case9, branches=[replace(b, in_service=False) if k == 0 else b for k, b in enumerate(case9.branches)])
    with pytest.raises(PowerFlowError):
        dc_power_flow(cut)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_dc_superposition(seed):
    case118 = load_builtin("case118")
    rng = np.random.default_rng(seed)
    ng = len(case118.generators)
    p1, p2 = rng.uniform(0, 100, ng), rng.uniform(0, 100, ng)
    no_load = replace(case118, buses=[replace(b, p_load=0.0, gs=0.0) for b in case118.buses])
    f1 = dc_power_flow(no_load, p1).flows.p_from
    f2 = dc_power_flow(no_load, p2).flows.p_from
    f12 = dc_power_flow(no_load, p1 + p2).flows.p_from
    assert np.abs(f12 - f1 - f2).max() < 1e-10 * max(1.0, np.abs(f12).max())


def test_slack_only_network():
    net = Network(100.0, [Bus(1, BusKind.SLACK)], [], [Generator(1, p_max=10.0)], [CostCurve()])
    pf = ac_power_flow(net)
    assert pf.converged and pf.iterations == 0
    assert pf.vm[0] == 1.0 and pf.theta[0] == 0.0


def test_two_bus_ac_residual_oracle():
    net = two_bus_net(load_mw=100.0, q_mvar=20.0, r=0.01, x=0.1)
    pf = ac_power_flow(net)
    assert pf.converged
    s1, s2 = two_bus_ac_balance(pf.vm[1], pf.theta[1], 0.1, r=0.01)
    assert abs(s2 - complex(-1.0, -0.2)) < 1e-8
    assert abs(s1 - complex(pf.slack_p, pf.slack_q) / 100) < 1e-8


def test_case9_ac_base_dispatch(case9):
    pf = ac_power_flow(case9)
    assert pf.converged
    limits = np.array([b.rate_a for b in case9.branches[:2]])
    overload = pf.loading()[:2] - limits
    # losses push line 1 a little above the lossless figure
    assert overload[0] > 245.0 and overload[1] > 100.0


@pytest.mark.parametrize("name", list(CASE_FILES))
def test_losses_balance(name):
    net = load_builtin(name)
    pf = ac_power_flow(net)
    assert pf.converged and pf.max_mismatch < 1e-8
    a = net.arrays
    losses = (pf.flows.p_from + pf.flows.p_to).sum() / a.base_mva
    shunt = (a.gs * pf.vm**2).sum()
    gen = pf.pg.sum() / a.base_mva
    assert abs(gen - a.p_load.sum() - shunt - losses) < 1e-6


@pytest.mark.parametrize("name", ["case9", "case39"])
def test_quadratic_convergence(name):
    hist = ac_power_flow(load_builtin(name)).mismatch_history
    assert len(hist) >= 3
    m = hist[-3:]
    # error ratio e_{k+1}/e_k² stays bounded over the last two steps
    assert m[2] <= 10.0 * m[1] ** 2 or m[2] < 1e-12
    assert m[1] < m[0]


def test_warm_start_from_solution_needs_no_iterations(case39):
    pf = ac_power_flow(case39)
    again = ac_power_flow(case39, start=(pf.theta, pf.vm))
    assert again.iterations <= 1
    np.testing.assert_allclose(again.vm, pf.vm, atol=1e-9)


def test_impossible_transfer_never_reports_convergence():
    try:
        pf = ac_power_flow(two_bus_net(load_mw=2000.0, x=0.5))
    except PowerFlowDivergence:
        return
    assert not pf.converged and pf.max_mismatch > 1.0


def test_divergence_raised_on_singular_jacobian():
    # the only line is open, so the load bus has no coupling to the rest
    buses = [Bus(1, BusKind.SLACK), Bus(2, BusKind.PQ, p_load=10.0)]
    net = Network(100.0, buses, [Branch(1, 2, 0.0, 0.1, 0.0, in_service=False)], [Generator(1)], [CostCurve()])
    with pytest.raises(PowerFlowDivergence):
        ac_power_flow(net)


def test_iteration_cap_reports_unconverged(case118):
    pf = ac_power_flow(case118, max_iter=1)
    assert not pf.converged and pf.iterations == 1


def test_q_limit_switching_keeps_generators_inside(case39):
    pf = ac_power_flow(case39, enforce_q_limits=True)
    a = case39.arrays
    regulating = ~np.isin(a.gen_bus, [a.slack])
    q = pf.qg / a.base_mva
    assert np.all(q[regulating] <= a.q_max[regulating] + 1e-6)
    assert np.all(q[regulating] >= a.q_min[regulating] - 1e-6)
    assert pf.converged


def test_unknown_start_rejected(case9):
    with pytest.raises(ValueError):
        ac_power_flow(case9, start="hot")


def test_ac_dc_angles_agree_for_light_lossless_flow():
    net = two_bus_net(load_mw=1.0)
    ac = ac_power_flow(net)
    dc = dc_power_flow(net)
    assert ac.theta[1] == pytest.approx(dc.theta[1], rel=1e-3)
    assert math.isclose(ac.flows.p_from[0], 1.0, rel_tol=1e-9)
