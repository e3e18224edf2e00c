import math
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import admittance_by_elements
from redispatch_shapley.case_io import load_builtin
from redispatch_shapley.grid_model import (
    Branch,
    Bus,
    BusKind,
    CostCurve,
    Generator,
    Network,
    NetworkError,
    ZeroImpedanceError,
    branch_flow,
    branch_flows,
    build_admittance,
    from_pu,
    generation_cost,
    to_pu,
)
from redispatch_shapley.power_flow import ac_power_flow


def line_net(r=0.0, x=1.0, b=0.0, in_service=True, costs=None, gens=None):
    buses = [Bus(1, BusKind.SLACK), Bus(2, BusKind.PQ, p_load=50.0)]
    gens = gens or [Generator(1, p_max=200.0)]
    costs = costs or [CostCurve(b=10.0) for _ in gens]
    return Network(100.0, buses, [Branch(1, 2, r, x, b, in_service=in_service)], gens, costs)


def test_pure_reactance_two_bus():
    y = build_admittance(line_net())
    np.testing.assert_array_equal(y.G.toarray(), np.zeros((2, 2)))
    np.testing.assert_array_equal(y.B.toarray(), [[-1.0, 1.0], [1.0, -1.0]])


def test_out_of_service_branch_contributes_nothing():
    y = build_admittance(line_net(in_service=False))
    assert abs(y.ybus).sum() == 0


def test_zero_impedance_rejected():
    with pytest.raises(ZeroImpedanceError):
        build_admittance(line_net(x=0.0))


def test_case9_matches_element_assembly(case9):
    y = build_admittance(case9).ybus.toarray()
    assert np.abs(y - admittance_by_elements(case9)).max() < 1e-12


@pytest.mark.parametrize("name", ["case118", "case300", "case1354"])
def test_taps_shifts_shunts_match_element_assembly(name):
    net = load_builtin(name)
    y = build_admittance(net).ybus.toarray()
    assert np.abs(y - admittance_by_elements(net)).max() < 1e-9 * max(1.0, np.abs(y).max())


def test_admittance_is_sum_of_single_branch_parts():
    net = load_builtin("case118")
    total = build_admittance(net).ybus.toarray()
    shunt_only = replace(net, branches=[replace(b, in_service=False) for b in net.branches])
    acc = build_admittance(shunt_only).ybus.toarray()
    for k in range(len(net.branches)):
        single = [replace(b, in_service=(j == k) and b.in_service) for j, b in enumerate(net.branches)]
        no_shunt = [replace(bus, gs=0.0, bs=0.0) for bus in net.buses]
        acc = acc + build_admittance(replace(net, branches=single, buses=no_shunt)).ybus.toarray()
    assert np.abs(acc - total).max() < 1e-10


def test_row_sums_vanish_without_shunts_or_taps():
    net = load_builtin("case9")
    plain = replace(net, branches=[replace(b, b=0.0) for b in net.branches])
    y = build_admittance(plain).ybus
    assert np.abs(np.asarray(y.sum(axis=1))).max() < 1e-12


def test_sparsity_pattern_symmetric(case118):
    y = build_admittance(case118).ybus
    pattern = (abs(y) > 0).astype(int)
    assert (pattern != pattern.T).nnz == 0


def test_generation_cost_constant_terms():
    net = line_net(gens=[Generator(1, p_max=10), Generator(1, p_max=10)], costs=[CostCurve(c=5), CostCurve(c=7)])
    assert generation_cost(net, [0.0, 0.0]) == 12


def test_generation_cost_linear_case9(case9):
    assert generation_cost(case9, [10.0, 10.0, 10.0]) == pytest.approx(750.0, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(
    coeffs=st.lists(
        st.tuples(st.integers(0, 50), st.integers(-100, 100), st.integers(-500, 500), st.integers(0, 400)),
        min_size=1,
        max_size=5,
    )
)
def test_generation_cost_matches_exact_arithmetic(coeffs):
    gens = [Generator(1, p_max=500) for _ in coeffs]
    # integer data keeps every float operation exact, so equality is required
    costs = [CostCurve(a=a, b=b, c=c) for a, b, c, _ in coeffs]
    net = line_net(gens=gens, costs=costs)
    p = [float(q) for *_, q in coeffs]
    exact = sum(Fraction(a) * q * q + b * q + c for a, b, c, q in coeffs)
    assert generation_cost(net, p) == exact


def test_generation_cost_dimension_checked(case9):
    with pytest.raises(ValueError):
        generation_cost(case9, [1.0, 2.0])


def test_equal_angles_lossless_line_carries_nothing():
    (pf, _, _), (pt, _, _) = branch_flow(line_net(), np.zeros(2), np.ones(2), 0)
    assert pf == 0 and pt == 0


def test_flow_matches_hand_formula():
    net = line_net(x=0.1)
    theta = np.array([0.1, 0.0])
    (p, q, s), (p2, q2, s2) = branch_flow(net, theta, np.ones(2), 0)
    # lossless series line: p_ij = v_i v_j sin(θ_ij) / x, q_ij = (v_i² - v_i v_j cos θ_ij) / x
    assert p == pytest.approx(100 * math.sin(0.1) / 0.1, rel=1e-12)
    assert q == pytest.approx(100 * (1 - math.cos(0.1)) / 0.1, rel=1e-12)
    assert s == pytest.approx(math.hypot(p, q), rel=1e-12)
    assert p2 == pytest.approx(-p, rel=1e-12)


def test_flow_general_formula_with_conductance():
    net = line_net(r=0.02, x=0.1)
    v = np.array([1.03, 0.97])
    theta = np.array([0.05, -0.08])
    (p, q, _), _ = branch_flow(net, theta, v, 0)
    y = 1 / complex(0.02, 0.1)
    g, b = y.real, y.imag
    th = theta[0] - theta[1]
    p_hand = v[0] ** 2 * g - v[0] * v[1] * (g * math.cos(th) + b * math.sin(th))
    q_hand = -(v[0] ** 2) * b - v[0] * v[1] * (g * math.sin(th) - b * math.cos(th))
    assert p == pytest.approx(100 * p_hand, rel=1e-12)
    assert q == pytest.approx(100 * q_hand, rel=1e-12)


@settings(max_examples=300, deadline=None)
@given(mw=st.floats(-1e5, 1e5, allow_nan=False), base=st.sampled_from([1.0, 10.0, 100.0, 1000.0, 37.5]))
def test_per_unit_round_trip(mw, base):
    back = from_pu(to_pu(mw, base), base)
    assert back == pytest.approx(mw, rel=1e-12, abs=1e-300)


@pytest.mark.parametrize("name", ["case9", "case39", "case118"])
def test_injections_equal_incident_flows_plus_shunts(name):
    net = load_builtin(name)
    pf = ac_power_flow(net)
    a = net.arrays
    adm = build_admittance(net)
    V = pf.vm * np.exp(1j * pf.theta)
    sbus = V * np.conj(adm.ybus @ V)
    fl = branch_flows(net, pf.theta, pf.vm, adm)
    acc = np.zeros(a.n_bus, dtype=complex)
    np.add.at(acc, a.f, (fl.p_from + 1j * fl.q_from) / a.base_mva)
    np.add.at(acc, a.t, (fl.p_to + 1j * fl.q_to) / a.base_mva)
    acc += np.conj(a.gs + 1j * a.bs) * pf.vm**2
    assert np.abs(acc - sbus).max() < 1e-8


def test_network_validation():
    with pytest.raises(NetworkError):
        Network(100.0, [Bus(1, BusKind.PQ), Bus(2, BusKind.PQ)], [], [], [])
    with pytest.raises(NetworkError):
        Network(100.0, [Bus(1, BusKind.SLACK)], [Branch(1, 3, 0, 0.1)], [], [])
    with pytest.raises(NetworkError):
        Network(100.0, [Bus(1, BusKind.SLACK), Bus(2, BusKind.PQ)], [Branch(1, 1, 0, 0.1)], [], [])
    with pytest.raises(NetworkError):
        line_net(gens=[Generator(1, p_min=5, p_max=1)])
    with pytest.raises(NetworkError):
        line_net(costs=[CostCurve(a=-1.0)])
    with pytest.raises(NetworkError):
        Network(100.0, [Bus(1, BusKind.SLACK, v_min=1.2, v_max=1.1)], [], [], [])


def test_connectivity(case9):
    assert case9.is_connected()
    cut = replace(case9, branches=[replace(b, in_service=False) if k == 0 else b for k, b in enumerate(case9.branches)])
    assert not cut.is_connected()
