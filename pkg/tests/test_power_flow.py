import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qstress.errors import NotConverged
from qstress.network_model import build_model, collapse_margin
from qstress.power_flow import (
    find_nose_tip, linearized_voltages, nose_curve, rpfe_residual, solve_coupled_pf, solve_rpfe,
)

from .conftest import quiet_model, two_bus


def high_root(q_l, q_crit):
    return 0.5 + 0.5 * math.sqrt(1.0 - q_l / q_crit)


def test_rpfe_open_circuit(model30):
    sol = solve_rpfe(model30, np.zeros(model30.n_load))
    assert sol.iterations <= 1
    np.testing.assert_array_equal(sol.v_norm, 1.0)


def test_rpfe_two_bus_closed_form():
    m = build_model(two_bus())
    sol = solve_rpfe(m, [-0.5])
    assert sol.converged
    assert sol.v_norm[0] == pytest.approx(0.5 + 0.5 * math.sqrt(0.5), abs=1e-12)


def test_rpfe_beyond_collapse():
    m = build_model(two_bus())
    with pytest.raises(NotConverged) as info:
        solve_rpfe(m, [-1.2])
    assert info.value.solution is not None and not info.value.solution.converged
    assert not solve_rpfe(m, [-1.2], raise_on_fail=False).converged


def test_linearized_values():
    m = build_model(two_bus())
    assert linearized_voltages(m, [-0.5])[0] == pytest.approx(0.875, abs=1e-15)
    assert linearized_voltages(m, [0.0])[0] == 1.0


def test_linearized_superposition(model30, rng):
    a, b = rng.normal(size=(2, model30.n_load)) * 0.1
    np.testing.assert_allclose(
        linearized_voltages(model30, a) + linearized_voltages(model30, b) - 1.0,
        linearized_voltages(model30, a + b), atol=1e-13)


@pytest.mark.parametrize("shunt, tip, v_tip", [(0.0, 1.0, 0.5), (2.4, 2.5, 1.25)])
def test_nose_tip_two_bus(shunt, tip, v_tip):
    m = build_model(two_bus(shunt=shunt))
    curve = nose_curve(m, [-1.0], steps=20)
    # at the tip itself the double root is only resolved to sqrt(tolerance)
    assert curve.tip_scale == pytest.approx(tip, rel=1e-6)
    assert curve.tip.v_load[0] == pytest.approx(v_tip, rel=2e-3)
    assert curve.points[0].high.v_norm[0] == 1.0
    highs = [p.high.v_norm[0] for p in curve.points]
    assert np.all(np.diff(highs) < 0) and min(highs) >= 0.5 - 1e-9
    for p in curve.points[:-1]:
        assert p.low.v_norm[0] <= p.high.v_norm[0] + 1e-9
        assert p.high.v_norm[0] == pytest.approx(
            high_root(-p.scale, m.q_crit[0, 0]), abs=1e-9)


def test_nose_tip_brute_force_sweep():
    # smallest scale on a fine grid at which the scalar quadratic loses real roots
    m = build_model(two_bus(shunt=2.4))
    scales = np.linspace(0, 4, 40001)
    disc = 1.0 - scales * (-1.0) / m.q_crit[0, 0]
    brute = scales[np.flatnonzero(disc < 0)[0] - 1]
    assert find_nose_tip(m, [-1.0])[0] == pytest.approx(brute, abs=1e-4)


def test_coupled_flat_no_load(case30, model30):
    from dataclasses import replace
    flat = replace(case30,
                   buses=tuple(replace(b, p_demand=0.0, q_demand=0.0, v_setpoint=1.0,
                                       shunt_b=0.0) for b in case30.buses),
                   branches=tuple(replace(br, charging_b=0.0) for br in case30.branches),
                   gens=tuple(replace(g, p_gen=0.0) for g in case30.gens))
    m = quiet_model(flat)
    sol = solve_coupled_pf(flat, m)
    np.testing.assert_allclose(sol.theta, 0.0, atol=1e-12)
    np.testing.assert_allclose(sol.v_load, 1.0, atol=1e-12)
    assert sol.residual < 1e-10


def test_coupled_two_bus_matches_decoupled():
    case = two_bus()
    m = build_model(case)
    sol = solve_coupled_pf(case, m)
    assert sol.v_load[0] == pytest.approx(solve_rpfe(m, [-0.5]).v_load[0], abs=1e-9)
    np.testing.assert_allclose(sol.q_load_bus, [-0.5], atol=1e-10)


def test_coupled_decoupling_consistency_case30(case30, model30, q_load30):
    from dataclasses import replace
    no_p = replace(case30, buses=tuple(replace(b, p_demand=0.0) for b in case30.buses),
                   gens=tuple(replace(g, p_gen=0.0) for g in case30.gens))
    sol = solve_coupled_pf(no_p, model30)
    np.testing.assert_allclose(sol.v_load, solve_rpfe(model30, q_load30).v_load, atol=1e-8)


def test_coupled_warm_start_agrees(case30, model30):
    cold = solve_coupled_pf(case30, model30)
    warm = solve_coupled_pf(case30, model30, init=cold)
    assert warm.iterations <= 1
    np.testing.assert_allclose(warm.v, cold.v, atol=1e-10)


def test_coupled_not_converged(case30, model30, q_load30):
    with pytest.raises(NotConverged):
        solve_coupled_pf(case30, model30, q_load=30.0 * q_load30)


def test_linearization_second_order():
    m = build_model(two_bus())
    gaps = [np.max(np.abs(solve_rpfe(m, [-e]).v_norm - linearized_voltages(m, [-e])))
            for e in (0.1, 0.05, 0.025)]
    assert gaps[0] / gaps[1] >= 3.5 and gaps[1] / gaps[2] >= 3.5


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.0, 3.0), min_size=24, max_size=24))
def test_solvable_when_margin_below_one(model30, q_load30, scale):
    q = np.array(scale) * q_load30
    if collapse_margin(model30, q) < 1.0:
        sol = solve_rpfe(model30, q)
        assert np.max(np.abs(rpfe_residual(model30, sol.v_norm, q))) < 1e-10
