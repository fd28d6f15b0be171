import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from qstress.errors import Infeasible, InfeasibleBox
from qstress.network_model import build_model
from qstress.power_flow import linearized_voltages
from qstress.stress_opt import (
    _lp_matrices, build_problem, capacity_fraction, default_reweight_eps, gamma_sweep, polish,
    security_thresholds, solve_sparse_placement, solve_stress_lp, voltage_profile,
)

from .conftest import small_grid, two_bus


@pytest.fixture(scope="module")
def m2():
    return build_model(two_bus())


@pytest.fixture(scope="module")
def problem30(model30, q_load30):
    q_min, q_max = capacity_fraction(q_load30, 0.5)
    return build_problem(model30, q_load30, q_min, q_max)


def grid_oracle(problem, points):
    """Brute-force minimum of the stress over a tensor grid inside the boxes."""
    axes = [np.linspace(lo, hi, points) if hi > lo else np.array([lo])
            for lo, hi in zip(problem.q_min, problem.q_max)]
    grid = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)
    x = -(problem.k_mat @ grid.T)
    ok = np.all((x >= problem.xi_min[:, None] - 1e-12) & (x <= problem.xi_max[:, None] + 1e-12),
                axis=0)
    costs = np.max(np.abs(problem.k_mat @ (problem.q_load[:, None] + grid.T)), axis=0)
    step = max((hi - lo) / (points - 1) for lo, hi in zip(problem.q_min, problem.q_max))
    return (float(np.min(costs[ok])) if np.any(ok) else None), step


def test_thresholds_two_bus(m2):
    lo, hi = security_thresholds(m2, [-0.5], 1.0, 0.05)
    np.testing.assert_allclose([lo[0], hi[0]], [0.3, 0.7], atol=1e-14)


def test_thresholds_case30_finite(problem30):
    assert np.all(np.isfinite(problem30.xi_min)) and np.all(problem30.xi_min < problem30.xi_max)


def test_zero_alpha_band(m2):
    flat = build_problem(m2, [-0.5], [0.0], [1.0], v_nominal=1.0, dev_alpha=1e-12)
    assert flat.xi_max[0] - flat.xi_min[0] == pytest.approx(8e-12, abs=1e-15)


def test_empty_band_rejected(model30, q_load30):
    with pytest.raises(InfeasibleBox):
        build_problem(model30, q_load30, 0.0, 0.0, dev_alpha=-0.01)


def test_box_must_contain_zero(m2):
    with pytest.raises(ValueError):
        build_problem(m2, [-0.5], [0.1], [0.4])


def test_infeasible_two_bus(m2):
    problem = build_problem(m2, [-0.5], *capacity_fraction(np.array([-0.5]), 0.5))
    with pytest.raises(Infeasible) as info:
        solve_stress_lp(problem)
    assert 2 in info.value.report


@pytest.mark.parametrize("q_max, q_opt, cost", [(0.7, 0.5, 0.0), (0.4, 0.4, 0.1)])
def test_two_bus_optimum(m2, q_max, q_opt, cost):
    sol = solve_stress_lp(build_problem(m2, [-0.5], [0.0], [q_max]))
    assert sol.q_opt[0] == pytest.approx(q_opt, abs=1e-8)
    assert sol.cost == pytest.approx(cost, abs=1e-8)
    assert max(sol.kkt.values()) <= 1e-8


def test_polish_empty_support_infeasible(m2):
    with pytest.raises(Infeasible):
        polish(build_problem(m2, [-0.5], [0.0], [0.7]), [])


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("n_load", [1, 2, 3])
def test_grid_oracle_small(seed, n_load):
    rng = np.random.default_rng(100 * n_load + seed)
    case = small_grid(n_load, rng)
    m = build_model(case)
    q_load = case.load_injections()
    problem = build_problem(m, q_load, *capacity_fraction(q_load, rng.uniform(0.3, 1.5)),
                            dev_alpha=0.05)
    best, step = grid_oracle(problem, {1: 2001, 2: 2001, 3: 161}[n_load])
    if best is None:
        # grid found nothing feasible: the LP must either prove infeasibility
        # or land in a sliver thinner than the grid
        try:
            sol = solve_stress_lp(problem)
        except Infeasible:
            return
        assert problem.is_feasible(sol.q_opt)
        return
    sol = solve_stress_lp(problem)
    lipschitz = np.max(np.sum(np.abs(problem.k_mat), axis=1))
    assert sol.cost <= best + 1e-9
    assert best <= sol.cost + lipschitz * step
    assert max(sol.kkt.values()) <= 1e-8


def test_case30_lp(problem30):
    sol = solve_stress_lp(problem30)
    assert max(sol.kkt.values()) <= 1e-8
    assert sol.primal_objective == pytest.approx(sol.dual_objective, rel=1e-8)
    assert problem30.is_feasible(sol.q_opt, tol=1e-8)
    A, b = _lp_matrices(problem30, split=False)
    c = np.zeros(25)
    c[-1] = 1.0
    bounds = list(zip(problem30.q_min, problem30.q_max)) + [(0, None)]
    ref = linprog(c, A_ub=A, b_ub=b, bounds=bounds, method="highs")
    assert sol.cost == pytest.approx(ref.fun, rel=1e-7)


def test_case30_gamma_zero(problem30):
    sol = solve_sparse_placement(problem30, 0.0)
    assert len(sol.support) == 24
    assert np.any(sol.q_opt < 0)
    np.testing.assert_allclose(sol.q_opt, solve_stress_lp(problem30).q_opt)


def test_surrogate_decreases(problem30):
    sol = solve_sparse_placement(problem30, 4e-4)
    h = np.array(sol.surrogate_history)
    assert np.all(np.diff(h) <= 1e-9 * np.maximum(1.0, np.abs(h[:-1])))


def test_reweight_eps_default(problem30, q_load30):
    assert default_reweight_eps(problem30) == pytest.approx(1e-3)


def test_sweep_trends(problem30):
    rows = gamma_sweep(problem30, [0.0, 4e-4, 8e-4])
    sizes = [r.n_devices for r in rows]
    assert sizes[0] == 24 and sizes == sorted(sizes, reverse=True)
    ratios = [r.cost_ratio for r in rows]
    assert all(ratios[0] <= r * (1 + 1e-8) for r in ratios)


def test_sweep_order_preserved(problem30):
    grid = [8e-4, 0.0, 4e-4]
    rows = gamma_sweep(problem30, grid)
    assert [r.gamma for r in rows] == grid
    cold = gamma_sweep(problem30, grid, warm_start=False, workers=3)
    assert [r.gamma for r in cold] == grid
    assert cold[1].n_devices == 24


def test_polish_full_support_equals_lp(problem30):
    full = polish(problem30, range(24))
    assert full.cost == pytest.approx(solve_stress_lp(problem30).cost, rel=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1.0, 1.0), min_size=24, max_size=24))
def test_security_implies_band(problem30, model30, frac):
    q = np.array(frac) * problem30.q_max
    v = linearized_voltages(model30, problem30.q_load + q)
    in_band = np.all((v >= 0.95 / model30.v_open - 1e-8) & (v <= 1.05 / model30.v_open + 1e-8))
    assert in_band == problem30.is_feasible(q)
    np.testing.assert_allclose(voltage_profile(problem30, q), v * model30.v_open)
