import numpy as np
import pytest
from scipy.optimize import linprog

from qstress.lp import phase_one, solve_lp


def random_lp(rng, m, n):
    A = rng.normal(size=(m, n))
    z0 = rng.uniform(-1, 1, n)
    b = A @ z0 + rng.uniform(0.1, 1.0, m)
    lo = np.full(n, -2.0)
    hi = np.where(rng.random(n) < 0.5, 2.0, np.inf)
    c = rng.normal(size=n)
    return c, A, b, lo, hi


@pytest.mark.parametrize("seed", range(8))
def test_matches_highs(seed):
    rng = np.random.default_rng(seed)
    c, A, b, lo, hi = random_lp(rng, 12, 6)
    hi = np.full(6, 3.0)
    res = solve_lp(c, A, b, lo, hi)
    ref = linprog(c, A_ub=A, b_ub=b, bounds=list(zip(lo, hi)), method="highs")
    assert res.status == "optimal"
    assert res.fun == pytest.approx(ref.fun, rel=1e-8, abs=1e-9)
    assert res.dual_objective == pytest.approx(res.fun, rel=1e-8, abs=1e-9)
    # scipy sign convention: c = A^T y + r_lo + r_hi, y <= 0
    np.testing.assert_allclose(A.T @ res.y + res.r_lo + res.r_hi, c, atol=1e-8)
    assert np.all(res.y <= 1e-9) and np.all(res.r_lo >= -1e-9) and np.all(res.r_hi <= 1e-9)


def test_unbounded_above_allowed():
    # min -z1 with z1 <= 1 via a row, no upper bound
    res = solve_lp(np.array([-1.0]), np.array([[1.0]]), np.array([1.0]), np.zeros(1),
                   np.array([np.inf]))
    assert res.z[0] == pytest.approx(1.0, abs=1e-9)


def test_degenerate_returns_interior_of_face():
    # every z with z1 + z2 = 1 on the box is optimal; no crossover means the
    # returned point is the analytic centre, not a vertex
    res = solve_lp(np.array([-1.0, -1.0]), np.array([[1.0, 1.0]]), np.array([1.0]),
                   np.zeros(2), np.ones(2))
    np.testing.assert_allclose(res.z, [0.5, 0.5], atol=1e-6)


def test_infeasible_certificate():
    A = np.array([[1.0], [-1.0]])
    b = np.array([-1.0, -1.0])   # z <= -1 and z >= 1
    res = solve_lp(np.array([1.0]), A, b, np.full(1, -5.0), np.full(1, 5.0))
    assert res.status == "infeasible"
    w = -res.y
    assert np.all(w >= 0) and np.all(w > 0)
    assert phase_one(A, b, np.full(1, -5.0), np.full(1, 5.0)) is not None


def test_lower_bounds_must_be_finite():
    with pytest.raises(ValueError):
        solve_lp(np.ones(1), np.ones((1, 1)), np.ones(1), np.array([-np.inf]), np.ones(1))
