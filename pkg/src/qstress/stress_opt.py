"""Centralized stress minimization and sparse compensator placement.

With ``K = Q_crit^{-1}`` the convex stress problem is

    minimize    ||K (Q_L + q)||_inf
    subject to  xi_min <= -K q <= xi_max,   q_min <= q <= q_max,

solved in epigraph form as a linear program. Sparse placement adds a
reweighted l1 penalty ``gamma * sum_h w_h |q_h|`` with
``w_h = 1 / (|q_h| + eps)`` refreshed between rounds, followed by a polishing
solve restricted to the selected support.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import Infeasible, InfeasibleBox, InternalError, SingularSystem
from .lp import LPFailure, solve_lp
from .network_model import NetworkModel
from .power_flow import linearized_voltages

logger = logging.getLogger(__name__)

FEAS_TOL = 1e-8
SUPPORT_REL = 1e-6
_ROW_FAMILIES = ("stress_hi", "stress_lo", "xi_max", "xi_min")


@dataclass(frozen=True, eq=False)
class StressProblem:
    """Data of the convex stress LP; build with :func:`build_problem`."""

    model: NetworkModel
    q_load: np.ndarray
    q_min: np.ndarray
    q_max: np.ndarray
    v_nominal: float
    dev_alpha: float
    xi_min: np.ndarray
    xi_max: np.ndarray
    k_mat: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return len(self.q_load)

    def base_cost(self) -> float:
        """Stress of the uncompensated grid, ``||K Q_L||_inf``."""
        return float(np.max(np.abs(self.k_mat @ self.q_load)))

    def cost(self, q) -> float:
        return float(np.max(np.abs(self.k_mat @ (self.q_load + np.asarray(q)))))

    def with_capacity(self, q_min, q_max) -> StressProblem:
        return build_problem(self.model, self.q_load, q_min, q_max,
                             self.v_nominal, self.dev_alpha)

    def violations(self, q) -> dict:
        """Largest violation of each constraint family at ``q`` (0 if none)."""
        q = np.asarray(q, dtype=float)
        x = -self.k_mat @ q
        return {
            "q_min": float(max(np.max(self.q_min - q, initial=0.0), 0.0)),
            "q_max": float(max(np.max(q - self.q_max, initial=0.0), 0.0)),
            "xi_min": float(max(np.max(self.xi_min - x, initial=0.0), 0.0)),
            "xi_max": float(max(np.max(x - self.xi_max, initial=0.0), 0.0)),
        }

    def is_feasible(self, q, tol: float = FEAS_TOL) -> bool:
        return max(self.violations(q).values()) <= tol


@dataclass
class StressSolution:
    """Optimal injections and solver diagnostics.

    Attributes
    ----------
    q_opt : ndarray
    cost : float
        ``||Q_crit^{-1}(Q_L + q_opt)||_inf``.
    active_set : dict
        Boolean masks of the binding constraints per family.
    support : ndarray
        Load indices with nonzero injection.
    kkt : dict
        Residuals of the LP optimality conditions.
    primal_objective, dual_objective : float
    rounds : int
        Reweighting rounds performed (sparse placement only).
    surrogate_history : list of float
        Log-penalty surrogate after each reweighting round.
    """

    q_opt: np.ndarray
    cost: float
    active_set: dict
    support: np.ndarray
    kkt: dict = field(default_factory=dict)
    primal_objective: float = float("nan")
    dual_objective: float = float("nan")
    rounds: int = 0
    surrogate_history: list = field(default_factory=list)


def security_thresholds(model: NetworkModel, q_load, v_nominal: float, dev_alpha: float):
    """Thresholds ``(xi_min, xi_max)`` bounding ``-Q_crit^{-1} q``."""
    kq = model.solve_qcrit(q_load)
    lo = 4.0 * (v_nominal * (1.0 - dev_alpha) / model.v_open - 1.0) + kq
    hi = 4.0 * (v_nominal * (1.0 + dev_alpha) / model.v_open - 1.0) + kq
    return lo, hi


def build_problem(model: NetworkModel, q_load, q_min, q_max, v_nominal: float = 1.0,
                  dev_alpha: float = 0.05) -> StressProblem:
    """Assemble a :class:`StressProblem`.

    Raises
    ------
    InfeasibleBox
        Some threshold interval is empty.
    ValueError
        Capacity boxes are inconsistent or do not contain zero.
    """
    n = model.n_load
    q_load = np.array(q_load, dtype=float).reshape(n)
    q_min = np.array(np.broadcast_to(np.asarray(q_min, dtype=float), (n,)))
    q_max = np.array(np.broadcast_to(np.asarray(q_max, dtype=float), (n,)))
    if np.any(q_min > q_max):
        raise ValueError("q_min must not exceed q_max")
    if np.any(q_min > 0) or np.any(q_max < 0):
        raise ValueError("capacity boxes must contain zero")
    if not v_nominal > 0:
        raise ValueError("v_nominal must be positive")
    k_mat = model.solve_qcrit(np.eye(n))
    if not np.all(np.isfinite(k_mat)):
        raise SingularSystem("Q_crit is singular")
    xi_min, xi_max = security_thresholds(model, q_load, v_nominal, dev_alpha)
    if np.any(xi_min > xi_max):
        k = int(np.argmax(xi_min - xi_max))
        raise InfeasibleBox(f"empty secure band at bus {model.load_bus_ids[k]}")
    return StressProblem(model, q_load, q_min, q_max, float(v_nominal), float(dev_alpha),
                         xi_min, xi_max, k_mat)


def capacity_fraction(q_load, fraction: float, mask=None):
    """Symmetric boxes ``+-fraction * ||Q_L||_inf`` (zero outside ``mask``)."""
    q_load = np.asarray(q_load, dtype=float)
    cap = fraction * np.max(np.abs(q_load)) * np.ones_like(q_load)
    if mask is not None:
        cap = np.where(mask, cap, 0.0)
    return -cap, cap


# ---------------------------------------------------------------------------
# LP assembly


def _lp_matrices(problem: StressProblem, split: bool):
    """Inequality system over ``[q, t]`` or ``[q+, q-, t]``."""
    n = problem.n
    K = problem.k_mat
    kql = K @ problem.q_load
    ones = np.ones((n, 1))
    rows = np.vstack([
        np.hstack([K, -ones]),            # K(Q_L+q) <= t
        np.hstack([-K, -ones]),           # -K(Q_L+q) <= t
        np.hstack([-K, np.zeros((n, 1))]),  # -Kq <= xi_max
        np.hstack([K, np.zeros((n, 1))]),   # Kq <= -xi_min
    ])
    rhs = np.concatenate([-kql, kql, problem.xi_max, -problem.xi_min])
    if split:
        rows = np.hstack([rows[:, :n], -rows[:, :n], rows[:, n:]])
    return rows, rhs


def _kkt(c, A, b, lo, hi, z, y, r_lo, r_hi) -> dict:
    slack = b - A @ z
    stationarity = c - A.T @ y - r_lo - r_hi
    finite_lo = np.where(np.isfinite(lo), lo, 0.0)
    finite_hi = np.where(np.isfinite(hi), hi, 0.0)
    comp = np.concatenate([
        y * slack,
        r_lo * np.where(np.isfinite(lo), z - finite_lo, 0.0),
        r_hi * np.where(np.isfinite(hi), finite_hi - z, 0.0),
    ])
    scale = max(1.0, float(np.max(np.abs(c))))
    return {
        "primal": float(max(np.max(-slack, initial=0.0), 0.0)),
        "dual": float(max(np.max(y, initial=0.0), np.max(-r_lo, initial=0.0),
                          np.max(r_hi, initial=0.0), 0.0)),
        "stationarity": float(np.max(np.abs(stationarity)) / scale),
        "complementarity": float(np.max(np.abs(comp), initial=0.0)),
    }


def _solve_lp(problem: StressProblem, weights=None, gamma: float = 0.0):
    """Solve the (optionally l1-penalized) epigraph LP; return ``(q, t, info)``."""
    n = problem.n
    split = weights is not None and gamma > 0
    A, b = _lp_matrices(problem, split)
    if split:
        w = np.asarray(weights, dtype=float)
        c = np.concatenate([gamma * w, gamma * w, [1.0]])
        lo = np.zeros(2 * n + 1)
        hi = np.concatenate([np.maximum(problem.q_max, 0.0),
                             np.maximum(-problem.q_min, 0.0), [np.inf]])
    else:
        c = np.zeros(n + 1)
        c[-1] = 1.0
        lo = np.concatenate([problem.q_min, [0.0]])
        hi = np.concatenate([problem.q_max, [np.inf]])
    try:
        res = solve_lp(c, A, b, lo, hi)
    except LPFailure as exc:
        raise InternalError(f"LP solver failed: {exc}") from exc
    if res.status == "infeasible":
        report = _infeasibility_report(problem)
        report["certificate_rows"] = _certificate_rows(res.y, n)
        raise Infeasible("stress LP is infeasible", report=report)
    z, y, r_lo, r_hi = res.z, res.y, res.r_lo, res.r_hi
    kkt = _kkt(c, A, b, lo, hi, z, y, r_lo, r_hi)
    dual_obj = res.dual_objective
    q = z[:n] - z[n:2 * n] if split else z[:n].copy()
    q = np.clip(q, problem.q_min, problem.q_max)
    info = {"kkt": kkt, "primal_objective": res.fun, "dual_objective": dual_obj}
    return q, float(z[-1]), info


def _infeasibility_report(problem: StressProblem) -> dict:
    """Per-bus security requirement that the capacity box cannot meet.

    Each ``xi`` row bounds ``(-K q)_h``; with ``-K >= 0`` entrywise, its
    reachable range under the box is ``[-K q_min, -K q_max]``.
    """
    negk = -problem.k_mat
    reach_hi = np.where(negk >= 0, negk * problem.q_max, negk * problem.q_min).sum(axis=1)
    reach_lo = np.where(negk >= 0, negk * problem.q_min, negk * problem.q_max).sum(axis=1)
    ids = problem.model.load_bus_ids
    report = {}
    for h in np.flatnonzero(reach_hi < problem.xi_min - FEAS_TOL):
        report[ids[h]] = f"needs -Kq >= {problem.xi_min[h]:.6g}, reachable max {reach_hi[h]:.6g}"
    for h in np.flatnonzero(reach_lo > problem.xi_max + FEAS_TOL):
        report[ids[h]] = f"needs -Kq <= {problem.xi_max[h]:.6g}, reachable min {reach_lo[h]:.6g}"
    if not report:
        report["combined"] = "security rows cannot be met simultaneously within capacity"
    return report


def _certificate_rows(y, n) -> list:
    """``(family, load index)`` of the rows carrying infeasibility weight."""
    w = -np.asarray(y)
    thr = 1e-6 * max(float(np.max(w, initial=0.0)), 1e-300)
    return [(_ROW_FAMILIES[r // n], int(r % n)) for r in np.flatnonzero(w > thr)]


def _support(q) -> np.ndarray:
    q = np.asarray(q)
    thr = SUPPORT_REL * max(1.0, float(np.max(np.abs(q), initial=0.0)))
    return np.flatnonzero(np.abs(q) > thr)


def _solution(problem: StressProblem, q, info, rounds=0, history=None) -> StressSolution:
    x = -problem.k_mat @ q
    r = problem.k_mat @ (problem.q_load + q)
    cost = float(np.max(np.abs(r)))
    active = {
        "q_min": np.abs(q - problem.q_min) <= FEAS_TOL,
        "q_max": np.abs(q - problem.q_max) <= FEAS_TOL,
        "xi_min": np.abs(x - problem.xi_min) <= FEAS_TOL,
        "xi_max": np.abs(x - problem.xi_max) <= FEAS_TOL,
        "stress": np.abs(np.abs(r) - cost) <= FEAS_TOL,
    }
    return StressSolution(
        q_opt=q, cost=cost, active_set=active, support=_support(q), kkt=info["kkt"],
        primal_objective=info["primal_objective"], dual_objective=info["dual_objective"],
        rounds=rounds, surrogate_history=history or [])


def solve_stress_lp(problem: StressProblem) -> StressSolution:
    """Solve the convex stress minimization LP to optimality.

    Raises
    ------
    Infeasible
        No injection within capacity meets the security thresholds; the
        exception's ``report`` names the buses whose requirement is out of
        reach.
    """
    q, _, info = _solve_lp(problem)
    return _solution(problem, q, info)


def default_reweight_eps(problem: StressProblem) -> float:
    return 1e-3 * max(1.0, float(np.max(np.abs(problem.q_load))))


def solve_sparse_placement(problem: StressProblem, gamma: float, reweight_eps: float | None = None,
                           max_rounds: int = 10, init_q=None) -> StressSolution:
    """Sparse stress minimization by iteratively reweighted l1.

    Each round solves the LP with cost ``t + gamma * sum_h w_h |q_h|`` and
    refreshes ``w_h = 1 / (|q_h| + eps)``. The first round uses uniform
    weights ``1 / eps``, or ``1 / (|init_q| + eps)`` when a previous
    placement is supplied as a warm start. Iteration stops once the support repeats or after
    ``max_rounds`` rounds. ``surrogate_history`` records the log penalty
    ``t + gamma * sum_h log(|q_h| + eps)`` that the scheme majorizes.
    """
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    if gamma == 0:
        return solve_stress_lp(problem)
    eps = default_reweight_eps(problem) if reweight_eps is None else reweight_eps
    if init_q is None:
        w = np.full(problem.n, 1.0 / eps)
    else:
        w = 1.0 / (np.abs(np.asarray(init_q, dtype=float)) + eps)
    support = None
    history = []
    q = info = None
    for rnd in range(1, max_rounds + 1):
        q, _, info = _solve_lp(problem, w, gamma)
        history.append(problem.cost(q) + gamma * float(np.sum(np.log(np.abs(q) + eps))))
        new_support = _support(q)
        w = 1.0 / (np.abs(q) + eps)
        if support is not None and np.array_equal(new_support, support):
            break
        support = new_support
    return _solution(problem, q, info, rounds=rnd, history=history)


def polish(problem: StressProblem, support) -> StressSolution:
    """Re-solve the stress LP with compensation allowed only on ``support``."""
    mask = np.zeros(problem.n, dtype=bool)
    mask[np.asarray(list(support), dtype=int)] = True
    restricted = problem.with_capacity(np.where(mask, problem.q_min, 0.0),
                                       np.where(mask, problem.q_max, 0.0))
    return solve_stress_lp(restricted)


@dataclass
class SweepRow:
    gamma: float
    n_devices: int
    cost_ratio: float
    feasible: bool
    support: tuple = ()
    q: np.ndarray | None = None


def _sweep_point(problem, gamma, reweight_eps, max_rounds, init_q=None):
    base = problem.base_cost()
    try:
        sparse = solve_sparse_placement(problem, gamma, reweight_eps, max_rounds, init_q)
        pol = polish(problem, sparse.support)
    except Infeasible:
        return SweepRow(gamma, 0, float("nan"), False), None
    ratio = pol.cost / base if base > 0 else 0.0
    row = SweepRow(gamma, len(sparse.support), ratio, True,
                   tuple(int(k) for k in sparse.support), pol.q_opt)
    return row, sparse.q_opt


def gamma_sweep(problem: StressProblem, gammas, reweight_eps: float | None = None,
                max_rounds: int = 10, workers: int = 1,
                warm_start: bool = True) -> list[SweepRow]:
    """Placement and polished cost ratio for every ``gamma``.

    The cost ratio is the polished stress divided by the uncompensated
    stress ``||Q_crit^{-1} Q_L||_inf``. Infeasible points are flagged and
    the sweep continues. Rows come back in the order of ``gammas``.

    With ``warm_start`` the sweep runs through the grid in increasing
    order and seeds each reweighting with the placement found at the
    previous ``gamma`` (a continuation path), which keeps the device count
    monotone in practice. Without it every point starts cold and the
    points are independent, so ``workers > 1`` solves them concurrently.
    """
    gammas = [float(g) for g in gammas]
    if any(g < 0 for g in gammas):
        raise ValueError("gammas must be nonnegative")
    if warm_start:
        rows = {}
        prev = None
        for k in sorted(range(len(gammas)), key=lambda k: gammas[k]):
            rows[k], q = _sweep_point(problem, gammas[k], reweight_eps, max_rounds, prev)
            if q is not None:
                prev = q
        return [rows[k] for k in range(len(gammas))]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return [r for r, _ in pool.map(
                lambda g: _sweep_point(problem, g, reweight_eps, max_rounds), gammas)]
    return [_sweep_point(problem, g, reweight_eps, max_rounds)[0] for g in gammas]


def default_gamma_grid(num: int = 40) -> np.ndarray:
    return np.logspace(-5, -2, num)


def voltage_profile(problem: StressProblem, q) -> np.ndarray:
    """Linearized load voltages (p.u.) under injections ``q``."""
    return linearized_voltages(problem.model, problem.q_load + np.asarray(q)) \
        * problem.model.v_open
