"""Decoupled and coupled lossless power flow solvers.

The decoupled reactive power flow in normalized voltages reads

    Q_L + q = -4 diag(v) Q_crit (v - 1)

and is solved by damped Newton from the open-circuit point ``v = 1``, which
selects the high-voltage branch. The coupled solver is a Newton-Raphson in
polar coordinates on the full lossless equations

    p_h = sum_k B_hk V_h V_k sin(th_h - th_k)
    q_h = -sum_k B_hk V_h V_k cos(th_h - th_k)

and serves as validation plant.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .case_io import GridCase
from .errors import NotConverged, SingularSystem
from .network_model import NetworkModel, assemble_susceptance

logger = logging.getLogger(__name__)

RPFE_TOL = 1e-10
RPFE_MAX_ITER = 50
PF_TOL = 1e-10
PF_MAX_ITER = 30
NOSE_REL_WIDTH = 1e-6
_MAX_HALVINGS = 40


@dataclass
class RpfeSolution:
    v_norm: np.ndarray
    v_load: np.ndarray
    converged: bool
    iterations: int
    residual: float


@dataclass
class CoupledPfSolution:
    """Converged (or best) state of the coupled lossless power flow.

    ``theta`` and ``v`` are in case bus order; ``v_load`` and ``q_load_bus``
    follow the model's load ordering and ``q_gen`` its generator ordering.
    ``q_load_bus`` is the net reactive injection recomputed from the power
    flow equations, i.e. the measurable aggregate ``Q_L + q``.
    """

    theta: np.ndarray
    v: np.ndarray
    v_load: np.ndarray
    q_gen: np.ndarray
    q_load_bus: np.ndarray
    converged: bool
    iterations: int
    residual: float


def rpfe_residual(model: NetworkModel, v: np.ndarray, q_injected: np.ndarray) -> np.ndarray:
    return 4.0 * v * (model.q_crit @ (v - 1.0)) + q_injected


def solve_rpfe(model: NetworkModel, q_injected, init=None, *, raise_on_fail: bool = True,
               tol: float = RPFE_TOL, max_iter: int = RPFE_MAX_ITER) -> RpfeSolution:
    """Solve the controlled decoupled reactive power flow for ``v``.

    Parameters
    ----------
    model : NetworkModel
    q_injected : array_like
        Total load-bus reactive injection ``Q_L + q`` (p.u.).
    init : array_like, optional
        Starting normalized voltages, default all ones (high-voltage branch).
    raise_on_fail : bool
        If False, a non-converged solve returns the best iterate with
        ``converged=False`` instead of raising.

    Raises
    ------
    NotConverged
        No iterate met the tolerance; the best one is attached.
    """
    q = np.asarray(q_injected, dtype=float)
    v = np.ones(model.n_load) if init is None else np.array(init, dtype=float)
    F = rpfe_residual(model, v, q)
    res = float(np.max(np.abs(F)))
    best_v, best_res = v.copy(), res
    it = 0
    while res >= tol and it < max_iter:
        it += 1
        J = 4.0 * (np.diag(model.q_crit @ (v - 1.0)) + v[:, None] * model.q_crit)
        try:
            step = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            break
        t = 1.0
        for _ in range(_MAX_HALVINGS):
            v_new = v + t * step
            F_new = rpfe_residual(model, v_new, q)
            res_new = float(np.max(np.abs(F_new)))
            if res_new < res:
                break
            t *= 0.5
        else:
            break
        v, F, res = v_new, F_new, res_new
        if res < best_res:
            best_v, best_res = v.copy(), res
    sol = RpfeSolution(best_v, best_v * model.v_open, best_res < tol, it, best_res)
    if not sol.converged and raise_on_fail:
        raise NotConverged(
            f"decoupled power flow did not converge (residual {best_res:.3e} after {it} "
            "iterations); loading may exceed the collapse point", solution=sol)
    return sol


def linearized_voltages(model: NetworkModel, q_injected) -> np.ndarray:
    """First-order normalized voltages ``1 - Q_crit^{-1}(Q_L + q)/4``."""
    z = model.solve_qcrit(q_injected)
    if not np.all(np.isfinite(z)):
        raise SingularSystem("Q_crit solve produced non-finite values")
    return 1.0 - 0.25 * z


# ---------------------------------------------------------------------------
# nose curves


@dataclass
class NosePoint:
    scale: float
    high: RpfeSolution
    low: RpfeSolution | None = None


@dataclass
class NoseCurve:
    """Sampled nose curve; ``tip_scale`` is the last solvable load scale."""

    points: list[NosePoint] = field(default_factory=list)
    tip_scale: float = float("nan")
    tip: RpfeSolution | None = None


def _solvable(model, direction, s):
    try:
        return solve_rpfe(model, s * direction)
    except NotConverged:
        return None


def find_nose_tip(model: NetworkModel, direction) -> tuple[float, RpfeSolution]:
    """Bracket the largest solvable scale of ``direction`` by bisection."""
    d = np.asarray(direction, dtype=float)
    z = np.max(np.abs(model.solve_qcrit(d)))
    if z == 0:
        raise ValueError("direction must be nonzero")
    lo, lo_sol = 0.0, solve_rpfe(model, 0.0 * d)
    hi = 1.0 / z
    while True:
        sol = _solvable(model, d, hi)
        if sol is None:
            break
        lo, lo_sol = hi, sol
        hi *= 2.0
    while hi - lo > NOSE_REL_WIDTH * hi:
        mid = 0.5 * (lo + hi)
        sol = _solvable(model, d, mid)
        if sol is None:
            hi = mid
        else:
            lo, lo_sol = mid, sol
    return lo, lo_sol


def nose_curve(model: NetworkModel, direction, steps: int = 50) -> NoseCurve:
    """Trace the QV nose curve along ``q_injected = s * direction``.

    Scales are ``steps`` evenly spaced points in ``[0, s_max]`` where
    ``s_max`` is the bisection-located nose tip. For a single load bus the
    closed-form low-voltage branch is attached to every point.
    """
    d = np.asarray(direction, dtype=float)
    tip_scale, tip = find_nose_tip(model, d)
    curve = NoseCurve(tip_scale=tip_scale, tip=tip)
    for s in np.linspace(0.0, tip_scale, steps):
        high = _solvable(model, d, s)
        if high is None:
            break
        low = None
        if model.n_load == 1:
            disc = max(1.0 - s * d[0] / model.q_crit[0, 0], 0.0)
            v_low = np.array([0.5 - 0.5 * np.sqrt(disc)])
            res = float(np.max(np.abs(rpfe_residual(model, v_low, s * d))))
            low = RpfeSolution(v_low, v_low * model.v_open, True, 0, res)
        curve.points.append(NosePoint(float(s), high, low))
    return curve


# ---------------------------------------------------------------------------
# coupled power flow


def _injections(B, V, theta):
    dth = theta[:, None] - theta[None, :]
    C = B * np.cos(dth)
    S = B * np.sin(dth)
    P = V * (S @ V)
    Q = -V * (C @ V)
    return P, Q, C, S


def _jacobian(V, P, Q, C, S):
    M = V[:, None] * C * V[None, :]
    N = V[:, None] * S * V[None, :]
    j_pt = -M + np.diag(M.sum(axis=1))
    j_pv = V[:, None] * S + np.diag(S @ V)
    j_qt = -N + np.diag(N.sum(axis=1))
    j_qv = -V[:, None] * C - np.diag(C @ V)
    return j_pt, j_pv, j_qt, j_qv


def solve_coupled_pf(case: GridCase, model: NetworkModel, q_comp=None, *,
                     p_scale=None, q_load=None, raise_on_fail: bool = True,
                     tol: float = PF_TOL, max_iter: int = PF_MAX_ITER, init=None,
                     susceptance=None) -> CoupledPfSolution:
    """Newton-Raphson on the lossless coupled power flow equations.

    Active power is fixed at every non-slack bus (net generation minus
    demand), reactive power at load buses (``Q_L + q_comp``) and voltage
    magnitude at generator buses. The slack is the lowest-id generator.

    Parameters
    ----------
    case, model
        Case data and its reactive model (for the load/generator ordering).
    q_comp : array_like, optional
        Compensator injections at load buses in model order.
    p_scale : array_like, optional
        Active demands at load buses overriding the case values (p.u.).
    q_load : array_like, optional
        Load reactive injections ``Q_L`` overriding the case values.
    init : CoupledPfSolution, optional
        Previous solution used as starting point (flat start otherwise).
    susceptance : ndarray, optional
        Precomputed :func:`assemble_susceptance` result for ``case``.

    Raises
    ------
    NotConverged
        Mismatch did not fall below ``tol``.
    """
    B = assemble_susceptance(case) if susceptance is None else susceptance
    index = case.bus_index()
    n = len(case.buses)
    load_idx = np.array([index[b] for b in model.load_bus_ids], dtype=int)
    gen_idx = np.array([index[b] for b in model.gen_bus_ids], dtype=int)
    slack = index[case.slack_id]

    p_spec = np.array([-b.p_demand for b in case.buses])
    if p_scale is not None:
        p_spec[load_idx] = -np.asarray(p_scale, dtype=float)
    for g in case.gens:
        p_spec[index[g.bus]] += g.p_gen
    ql = case.load_injections() if q_load is None else np.asarray(q_load, dtype=float)
    qc = np.zeros(model.n_load) if q_comp is None else np.asarray(q_comp, dtype=float)
    q_spec = ql + qc

    if init is None:
        V = np.ones(n)
        theta = np.zeros(n)
    else:
        V = np.array(init.v, dtype=float)
        theta = np.array(init.theta, dtype=float)
    V[gen_idx] = model.v_gen
    theta[slack] = 0.0
    pv_idx = np.array([k for k in range(n) if k != slack], dtype=int)
    n_t = len(pv_idx)

    def mismatch(V, theta):
        P, Q, C, S = _injections(B, V, theta)
        F = np.concatenate([P[pv_idx] - p_spec[pv_idx], Q[load_idx] - q_spec])
        return F, P, Q, C, S

    F, P, Q, C, S = mismatch(V, theta)
    res = float(np.max(np.abs(F)))
    it = 0
    while res >= tol and it < max_iter:
        it += 1
        j_pt, j_pv, j_qt, j_qv = _jacobian(V, P, Q, C, S)
        J = np.block([
            [j_pt[np.ix_(pv_idx, pv_idx)], j_pv[np.ix_(pv_idx, load_idx)]],
            [j_qt[np.ix_(load_idx, pv_idx)], j_qv[np.ix_(load_idx, load_idx)]],
        ])
        try:
            dx = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            break
        t = 1.0
        for _ in range(_MAX_HALVINGS):
            th_new = theta.copy()
            V_new = V.copy()
            th_new[pv_idx] += t * dx[:n_t]
            V_new[load_idx] += t * dx[n_t:]
            if np.all(V_new[load_idx] > 0):
                F_new, P_n, Q_n, C_n, S_n = mismatch(V_new, th_new)
                res_new = float(np.max(np.abs(F_new)))
                if res_new < res:
                    break
            t *= 0.5
        else:
            break
        theta, V, F, P, Q, C, S, res = th_new, V_new, F_new, P_n, Q_n, C_n, S_n, res_new

    sol = CoupledPfSolution(
        theta=theta, v=V, v_load=V[load_idx].copy(), q_gen=Q[gen_idx].copy(),
        q_load_bus=Q[load_idx].copy(), converged=res < tol, iterations=it, residual=res)
    if not sol.converged and raise_on_fail:
        raise NotConverged(
            f"coupled power flow did not converge (mismatch {res:.3e} after {it} iterations)",
            solution=sol)
    return sol


def branch_angle_differences(case: GridCase, sol: CoupledPfSolution) -> dict:
    """Angle difference per branch ``(from, to)``, usable as an embedding."""
    index = case.bus_index()
    return {(br.from_bus, br.to_bus): float(sol.theta[index[br.from_bus]]
                                            - sol.theta[index[br.to_bus]])
            for br in case.branches}


__all__ = [
    "RpfeSolution", "CoupledPfSolution", "NosePoint", "NoseCurve", "solve_rpfe",
    "linearized_voltages", "nose_curve", "find_nose_tip", "solve_coupled_pf",
    "branch_angle_differences", "rpfe_residual",
]
