"""Dense primal-dual interior-point solver for small linear programs.

Solves

    minimize  c @ z   subject to  A @ z <= b,  lo <= z <= hi

with Mehrotra's predictor-corrector method and no crossover, so on a
degenerate problem the returned point lies in the relative interior of the
optimal face rather than at a vertex. Lower bounds must be finite; upper
bounds may be ``inf``.

Multipliers follow the sign convention of ``scipy.optimize.linprog``:
``y <= 0`` for the inequality rows, ``r_lo >= 0`` and ``r_hi <= 0`` for the
bounds, with ``c = A.T @ y + r_lo + r_hi`` at optimality.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

GAP_TOL = 1e-10
FEAS_TOL = 1e-10
MAX_ITER = 150
_STEP = 0.995


@dataclass
class LPResult:
    z: np.ndarray
    fun: float
    y: np.ndarray
    r_lo: np.ndarray
    r_hi: np.ndarray
    status: str
    iterations: int
    dual_objective: float = float("nan")


class LPFailure(Exception):
    """The interior-point iteration did not reach its tolerances."""


def _standard_form(c, A, b, lo, hi):
    m, n = A.shape
    up = np.flatnonzero(np.isfinite(hi))
    k = len(up)
    # columns: shifted z (n), row slacks (m), upper-bound slacks (k)
    E = np.zeros((m + k, n + m + k))
    E[:m, :n] = A
    E[:m, n:n + m] = np.eye(m)
    E[m + np.arange(k), up] = 1.0
    E[m + np.arange(k), n + m + np.arange(k)] = 1.0
    f = np.concatenate([b - A @ lo, hi[up] - lo[up]])
    cc = np.concatenate([c, np.zeros(m + k)])
    return E, f, cc, up


def _factor(M):
    reg = 0.0
    scale = max(1.0, float(np.max(np.abs(np.diag(M)))))
    for _ in range(8):
        try:
            return scipy.linalg.cho_factor(M + reg * np.eye(len(M)), check_finite=False)
        except (np.linalg.LinAlgError, ValueError):
            reg = scale * 1e-14 if reg == 0.0 else reg * 100.0
    raise LPFailure("normal equations are not positive definite")


def _mehrotra(A, b, c):
    """Standard-form LP ``min c@x, A@x = b, x >= 0``; returns ``(x, lam, s, it)``."""
    m, n = A.shape
    AAt = _factor(A @ A.T)
    x = A.T @ scipy.linalg.cho_solve(AAt, b)
    lam = scipy.linalg.cho_solve(AAt, A @ c)
    s = c - A.T @ lam
    x += max(-1.5 * np.min(x), 0.0)
    s += max(-1.5 * np.min(s), 0.0)
    xs = x @ s
    x += 0.5 * xs / max(np.sum(s), 1e-300)
    s += 0.5 * xs / max(np.sum(x), 1e-300)
    x = np.maximum(x, 1e-8)
    s = np.maximum(s, 1e-8)
    nb, nc = 1.0 + np.linalg.norm(b), 1.0 + np.linalg.norm(c)

    for it in range(1, MAX_ITER + 1):
        r_b = A @ x - b
        r_c = A.T @ lam + s - c
        mu = x @ s / n
        pobj, dobj = c @ x, b @ lam
        if (np.linalg.norm(r_b) / nb < FEAS_TOL and np.linalg.norm(r_c) / nc < FEAS_TOL
                and abs(pobj - dobj) / (1.0 + abs(pobj)) < GAP_TOL):
            return x, lam, s, it - 1
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(lam))) or np.max(np.abs(lam)) > 1e13:
            raise LPFailure("iterates diverged")
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            d = x / s
        if not np.all(np.isfinite(d)):
            raise LPFailure("scaling diverged")
        F = _factor((A * d) @ A.T)

        def direction(r_xs):
            rhs = -r_b - A @ (r_xs / s + d * r_c)
            dlam = scipy.linalg.cho_solve(F, rhs)
            ds = -r_c - A.T @ dlam
            dx = (r_xs - x * ds) / s
            return dx, dlam, ds

        def max_step(v, dv):
            neg = dv < 0
            return min(1.0, float(np.min(-v[neg] / dv[neg]))) if np.any(neg) else 1.0

        dx_a, dl_a, ds_a = direction(-x * s)
        ap, ad = max_step(x, dx_a), max_step(s, ds_a)
        mu_aff = (x + ap * dx_a) @ (s + ad * ds_a) / n
        sigma = (mu_aff / mu) ** 3
        dx, dl, ds = direction(-x * s - dx_a * ds_a + sigma * mu)
        ap = min(1.0, _STEP * max_step(x, dx))
        ad = min(1.0, _STEP * max_step(s, ds))
        x = x + ap * dx
        lam = lam + ad * dl
        s = s + ad * ds
    raise LPFailure(f"no convergence in {MAX_ITER} iterations")


def solve_lp(c, A, b, lo, hi) -> LPResult:
    """Solve ``min c@z, A@z <= b, lo <= z <= hi`` by interior point.

    Returns a result with ``status`` ``"optimal"`` or ``"infeasible"``; in
    the infeasible case ``y`` holds a Farkas-type certificate (nonnegative
    row weights, sign-flipped to the ``<= 0`` convention) from a phase-one
    problem.

    Raises
    ------
    LPFailure
        The iteration neither converged nor proved infeasibility.
    """
    c = np.asarray(c, dtype=float)
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if not np.all(np.isfinite(lo)):
        raise ValueError("lower bounds must be finite")
    m, n = A.shape
    E, f, cc, up = _standard_form(c, A, b, lo, hi)
    try:
        x, lam, s, it = _mehrotra(E, f, cc)
    except LPFailure:
        cert = phase_one(A, b, lo, hi)
        if cert is not None:
            return LPResult(lo.copy(), float("nan"), -cert, np.zeros(n), np.zeros(n),
                            "infeasible", 0)
        raise
    z = lo + x[:n]
    y = lam[:m]
    r_hi = np.zeros(n)
    r_hi[up] = lam[m:]
    r_lo = s[:n]
    dual_obj = float(b @ y + lo @ r_lo + np.where(np.isfinite(hi), hi, 0.0) @ r_hi)
    return LPResult(z, float(c @ z), y, r_lo, r_hi, "optimal", it, dual_obj)


def phase_one(A, b, lo, hi, tol: float = 1e-9):
    """Return nonnegative row weights proving infeasibility, or None.

    Minimizes the total violation ``sum(a)`` subject to ``A z - a <= b``,
    ``a >= 0`` and the bounds. A positive optimum means the rows weighted by
    the phase-one multipliers cannot be satisfied simultaneously.
    """
    m, n = A.shape
    c1 = np.concatenate([np.zeros(n), np.ones(m)])
    A1 = np.hstack([A, -np.eye(m)])
    lo1 = np.concatenate([lo, np.zeros(m)])
    hi1 = np.concatenate([hi, np.full(m, np.inf)])
    E, f, cc, _ = _standard_form(c1, A1, b, lo1, hi1)
    x, lam, _, _ = _mehrotra(E, f, cc)
    if cc @ x <= tol * (1.0 + np.linalg.norm(b)):
        return None
    return np.maximum(-lam[:m], 0.0)
