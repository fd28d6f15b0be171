"""Smooth, decomposable surrogate of the infinity norm.

The softmax of ``|x|^(1+eps)``

    f_tilde(x) = (1/a) log( (1/n) sum_i exp(a |x_i|^(1+eps)) )

tends to ``||x||_inf`` as ``a -> inf`` and ``eps -> 0``. Its monotone
transform ``f(x) = sum_i exp(a |x_i|^(1+eps))`` has the same minimizers, a
gradient whose i-th entry depends on ``x_i`` only, and a diagonal Hessian;
for ``eps = 1`` the scalar equation ``df/dx_i = zeta`` is inverted in closed
form with the Lambert W function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError

EXP_LIMIT = 700.0
HESSIAN_SENTINEL = 1e300
_INV_E = math.exp(-1.0)


@dataclass(frozen=True)
class SmoothCfg:
    """Sharpness ``a`` of the softmax and exponent offset ``eps``."""

    sharpness: float = 50.0
    exponent_eps: float = 1.0

    def __post_init__(self):
        if not self.sharpness >= 1.0:
            raise ValueError("sharpness must be at least 1")
        if not 0.0 < self.exponent_eps <= 1.0:
            raise ValueError("exponent_eps must lie in (0, 1]")


def _powers(cfg: SmoothCfg, x) -> np.ndarray:
    return cfg.sharpness * np.abs(np.asarray(x, dtype=float)) ** (1.0 + cfg.exponent_eps)


def f_tilde(cfg: SmoothCfg, x) -> float:
    """Softmax approximation of the infinity norm (max-shifted, no overflow)."""
    y = _powers(cfg, x)
    if y.size == 0:
        return 0.0
    top = float(np.max(y))
    return (top + math.log(float(np.mean(np.exp(y - top))))) / cfg.sharpness


def _check_range(y):
    if y.size and float(np.max(y)) > EXP_LIMIT:
        raise OverflowError(
            f"a*|x|^(1+eps) = {float(np.max(y)):.4g} exceeds {EXP_LIMIT}; "
            "evaluate the cost on bounded iterates or lower the sharpness")


def f_cost(cfg: SmoothCfg, x) -> float:
    """Separable cost ``sum_i exp(a |x_i|^(1+eps))``; ``>= n`` with equality at 0."""
    y = _powers(cfg, x)
    _check_range(y)
    return float(np.sum(np.exp(y)))


def grad_f(cfg: SmoothCfg, x) -> np.ndarray:
    a, e = cfg.sharpness, cfg.exponent_eps
    x = np.asarray(x, dtype=float)
    y = _powers(cfg, x)
    _check_range(y)
    return a * (1.0 + e) * np.exp(y) * np.abs(x) ** e * np.sign(x)


def hessian_diag(cfg: SmoothCfg, x) -> np.ndarray:
    """Diagonal of the Hessian of :func:`f_cost`.

    At ``x_i = 0`` the entry is ``2a`` for ``eps = 1`` and diverges for
    ``eps < 1``, reported as ``HESSIAN_SENTINEL``.
    """
    a, e = cfg.sharpness, cfg.exponent_eps
    x = np.abs(np.asarray(x, dtype=float))
    y = _powers(cfg, x)
    _check_range(y)
    out = np.empty_like(x)
    nz = x > 0
    xn = x[nz]
    out[nz] = a * (1 + e) * np.exp(y[nz]) * (e * xn ** (e - 1) + a * (1 + e) * xn ** (2 * e))
    out[~nz] = 2.0 * a if e == 1.0 else HESSIAN_SENTINEL
    return out


def lambert_w0(z):
    """Principal branch of the Lambert W function for real ``z >= -1/e``.

    Halley iteration started from ``log(1 + z)`` for ``z >= 0`` and from
    the branch-point series for negative ``z``. Accepts scalars or arrays.

    Raises
    ------
    DomainError
        If any ``z < -1/e``.
    """
    if isinstance(z, (float, int)):
        return _w0_scalar(float(z))
    arr = np.asarray(z, dtype=float)
    if np.any(arr < -_INV_E - 1e-16) or np.any(np.isnan(arr)):
        raise DomainError("lambert_w0 is defined for z >= -1/e")
    zz = np.maximum(arr, -_INV_E)
    p = np.sqrt(np.maximum(2.0 * (math.e * zz + 1.0), 0.0))
    w = np.where(zz >= 0, np.log1p(np.maximum(zz, 0.0)), -1.0 + p - p * p / 3.0
                 + 11.0 / 72.0 * p ** 3)
    for _ in range(64):
        ew = np.exp(w)
        f = w * ew - zz
        denom = ew * (w + 1.0) - (w + 2.0) * f / (2.0 * w + 2.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(denom != 0, f / denom, 0.0)
        step = np.where(np.isfinite(step), step, 0.0)
        w = w - step
        if np.all(np.abs(step) <= 4e-16 * np.maximum(np.abs(w), 1e-300)):
            break
    w = np.where(zz == 0, 0.0, w)
    w = np.where(zz == -_INV_E, -1.0, w)
    return float(w) if w.ndim == 0 else w


def _w0_scalar(z: float) -> float:
    # pure-Python twin of the array iteration, used on the per-agent hot path
    if not z >= -_INV_E - 1e-16:
        raise DomainError("lambert_w0 is defined for z >= -1/e")
    if z == 0.0:
        return 0.0
    if z <= -_INV_E:
        return -1.0
    if z > 0:
        w = math.log1p(z)
    else:
        p = math.sqrt(max(2.0 * (math.e * z + 1.0), 0.0))
        w = -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p ** 3
    for _ in range(64):
        ew = math.exp(w)
        f = w * ew - z
        if w == -1.0:
            break
        denom = ew * (w + 1.0) - (w + 2.0) * f / (2.0 * w + 2.0)
        if denom == 0 or not math.isfinite(denom):
            break
        step = f / denom
        w -= step
        if abs(step) <= 4e-16 * max(abs(w), 1e-300):
            break
    return w


def primal_update_scalar(cfg: SmoothCfg, zeta):
    """Closed-form solution of ``2a x exp(a x^2) = zeta`` (``eps = 1``)."""
    if cfg.exponent_eps != 1.0:
        raise ValueError("closed-form update requires exponent_eps = 1")
    a = cfg.sharpness
    if isinstance(zeta, (float, int)):
        zeta = float(zeta)
        return math.copysign(math.sqrt(_w0_scalar(zeta * zeta / (2.0 * a)) / (2.0 * a)),
                             zeta) if zeta != 0.0 else 0.0
    zeta = np.asarray(zeta, dtype=float)
    x = np.sign(zeta) * np.sqrt(lambert_w0(zeta * zeta / (2.0 * a)) / (2.0 * a))
    return float(x) if x.ndim == 0 else x


def primal_update_general(cfg: SmoothCfg, zeta: float, tol: float = 1e-12) -> float:
    """Solve ``df/dx_i(x) = zeta`` for any ``eps`` in (0, 1].

    Newton on ``log(df/dx) - log|zeta|`` (monotone in ``x > 0``), falling
    back to bisection whenever the Newton step leaves the bracket.
    """
    a, e = cfg.sharpness, cfg.exponent_eps
    zeta = float(zeta)
    if zeta == 0.0:
        return 0.0
    target = math.log(abs(zeta))
    c0 = math.log(a * (1.0 + e))

    def h(x):
        return c0 + a * x ** (1.0 + e) + e * math.log(x) - target

    lo, hi = 0.0, 1.0
    while h(hi) < 0:
        lo, hi = hi, 2.0 * hi
    x = 0.5 * (lo + hi)
    for _ in range(200):
        hx = h(x)
        if hx == 0:
            break
        if hx < 0:
            lo = x
        else:
            hi = x
        dh = a * (1.0 + e) * x ** e + e / x
        x_new = x - hx / dh
        if not lo < x_new < hi:
            x_new = 0.5 * (lo + hi)
        if abs(x_new - x) <= tol * max(abs(x_new), 1e-300) or hi - lo <= tol * hi:
            x = x_new
            break
        x = x_new
    return math.copysign(x, zeta)


def primal_update(cfg: SmoothCfg, zeta):
    """Per-agent primal minimizer for the given ``zeta`` (scalar or array)."""
    if cfg.exponent_eps == 1.0:
        return primal_update_scalar(cfg, zeta)
    if isinstance(zeta, (float, int)) or np.ndim(zeta) == 0:
        return primal_update_general(cfg, float(zeta))
    return np.array([primal_update_general(cfg, float(z)) for z in np.ravel(zeta)]) \
        .reshape(np.shape(zeta))
