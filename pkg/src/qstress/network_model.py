"""Decoupled reactive network model.

The susceptance matrix uses ``B_hk = +1/x_hk`` off the diagonal and
``B_hh = -sum_k 1/x_hk + shunt_h + charging_h/2`` on it, so that the load
block ``B_LL`` is Hurwitz Metzler for ordinary grids. From the blocks the
model derives the open-circuit load voltages

    V_L* = -B_LL^{-1} B_LG V_G

and the critical load matrix ``Q_crit = 1/4 diag(V_L*) B_LL diag(V_L*)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .case_io import GridCase
from .errors import AssumptionViolated, SingularSystem

HURWITZ_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class NetworkModel:
    """Partitioned susceptance data of a grid with loads ordered first.

    Attributes
    ----------
    b_ll, b_lg, b_gg : ndarray
        Blocks of the effective susceptance matrix.
    v_gen : ndarray
        Generator voltage set-points.
    v_open : ndarray
        Open-circuit load voltages.
    q_crit : ndarray
        Critical load matrix (symmetric, negative definite).
    load_bus_ids, gen_bus_ids : tuple of int
        Case bus id of every row of the load and generator blocks.
    """

    b_ll: np.ndarray
    b_lg: np.ndarray
    b_gg: np.ndarray
    v_gen: np.ndarray
    v_open: np.ndarray
    q_crit: np.ndarray
    load_bus_ids: tuple
    gen_bus_ids: tuple
    _lu: tuple = field(repr=False, default=None)

    @property
    def n_load(self) -> int:
        return len(self.load_bus_ids)

    @property
    def n_gen(self) -> int:
        return len(self.gen_bus_ids)

    def solve_qcrit(self, rhs: np.ndarray) -> np.ndarray:
        """Return ``Q_crit^{-1} rhs`` through a cached LU factorization."""
        return scipy.linalg.lu_solve(self._lu, np.asarray(rhs, dtype=float))

    def neighbors(self, i: int) -> list[int]:
        """Indices j with ``q_crit[i, j] != 0`` (including ``i`` itself)."""
        return [int(j) for j in np.flatnonzero(self.q_crit[i])]


def assemble_susceptance(case: GridCase, angle_embedding=None) -> np.ndarray:
    """Full ``n x n`` effective susceptance matrix in case bus order.

    ``angle_embedding`` maps a branch ``(from, to)`` to its constant angle
    difference in radians; each branch susceptance is scaled by its cosine.
    """
    index = case.bus_index()
    n = len(case.buses)
    B = np.zeros((n, n))
    for br in case.branches:
        h, k = index[br.from_bus], index[br.to_bus]
        b = 1.0 / br.reactance_x
        if angle_embedding is not None:
            delta = angle_embedding.get((br.from_bus, br.to_bus))
            if delta is None:
                delta = -angle_embedding.get((br.to_bus, br.from_bus), 0.0)
            if abs(delta) >= np.pi / 2:
                raise ValueError(
                    f"branch {br.from_bus}-{br.to_bus}: angle difference must be "
                    "below pi/2 in magnitude")
            b *= np.cos(delta)
        B[h, k] += b
        B[k, h] += b
        B[h, h] -= b - br.charging_b / 2
        B[k, k] -= b - br.charging_b / 2
    for k, bus in enumerate(case.buses):
        B[k, k] += bus.shunt_b
    return B


def load_components(b_ll: np.ndarray) -> list[list[int]]:
    """Connected components (index lists) of the graph induced by ``b_ll``."""
    n = b_ll.shape[0]
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j in np.argwhere(b_ll - np.diag(np.diag(b_ll)) != 0):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
    comps: dict[int, list[int]] = {}
    for i in range(n):
        comps.setdefault(find(i), []).append(i)
    return sorted(comps.values(), key=lambda c: c[0])


def _check_assumptions(b_ll: np.ndarray, load_ids, strict_connectivity: bool) -> None:
    off = b_ll - np.diag(np.diag(b_ll))
    if np.any(off < 0):
        i, j = np.argwhere(off < 0)[0]
        raise AssumptionViolated(
            f"B_LL is not Metzler: entry ({load_ids[i]}, {load_ids[j]}) = {off[i, j]:.6g}")
    eig_max = np.max(np.linalg.eigvals(b_ll).real)
    if not eig_max < -HURWITZ_TOL:
        i = int(np.argmax(np.diag(b_ll)))
        raise AssumptionViolated(
            f"B_LL is not Hurwitz: largest eigenvalue real part {eig_max:.6g} "
            f"(largest diagonal entry at bus {load_ids[i]})")
    comps = load_components(b_ll)
    if len(comps) > 1:
        smallest = min(comps, key=len)
        msg = (f"load-induced graph is disconnected ({len(comps)} components); "
               f"smallest component buses {[load_ids[i] for i in smallest]}")
        if strict_connectivity:
            raise AssumptionViolated(msg)
        warnings.warn(msg + "; components are treated as decoupled blocks")


def build_model(case: GridCase, angle_embedding=None, *,
                strict_connectivity: bool = False) -> NetworkModel:
    """Assemble, partition and validate the reactive network model.

    Parameters
    ----------
    case : GridCase
    angle_embedding : dict, optional
        Constant angle difference per branch ``(from, to)``; flat angles if
        omitted.
    strict_connectivity : bool
        Raise instead of warning when the load-induced graph is
        disconnected. Disconnected components are electrically separated by
        generator buses, so the model stays well defined block by block.

    Raises
    ------
    AssumptionViolated
        ``B_LL`` is not Metzler or not Hurwitz, or (strict mode) its graph
        is disconnected.
    SingularSystem
        ``B_LL`` is numerically singular.
    """
    B = assemble_susceptance(case, angle_embedding)
    kinds = np.array([b.kind for b in case.buses])
    li = np.flatnonzero(kinds == "load")
    gi = np.flatnonzero(kinds == "generator")
    load_ids = tuple(case.buses[k].id for k in li)
    gen_ids = tuple(case.buses[k].id for k in gi)
    b_ll = B[np.ix_(li, li)]
    b_lg = B[np.ix_(li, gi)]
    b_gg = B[np.ix_(gi, gi)]
    v_gen = np.array([case.buses[k].v_setpoint for k in gi])
    if len(li) == 0:
        raise AssumptionViolated("case has no load buses")
    _check_assumptions(b_ll, load_ids, strict_connectivity)
    if np.linalg.cond(b_ll) > 1e14:
        raise SingularSystem("B_LL is numerically singular")
    v_open = -np.linalg.solve(b_ll, b_lg @ v_gen)
    if np.any(v_open <= 0):
        k = int(np.argmin(v_open))
        raise AssumptionViolated(f"non-positive open-circuit voltage at bus {load_ids[k]}")
    q_crit = 0.25 * (v_open[:, None] * b_ll * v_open[None, :])
    q_crit = 0.5 * (q_crit + q_crit.T)
    lu = scipy.linalg.lu_factor(q_crit)
    return NetworkModel(b_ll, b_lg, b_gg, v_gen, v_open, q_crit, load_ids, gen_ids, lu)


def normalize_voltages(model: NetworkModel, v_load) -> np.ndarray:
    """Normalized voltages ``diag(V_L*)^{-1} V_L``."""
    return np.asarray(v_load, dtype=float) / model.v_open


def denormalize_voltages(model: NetworkModel, v_norm) -> np.ndarray:
    return np.asarray(v_norm, dtype=float) * model.v_open


def collapse_margin(model: NetworkModel, q_load) -> float:
    """Distance-to-collapse measure ``||Q_crit^{-1} Q_L||_inf``.

    Values below one certify a unique high-voltage solution of the
    decoupled reactive power flow.
    """
    z = model.solve_qcrit(q_load)
    if not np.all(np.isfinite(z)):
        raise SingularSystem("Q_crit solve produced non-finite values")
    return float(np.max(np.abs(z))) if z.size else 0.0
