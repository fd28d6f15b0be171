"""Distributed online stress minimization by dual ascent.

The controller works in the deviation coordinates

    x = -Q_crit^{-1} (Q_L + q),

which are four times the linearized normalized voltage deviation. It
minimizes the separable smooth surrogate ``sum_i exp(a x_i^2)`` of
``||x||_inf`` subject to the voltage box ``x_min <= x <= x_max`` and the
capacity box ``q_min <= q(x) <= q_max``, where the injection implied by
``x`` is the control law

    q(x) = -(Q_crit x + Q_L).

One synchronous round has two message exchanges. Each agent first reads
its neighbors' capacity multipliers, forms

    zeta_i = -(lam_hi_i - lam_lo_i) + sum_j Q_crit_ij (mu_hi_j - mu_lo_j)

and solves ``df/dx_i = zeta_i`` in closed form. It then reads its
neighbors' new ``x_j``, evaluates its own row of ``q(x)`` with the locally
measured ``Q_L,i = y_i - q_i`` and takes a projected ascent step on its
four multipliers. Neighbors are the nonzero pattern of ``Q_crit``.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.optimize

from .case_io import GridCase
from .errors import InfeasibleBox, InternalError, MalformedCase, NotConverged, PlantDiverged
from .network_model import NetworkModel, assemble_susceptance
from .power_flow import linearized_voltages, solve_coupled_pf
from .smooth_norm import SmoothCfg, f_cost, grad_f, primal_update
from .stress_opt import security_thresholds

logger = logging.getLogger(__name__)

RHO_FRACTION = 0.9
WATCHDOG_WINDOW = 100
WATCHDOG_GROWTH = 10.0
WATCHDOG_FLOOR = 1e-6


@dataclass(frozen=True, eq=False)
class XProblem:
    """Online stress problem in deviation coordinates.

    ``x_min``/``x_max`` do not depend on the load, so the same problem
    serves every round of an online run; ``q_load`` is the load used to
    build it and the default reference for offline comparisons.
    """

    model: NetworkModel
    q_load: np.ndarray
    x_min: np.ndarray
    x_max: np.ndarray
    q_min: np.ndarray
    q_max: np.ndarray

    @property
    def n(self) -> int:
        return len(self.x_min)

    @property
    def chi(self) -> np.ndarray:
        return np.concatenate([self.x_max, -self.x_min])

    @property
    def phi(self) -> np.ndarray:
        return np.concatenate([self.q_max, -self.q_min])

    def x_of_q(self, q, q_load=None) -> np.ndarray:
        ql = self.q_load if q_load is None else np.asarray(q_load, dtype=float)
        return -self.model.solve_qcrit(ql + np.asarray(q, dtype=float))

    def q_of_x(self, x, q_load=None) -> np.ndarray:
        """Control law ``-(Q_crit x + Q_L)`` before saturation."""
        ql = self.q_load if q_load is None else np.asarray(q_load, dtype=float)
        return -(self.model.q_crit @ np.asarray(x, dtype=float) + ql)

    def is_feasible(self, x, q_load=None, tol: float = 1e-9) -> bool:
        x = np.asarray(x, dtype=float)
        q = self.q_of_x(x, q_load)
        return bool(np.all(x >= self.x_min - tol) and np.all(x <= self.x_max + tol)
                    and np.all(q >= self.q_min - tol) and np.all(q <= self.q_max + tol))

    def with_load(self, q_load) -> XProblem:
        return replace(self, q_load=np.asarray(q_load, dtype=float))


def build_xproblem(model: NetworkModel, q_load, q_min, q_max, v_nominal: float = 1.0,
                   dev_alpha: float = 0.05) -> XProblem:
    """Deviation-coordinate problem with ``x`` bounds ``4(V_N(1 -+ alpha)/v_open - 1)``.

    Raises
    ------
    InfeasibleBox
        Some ``q_min > q_max`` or the voltage band is empty.
    """
    q_load = np.asarray(q_load, dtype=float)
    q_min = np.asarray(q_min, dtype=float)
    q_max = np.asarray(q_max, dtype=float)
    if q_min.shape != (model.n_load,) or q_max.shape != (model.n_load,) \
            or q_load.shape != (model.n_load,):
        raise ValueError("q_load, q_min and q_max need one entry per load bus")
    bad = np.flatnonzero(q_min > q_max)
    if bad.size:
        raise InfeasibleBox(
            f"q_min > q_max at load buses {[model.load_bus_ids[k] for k in bad]}")
    if not 0.0 < dev_alpha < 1.0:
        raise ValueError("dev_alpha must lie in (0, 1)")
    x_min = 4.0 * (v_nominal * (1.0 - dev_alpha) / model.v_open - 1.0)
    x_max = 4.0 * (v_nominal * (1.0 + dev_alpha) / model.v_open - 1.0)
    return XProblem(model, q_load, x_min, x_max, q_min, q_max)


def thresholds_agree(xproblem: XProblem, q, v_nominal: float, dev_alpha: float,
                     tol: float = 1e-9) -> bool:
    """Cross-check of the two voltage-security formulations for one ``q``.

    Returns True when "``x(q)`` within the x box" and "``-Q_crit^{-1} q``
    within the stress-LP thresholds" give the same verdict.
    """
    q = np.asarray(q, dtype=float)
    xi_min, xi_max = security_thresholds(xproblem.model, xproblem.q_load, v_nominal,
                                         dev_alpha)
    kq = -xproblem.model.solve_qcrit(q)
    by_xi = bool(np.all(kq >= xi_min - tol) and np.all(kq <= xi_max + tol))
    x = xproblem.x_of_q(q)
    by_x = bool(np.all(x >= xproblem.x_min - tol) and np.all(x <= xproblem.x_max + tol))
    return by_xi == by_x


# ---------------------------------------------------------------------------
# dual state and step size


@dataclass
class DualState:
    """Controller state after round ``t``.

    ``lam`` stacks ``[lam_hi; lam_lo]`` (upper and lower x bounds) and
    ``mu`` stacks ``[mu_hi; mu_lo]`` (upper and lower capacity bounds).
    ``q`` is the saturated injection applied to the plant.
    """

    x: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    q: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> DualState:
        return cls(np.zeros(n), np.zeros(2 * n), np.zeros(2 * n), np.zeros(n), 0)


def stacked_constraint_matrix(model: NetworkModel) -> np.ndarray:
    """``A = [I; -I; Q_crit; -Q_crit]``, the linear map from ``x`` to the constraints."""
    n = model.n_load
    eye = np.eye(n)
    return np.vstack([eye, -eye, model.q_crit, -model.q_crit])


def step_size_bound(model: NetworkModel, cfg: SmoothCfg) -> float:
    """Largest step ``2/L`` for which projected dual ascent converges.

    The dual gradient is Lipschitz with ``L = sigma_max(A)^2 / m`` where
    ``m = 2a`` is the strong convexity modulus of the cost at ``eps = 1``.
    """
    if cfg.exponent_eps != 1.0:
        raise ValueError("the step-size bound needs exponent_eps = 1")
    sigma = np.linalg.svd(stacked_constraint_matrix(model), compute_uv=False)[0]
    lipschitz = sigma ** 2 / (2.0 * cfg.sharpness)
    return 2.0 / lipschitz


def default_rho(model: NetworkModel, cfg: SmoothCfg) -> float:
    return RHO_FRACTION * step_size_bound(model, cfg)


def zeta_of(model: NetworkModel, lam, mu) -> np.ndarray:
    n = model.n_load
    return -(lam[:n] - lam[n:]) + model.q_crit @ (mu[:n] - mu[n:])


def dual_value(xproblem: XProblem, cfg: SmoothCfg, lam, mu, q_load=None) -> float:
    """Lagrangian dual function ``d(lam, mu)`` evaluated at its exact minimizer."""
    lam = np.asarray(lam, dtype=float)
    mu = np.asarray(mu, dtype=float)
    x = np.asarray(primal_update(cfg, zeta_of(xproblem.model, lam, mu)), dtype=float)
    q = xproblem.q_of_x(x, q_load)
    g_x = np.concatenate([x, -x]) - xproblem.chi
    g_q = np.concatenate([q, -q]) - xproblem.phi
    return f_cost(cfg, x) + float(lam @ g_x) + float(mu @ g_q)


# ---------------------------------------------------------------------------
# agents and message passing


@dataclass(frozen=True)
class AgentView:
    """Static data held by the agent at one load bus.

    ``neighbors`` excludes the agent itself; ``weights[k]`` is
    ``Q_crit[index, neighbors[k]]`` and ``self_weight`` the diagonal entry.
    """

    index: int
    bus_id: int
    neighbors: tuple
    weights: tuple
    self_weight: float
    x_min: float
    x_max: float
    q_min: float
    q_max: float


def build_agents(xproblem: XProblem) -> list[AgentView]:
    q = xproblem.model.q_crit
    agents = []
    for i in range(xproblem.n):
        nb = tuple(int(j) for j in np.flatnonzero(q[i]) if j != i)
        agents.append(AgentView(
            index=i, bus_id=xproblem.model.load_bus_ids[i], neighbors=nb,
            weights=tuple(float(q[i, j]) for j in nb), self_weight=float(q[i, i]),
            x_min=float(xproblem.x_min[i]), x_max=float(xproblem.x_max[i]),
            q_min=float(xproblem.q_min[i]), q_max=float(xproblem.q_max[i])))
    return agents


class MessageLog:
    """Counts messages per ``(receiver, sender, kind)`` and enforces locality."""

    def __init__(self, agents: list[AgentView]):
        self._allowed = {a.index: frozenset(a.neighbors) for a in agents}
        self.counts: Counter = Counter()

    def record(self, receiver: int, senders, kind: str) -> None:
        allowed = self._allowed[receiver]
        for j in senders:
            if j not in allowed:
                raise InternalError(f"agent {receiver} read {kind} from non-neighbor {j}")
            self.counts[(receiver, j, kind)] += 1

    def senders_of(self, receiver: int, kind: str | None = None) -> set:
        return {s for (r, s, k) in self.counts if r == receiver and (kind is None or k == kind)}


def _agent_primal(agent: AgentView, cfg: SmoothCfg, lam_hi: float, lam_lo: float,
                  own_mu: float, nb_mu) -> float:
    zeta = -(lam_hi - lam_lo) + agent.self_weight * own_mu
    for w, m in zip(agent.weights, nb_mu):
        zeta += w * m
    return primal_update(cfg, zeta)


def _agent_dual(agent: AgentView, rho: float, x_i: float, nb_x, q_load_i: float,
                lam_hi: float, lam_lo: float, mu_hi: float, mu_lo: float):
    r = agent.self_weight * x_i
    for w, xj in zip(agent.weights, nb_x):
        r += w * xj
    q_i = -(r + q_load_i)
    lam_hi = max(lam_hi + rho * (x_i - agent.x_max), 0.0)
    lam_lo = max(lam_lo + rho * (agent.x_min - x_i), 0.0)
    mu_hi = max(mu_hi + rho * (q_i - agent.q_max), 0.0)
    mu_lo = max(mu_lo + rho * (agent.q_min - q_i), 0.0)
    return lam_hi, lam_lo, mu_hi, mu_lo, min(max(q_i, agent.q_min), agent.q_max)


def agent_round(agents: list[AgentView], state: DualState, q_load, rho: float,
                cfg: SmoothCfg, *, executor=None, log: MessageLog | None = None) -> DualState:
    """One synchronous round of the distributed dual ascent.

    Parameters
    ----------
    agents : list of AgentView
    state : DualState
        Multipliers from the previous round (``x`` and ``q`` are outputs).
    q_load : array_like
        Each agent's locally measured load ``Q_L,i``.
    rho : float
        Dual step size, at most :func:`step_size_bound`.
    executor : concurrent.futures.Executor, optional
        Runs the agents of each phase concurrently. Every agent reads only
        the snapshot published before the phase, so the result does not
        depend on scheduling.
    log : MessageLog, optional
        Records every neighbor read.
    """
    n = len(agents)
    lam, mu = state.lam, state.mu
    mu_diff = [float(mu[i] - mu[n + i]) for i in range(n)]
    run = map if executor is None else executor.map

    def primal(a):
        if log is not None:
            log.record(a.index, a.neighbors, "mu")
        return _agent_primal(a, cfg, float(lam[a.index]), float(lam[n + a.index]),
                             mu_diff[a.index], [mu_diff[j] for j in a.neighbors])

    x = list(run(primal, agents))
    ql = [float(v) for v in np.asarray(q_load, dtype=float)]

    def dual(a):
        i = a.index
        if log is not None:
            log.record(i, a.neighbors, "x")
        return _agent_dual(a, rho, x[i], [x[j] for j in a.neighbors], ql[i],
                           float(lam[i]), float(lam[n + i]), float(mu[i]), float(mu[n + i]))

    out = list(run(dual, agents))
    arr = np.array(out)
    return DualState(
        x=np.array(x), lam=np.concatenate([arr[:, 0], arr[:, 1]]),
        mu=np.concatenate([arr[:, 2], arr[:, 3]]), q=arr[:, 4], t=state.t + 1)


def vectorized_round(xproblem: XProblem, state: DualState, q_load, rho: float,
                     cfg: SmoothCfg) -> DualState:
    """The same round as :func:`agent_round` evaluated with array operations.

    Agrees with the agent implementation up to floating-point summation
    order and is much faster for long simulations.
    """
    n = xproblem.n
    lam, mu = state.lam, state.mu
    x = np.asarray(primal_update(cfg, zeta_of(xproblem.model, lam, mu)), dtype=float)
    q = xproblem.q_of_x(x, q_load)
    lam = np.maximum(lam + rho * (np.concatenate([x, -x]) - xproblem.chi), 0.0)
    mu = np.maximum(mu + rho * (np.concatenate([q, -q]) - xproblem.phi), 0.0)
    q_applied = np.minimum(np.maximum(q, xproblem.q_min), xproblem.q_max)
    return DualState(x, lam, mu, q_applied, state.t + 1)


# ---------------------------------------------------------------------------
# centralized reference


def centralized_optimum(xproblem: XProblem, cfg: SmoothCfg, q_load=None) -> np.ndarray:
    """Optimal injections of the smooth problem, solved centrally.

    Eliminates ``x`` through ``x = -Q_crit^{-1}(Q_L + q)``, fixes the
    buses whose capacity box is a single point and runs SLSQP on the
    remaining injections. Used as the reference the distributed iterates
    must reach.

    Raises
    ------
    InfeasibleBox
        No injection satisfies both boxes.
    InternalError
        The solver failed to converge.
    """
    ql = xproblem.q_load if q_load is None else np.asarray(q_load, dtype=float)
    model = xproblem.model
    q_fixed = np.where(xproblem.q_min == xproblem.q_max, xproblem.q_min, 0.0)
    free = np.flatnonzero(xproblem.q_min < xproblem.q_max)
    k_free = model.solve_qcrit(np.eye(model.n_load)[:, free]) if free.size else None
    x0 = -model.solve_qcrit(ql + q_fixed)
    a = cfg.sharpness
    n = xproblem.n

    def x_of(p):
        return x0 - k_free @ p

    def scaled_cost(p):
        return f_cost(cfg, x_of(p)) / n

    def scaled_grad(p):
        return -(k_free.T @ grad_f(cfg, x_of(p))) / n

    if free.size == 0:
        if not xproblem.is_feasible(x0, ql):
            raise InfeasibleBox("fixed injections violate the voltage band")
        return q_fixed
    cons = [
        {"type": "ineq", "fun": lambda p: xproblem.x_max - x_of(p), "jac": lambda p: k_free},
        {"type": "ineq", "fun": lambda p: x_of(p) - xproblem.x_min, "jac": lambda p: -k_free},
    ]
    p0 = np.clip(np.zeros(free.size), xproblem.q_min[free], xproblem.q_max[free])
    res = scipy.optimize.minimize(
        scaled_cost, p0, jac=scaled_grad, method="SLSQP",
        bounds=list(zip(xproblem.q_min[free], xproblem.q_max[free])), constraints=cons,
        options={"ftol": 1e-15, "maxiter": 1000})
    q = q_fixed.copy()
    q[free] = res.x
    x = x_of(res.x)
    if not xproblem.is_feasible(x, ql, tol=1e-7):
        if res.status == 4 or not res.success:
            raise InfeasibleBox(
                f"no injection keeps the voltages in the band ({res.message}); "
                f"a = {a:g}")
        raise InternalError(f"centralized reference is infeasible: {res.message}")
    if not res.success:
        raise InternalError(f"centralized reference did not converge: {res.message}")
    return q


# ---------------------------------------------------------------------------
# load schedules


@dataclass(frozen=True)
class LoadSchedule:
    """Per-round loads at the load buses (model order).

    ``q_load[t]`` holds the reactive injections ``Q_L(t)`` (negative for
    consumption) and ``p_demand[t]`` the active demands, both in p.u.; row
    ``t`` covers rounds ``0..rounds``.
    """

    q_load: np.ndarray
    p_demand: np.ndarray

    @property
    def rounds(self) -> int:
        return self.q_load.shape[0] - 1


def _base_loads(case: GridCase, model: NetworkModel):
    index = case.bus_index()
    q = np.array([-case.buses[index[b]].q_demand for b in model.load_bus_ids])
    p = np.array([case.buses[index[b]].p_demand for b in model.load_bus_ids])
    return q, p


def constant_schedule(case: GridCase, model: NetworkModel, rounds: int) -> LoadSchedule:
    q, p = _base_loads(case, model)
    return LoadSchedule(np.tile(q, (rounds + 1, 1)), np.tile(p, (rounds + 1, 1)))


def jump_schedule(case: GridCase, model: NetworkModel, rounds: int, factor: float = 1.4,
                  at: int | None = None) -> LoadSchedule:
    """Base loads, scaled by ``factor`` (active and reactive) from round ``at``.

    ``at`` defaults to ``rounds // 2``.
    """
    sched = constant_schedule(case, model, rounds)
    at = rounds // 2 if at is None else at
    q, p = sched.q_load.copy(), sched.p_demand.copy()
    q[at:] *= factor
    p[at:] *= factor
    return LoadSchedule(q, p)


def read_schedule_csv(path, case: GridCase, model: NetworkModel, rounds: int) -> LoadSchedule:
    """Schedule from a CSV of overrides ``t, bus_id, p_demand, q_demand``.

    Demands are in p.u. with positive values meaning consumption. A row
    sets the demand of one load bus from round ``t`` onward, until a later
    row for the same bus overrides it; buses without rows keep the case
    values.

    Raises
    ------
    MalformedCase
        Missing columns, non-numeric values or unknown load buses.
    """
    sched = constant_schedule(case, model, rounds)
    q, p = sched.q_load.copy(), sched.p_demand.copy()
    pos = {b: k for k, b in enumerate(model.load_bus_ids)}
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"t", "bus_id", "p_demand", "q_demand"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise MalformedCase(f"{path}: schedule needs columns {sorted(need)}")
        for line, rec in enumerate(reader, start=2):
            try:
                t, bus = int(rec["t"]), int(rec["bus_id"])
                pd, qd = float(rec["p_demand"]), float(rec["q_demand"])
            except (TypeError, ValueError) as exc:
                raise MalformedCase(f"{path}:{line}: {exc}") from None
            if bus not in pos:
                raise MalformedCase(f"{path}:{line}: bus {bus} is not a load bus")
            if t < 0:
                raise MalformedCase(f"{path}:{line}: negative round {t}")
            rows.append((t, pos[bus], pd, qd))
    for t, k, pd, qd in sorted(rows, key=lambda r: r[0]):
        if t <= rounds:
            p[t:, k] = pd
            q[t:, k] = -qd
    return LoadSchedule(q, p)


# ---------------------------------------------------------------------------
# online simulation


@dataclass
class ScenarioTrace:
    """Per-round record of an online run (arrays indexed by round, then bus).

    ``v_coupled`` is NaN in linearized-plant runs. ``err_norm`` is the
    Euclidean distance between the applied injections and the centralized
    optimum for the loads of that round, NaN while no secure injection
    exists for those loads.
    """

    load_bus_ids: tuple
    t: list = field(default_factory=list)
    q_load: list = field(default_factory=list)
    y: list = field(default_factory=list)
    q: list = field(default_factory=list)
    x: list = field(default_factory=list)
    v_linearized: list = field(default_factory=list)
    v_coupled: list = field(default_factory=list)
    err_norm: list = field(default_factory=list)
    secure: list = field(default_factory=list)
    dual: list = field(default_factory=list)
    references: dict = field(default_factory=dict)
    diverged: bool = False
    message: str = ""

    def __len__(self) -> int:
        return len(self.t)

    def array(self, name: str) -> np.ndarray:
        return np.asarray(getattr(self, name), dtype=float)

    def write_csv(self, path) -> None:
        """One row per (round, load bus) with 17 significant digits."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "bus_id", "q_load", "y", "q", "x", "v_coupled", "v_linearized",
                        "err_norm", "secure"])
            for r, t in enumerate(self.t):
                for k, bus in enumerate(self.load_bus_ids):
                    w.writerow([t, bus] + [format(float(v), ".17g") for v in (
                        self.q_load[r][k], self.y[r][k], self.q[r][k], self.x[r][k],
                        self.v_coupled[r][k], self.v_linearized[r][k], self.err_norm[r])]
                        + [int(self.secure[r][k])])


def _watchdog(history: list, value: float) -> bool:
    """True when the residual grew more than tenfold over the window."""
    history.append(value)
    if len(history) <= WATCHDOG_WINDOW:
        return False
    old = history[-WATCHDOG_WINDOW - 1]
    return value > WATCHDOG_FLOOR and value > WATCHDOG_GROWTH * max(old, WATCHDOG_FLOOR)


def run_online(case: GridCase, model: NetworkModel, xproblem: XProblem, cfg: SmoothCfg,
               rho: float | None, schedule: LoadSchedule, rounds: int | None = None,
               mode: str = "linearized", *, engine: str = "vectorized", workers: int = 1,
               v_nominal: float = 1.0, dev_alpha: float = 0.05, record_dual: bool = False,
               state: DualState | None = None) -> ScenarioTrace:
    """Closed-loop simulation of the controller against a plant.

    Each round measures the aggregate load-bus injection ``y = Q_L + q``
    from the plant, recovers ``Q_L = y - q`` locally, runs one controller
    round and applies the saturated injection to the plant. Multipliers
    carry over across load changes.

    Parameters
    ----------
    case, model, xproblem, cfg
        Grid, reactive model, controller problem and surrogate settings.
    rho : float or None
        Dual step size; ``None`` uses 0.9 times the convergence bound.
    schedule : LoadSchedule
    rounds : int, optional
        Number of controller rounds (default: all rounds of the schedule).
    mode : {"linearized", "coupled"}
        Plant model. The coupled plant solves the lossless AC power flow
        with the schedule's active and reactive demands every round.
    engine : {"vectorized", "agents"}
        Array evaluation of the round or explicit per-agent message passing.
    workers : int
        Thread count for the agent engine.
    record_dual : bool
        Also record the dual value after every round.

    Raises
    ------
    PlantDiverged
        The coupled power flow failed or the controller residual blew up;
        the truncated trace is attached and flagged.
    """
    if mode not in ("linearized", "coupled"):
        raise ValueError("mode must be 'linearized' or 'coupled'")
    if engine not in ("vectorized", "agents"):
        raise ValueError("engine must be 'vectorized' or 'agents'")
    rounds = schedule.rounds if rounds is None else rounds
    if rounds < 0 or rounds > schedule.rounds:
        raise ValueError("rounds must lie between 0 and the schedule length")
    rho = default_rho(model, cfg) if rho is None else float(rho)
    if not rho > 0:
        raise ValueError("rho must be positive")
    n = model.n_load
    state = DualState.zeros(n) if state is None else state
    agents = build_agents(xproblem) if engine == "agents" else None
    pool = ThreadPoolExecutor(workers) if engine == "agents" and workers > 1 else None
    susceptance = assemble_susceptance(case) if mode == "coupled" else None
    pf_prev = None
    trace = ScenarioTrace(model.load_bus_ids)
    refs: dict = {}
    v_lo, v_hi = v_nominal * (1 - dev_alpha), v_nominal * (1 + dev_alpha)
    residuals: list = []
    prev_load = None

    def reference(ql):
        # an infeasible load level has no reference; the controller still runs
        key = ql.tobytes()
        if key not in refs:
            try:
                refs[key] = centralized_optimum(xproblem, cfg, ql)
            except InfeasibleBox as exc:
                logger.warning("round %d: no secure injection for the current load (%s); "
                               "err_norm is NaN until the load changes", t, exc)
                refs[key] = np.full(n, np.nan)
        return refs[key]

    try:
        for t in range(rounds + 1):
            ql_true = schedule.q_load[t]
            q_applied = state.q
            v_lin = linearized_voltages(model, ql_true + q_applied) * model.v_open
            if mode == "coupled":
                try:
                    pf = solve_coupled_pf(case, model, q_applied, p_scale=schedule.p_demand[t],
                                          q_load=ql_true, init=pf_prev,
                                          susceptance=susceptance)
                except NotConverged as exc:
                    trace.diverged = True
                    trace.message = f"round {t}: {exc}"
                    raise PlantDiverged(trace.message, trace=trace) from exc
                pf_prev = pf
                y = pf.q_load_bus
                v_plant = pf.v_load
            else:
                y = ql_true + q_applied
                v_plant = np.full(n, np.nan)
            ql_meas = y - q_applied
            v_check = v_plant if mode == "coupled" else v_lin
            trace.t.append(t)
            trace.q_load.append(ql_true.copy())
            trace.y.append(np.array(y))
            trace.q.append(q_applied.copy())
            trace.x.append(state.x.copy())
            trace.v_linearized.append(v_lin)
            trace.v_coupled.append(np.array(v_plant))
            trace.err_norm.append(float(np.linalg.norm(q_applied - reference(ql_true))))
            trace.secure.append((v_check >= v_lo - 1e-12) & (v_check <= v_hi + 1e-12))
            if record_dual:
                trace.dual.append(dual_value(xproblem, cfg, state.lam, state.mu, ql_meas))
            if t == rounds:
                break
            if prev_load is not None and np.max(np.abs(ql_meas - prev_load)) > 1e-8:
                residuals.clear()
            prev_load = ql_meas
            if engine == "agents":
                new = agent_round(agents, state, ql_meas, rho, cfg, executor=pool)
            else:
                new = vectorized_round(xproblem, state, ql_meas, rho, cfg)
            step = math.sqrt(float(np.sum((new.lam - state.lam) ** 2)
                                   + np.sum((new.mu - state.mu) ** 2))) / rho
            state = new
            if not np.all(np.isfinite(state.x)) or _watchdog(residuals, step):
                trace.diverged = True
                before = (residuals[-WATCHDOG_WINDOW - 1] if len(residuals) > WATCHDOG_WINDOW
                          else float("nan"))
                trace.message = (f"round {t}: controller residual grew from {before:.3e} "
                                 f"to {step:.3e} within {WATCHDOG_WINDOW} rounds; "
                                 f"reduce rho (now {rho:.4g})")
                raise PlantDiverged(trace.message, trace=trace)
    finally:
        if pool is not None:
            pool.shutdown()
    trace.references = {k: v for k, v in refs.items()}
    return trace


def rounds_to_tolerance(trace: ScenarioTrace, tol: float, start: int = 0) -> int | None:
    """First round at or after ``start`` from which ``err_norm <= tol`` holds to the end."""
    err = trace.array("err_norm")
    t = np.asarray(trace.t)
    ok = err <= tol
    for k in range(len(err) - 1, -1, -1):
        if t[k] < start:
            break
        if not ok[k]:
            return int(t[k + 1]) if k + 1 < len(t) else None
    first = np.flatnonzero(t >= start)
    return int(t[first[0]]) if first.size else None


def summarize(trace: ScenarioTrace) -> dict:
    """Final error, worst voltage deviation and settling rounds of a run."""
    err = trace.array("err_norm")
    v = trace.array("v_coupled")
    if np.all(np.isnan(v)):
        v = trace.array("v_linearized")
    return {
        "rounds": int(trace.t[-1]) if trace.t else 0,
        "final_err_norm": float(err[-1]) if err.size else float("nan"),
        "max_voltage_deviation": float(np.max(np.abs(v[-1] - 1.0))) if v.size else float("nan"),
        "rounds_to_1e-3": rounds_to_tolerance(trace, 1e-3),
        "diverged": trace.diverged,
    }


__all__ = [
    "XProblem", "build_xproblem", "thresholds_agree", "DualState", "AgentView",
    "MessageLog", "build_agents", "step_size_bound", "default_rho", "dual_value",
    "agent_round", "vectorized_round", "centralized_optimum", "LoadSchedule",
    "constant_schedule", "jump_schedule", "read_schedule_csv", "ScenarioTrace", "run_online",
    "rounds_to_tolerance", "summarize", "stacked_constraint_matrix",
]
