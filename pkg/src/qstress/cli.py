"""Command-line front end: ``qstress {analyze,optimize,place,sweep,simulate}``.

Every command reads one case, writes CSV files (header row, 17
significant digits) into ``--out`` and prints a short summary.

Exit codes
----------
0  success
1  invalid command-line value
2  modelling assumption violated (``AssumptionViolated``, ``SingularSystem``)
3  unreadable or malformed input (missing file, ``MalformedCase``, ``InvalidTopology``)
4  infeasible problem (``Infeasible``, ``InfeasibleBox``)
5  simulation diverged (``PlantDiverged``)
6  numerical failure (``NotConverged``, ``InternalError``, overflow)
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .case_io import GridCase, builtin_case_path, load_case
from .dist_controller import (
    build_xproblem, constant_schedule, default_rho, jump_schedule, read_schedule_csv,
    run_online, step_size_bound, summarize,
)
from .errors import (
    AssumptionViolated, Infeasible, InfeasibleBox, InternalError, InvalidTopology,
    MalformedCase, NotConverged, PlantDiverged, SingularSystem,
)
from .network_model import build_model, collapse_margin, load_components
from .power_flow import nose_curve, solve_rpfe
from .smooth_norm import SmoothCfg
from .stress_opt import (
    build_problem, capacity_fraction, default_gamma_grid, gamma_sweep, polish,
    solve_sparse_placement, solve_stress_lp, voltage_profile,
)

logger = logging.getLogger("qstress")

EXIT_CODES = (
    (AssumptionViolated, 2), (SingularSystem, 2),
    (MalformedCase, 3), (InvalidTopology, 3), (OSError, 3),
    (Infeasible, 4), (InfeasibleBox, 4),
    (PlantDiverged, 5),
    (NotConverged, 6), (InternalError, 6), (ArithmeticError, 6),
    (ValueError, 1),
)


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Resolved command-line settings shared by all commands."""

    case: str
    format: str | None = None
    v_nominal: float = 1.0
    dev_alpha: float = 0.05
    cap_frac: float = 0.5
    cap_file: str | None = None
    comp_buses: tuple | None = None
    gamma: float = 0.0
    gamma_grid: str | None = None
    sharpness: float = 50.0
    exponent_eps: float = 1.0
    rho: float | None = None
    rounds: int = 60000
    plant: str = "linearized"
    schedule: str | None = None
    out: str = "."
    seed: int = 0
    samples: int = 100
    engine: str = "vectorized"
    workers: int = 1

    def __post_init__(self):
        if not 0.0 < self.dev_alpha < 1.0:
            raise UsageError("--alpha must lie in (0, 1)")
        if self.cap_frac < 0:
            raise UsageError("--cap-frac must be nonnegative")
        if self.rounds < 0:
            raise UsageError("--rounds must be nonnegative")


# ---------------------------------------------------------------------------
# helpers


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _read_case(cfg: RunConfig) -> GridCase:
    path = cfg.case
    if path.startswith("builtin:"):
        path = str(builtin_case_path(path.split(":", 1)[1]))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        case = load_case(path, cfg.format)
    for w in caught:
        logger.warning("%s", w.message)
    return case


def _model(case):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        model = build_model(case)
    for w in caught:
        logger.warning("%s", w.message)
    return model


def _base_q_load(case, model) -> np.ndarray:
    index = case.bus_index()
    return np.array([-case.buses[index[b]].q_demand for b in model.load_bus_ids])


def _capacities(cfg: RunConfig, model, q_load):
    """Capacity boxes from ``--cap-file`` or ``--cap-frac`` (restricted to ``--comp-buses``)."""
    if cfg.cap_file is not None:
        pos = {b: k for k, b in enumerate(model.load_bus_ids)}
        q_min = np.zeros(model.n_load)
        q_max = np.zeros(model.n_load)
        with open(cfg.cap_file, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"bus_id", "q_min", "q_max"} <= set(
                    reader.fieldnames):
                raise MalformedCase(f"{cfg.cap_file}: needs columns bus_id, q_min, q_max")
            for line, rec in enumerate(reader, start=2):
                try:
                    bus = int(rec["bus_id"])
                    lo, hi = float(rec["q_min"]), float(rec["q_max"])
                except (TypeError, ValueError) as exc:
                    raise MalformedCase(f"{cfg.cap_file}:{line}: {exc}") from None
                if bus not in pos:
                    raise MalformedCase(f"{cfg.cap_file}:{line}: bus {bus} is not a load bus")
                q_min[pos[bus]], q_max[pos[bus]] = lo, hi
        return q_min, q_max
    mask = None
    if cfg.comp_buses is not None:
        unknown = set(cfg.comp_buses) - set(model.load_bus_ids)
        if unknown:
            raise UsageError(f"--comp-buses: {sorted(unknown)} are not load buses")
        mask = np.array([b in cfg.comp_buses for b in model.load_bus_ids])
    return capacity_fraction(q_load, cfg.cap_frac, mask)


def parse_gamma_grid(text: str | None) -> np.ndarray:
    """``None`` (default grid), ``"lo:hi:num"`` (log-spaced) or a comma list."""
    if text is None:
        return default_gamma_grid()
    try:
        if ":" in text:
            lo, hi, num = text.split(":")
            return np.logspace(np.log10(float(lo)), np.log10(float(hi)), int(num))
        return np.array([float(g) for g in text.split(",")])
    except ValueError:
        raise UsageError(f"--gamma-grid: cannot parse {text!r}") from None


def _problem(cfg, case, model):
    q_load = _base_q_load(case, model)
    q_min, q_max = _capacities(cfg, model, q_load)
    return build_problem(model, q_load, q_min, q_max, cfg.v_nominal, cfg.dev_alpha)


# ---------------------------------------------------------------------------
# commands


def cmd_analyze(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    case = _read_case(cfg)
    model = _model(case)
    q_load = _base_q_load(case, model)
    margin = collapse_margin(model, q_load)
    comps = load_components(model.b_ll)
    summary = [
        ("n_load", model.n_load), ("n_gen", model.n_gen),
        ("collapse_margin", margin), ("solvable_certified", margin < 1.0),
        ("b_ll_metzler", True), ("b_ll_hurwitz", True),
        ("load_components", len(comps)),
        ("v_open_min", float(np.min(model.v_open))), ("v_open_max", float(np.max(model.v_open))),
    ]
    write_csv(out / "qcrit.csv", ["bus_id"] + list(model.load_bus_ids),
              [[b] + list(row) for b, row in zip(model.load_bus_ids, model.q_crit)])
    write_csv(out / "open_circuit.csv", ["bus_id", "v_open"],
              zip(model.load_bus_ids, model.v_open))

    if np.any(q_load != 0):
        curve = nose_curve(model, q_load)
        write_csv(out / "nose_curve.csv",
                  ["scale"] + [f"v_{b}" for b in model.load_bus_ids]
                  + ([f"v_low_{model.load_bus_ids[0]}"] if model.n_load == 1 else []),
                  [[p.scale] + list(p.high.v_load)
                   + (list(p.low.v_load) if p.low is not None else []) for p in curve.points])
        summary.append(("nose_tip_scale", curve.tip_scale))

    rng = np.random.default_rng(cfg.seed)
    rows = []
    for k in range(cfg.samples):
        scale = rng.uniform(0.0, 2.0, model.n_load)
        ql = scale * q_load
        m = collapse_margin(model, ql)
        sol = solve_rpfe(model, ql, raise_on_fail=False)
        rows.append((k, m, sol.converged, float(np.min(sol.v_load))))
    write_csv(out / "scalings.csv", ["sample", "collapse_margin", "rpfe_converged", "v_min"],
              rows)
    write_csv(out / "model_summary.csv", ["quantity", "value"], summary)

    print(f"load buses {model.n_load}, generator buses {model.n_gen}")
    print(f"collapse margin {margin:.6g} ({'< 1: solvable' if margin < 1 else '>= 1'})")
    print(f"load-graph components {len(comps)}")
    if model.n_load and np.any(q_load != 0):
        print(f"nose tip at {curve.tip_scale:.6g} x base load")
    return 0


def _voltage_rows(problem, q):
    model = problem.model
    lo = problem.v_nominal * (1 - problem.dev_alpha)
    hi = problem.v_nominal * (1 + problem.dev_alpha)
    v_before = voltage_profile(problem, np.zeros(problem.n))
    v_after = voltage_profile(problem, q)
    return [(b, problem.q_load[k], q[k], v_before[k], v_after[k], lo, hi)
            for k, b in enumerate(model.load_bus_ids)]


def cmd_optimize(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    case = _read_case(cfg)
    model = _model(case)
    problem = _problem(cfg, case, model)
    sol = solve_stress_lp(problem)
    write_csv(out / "optimize.csv",
              ["bus_id", "q_load", "q_opt", "v_before", "v_hat", "secure_lo", "secure_hi"],
              _voltage_rows(problem, sol.q_opt))
    base = problem.base_cost()
    print(f"stress {sol.cost:.6g} (uncompensated {base:.6g}, ratio "
          f"{sol.cost / base if base > 0 else 0.0:.6g})")
    print(f"devices {len(sol.support)}, negative injections "
          f"{int(np.sum(sol.q_opt[sol.support] < 0))}")
    print("KKT residuals " + ", ".join(f"{k} {v:.2e}" for k, v in sol.kkt.items()))
    return 0


def cmd_place(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    case = _read_case(cfg)
    model = _model(case)
    problem = _problem(cfg, case, model)
    sparse = solve_sparse_placement(problem, cfg.gamma)
    pol = polish(problem, sparse.support)
    selected = np.zeros(problem.n, dtype=bool)
    selected[sparse.support] = True
    rows = [(b, int(selected[k]), pol.q_opt[k], int(np.sign(pol.q_opt[k])) if selected[k] else 0)
            for k, b in enumerate(model.load_bus_ids)]
    write_csv(out / "placement.csv", ["bus_id", "selected", "q_opt", "sign"], rows)
    write_csv(out / "placement_voltages.csv",
              ["bus_id", "q_load", "q_opt", "v_before", "v_hat", "secure_lo", "secure_hi"],
              _voltage_rows(problem, pol.q_opt))
    base = problem.base_cost()
    print(f"gamma {cfg.gamma:g}: {len(sparse.support)} devices at buses "
          f"{[model.load_bus_ids[k] for k in sparse.support]}")
    print(f"polished stress {pol.cost:.6g}, ratio {pol.cost / base if base > 0 else 0.0:.6g}")
    return 0


def cmd_sweep(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    case = _read_case(cfg)
    model = _model(case)
    problem = _problem(cfg, case, model)
    gammas = parse_gamma_grid(cfg.gamma_grid)
    rows = gamma_sweep(problem, gammas)
    write_csv(out / "sweep.csv", ["gamma", "n_devices", "cost_ratio", "feasible"],
              [(r.gamma, r.n_devices, r.cost_ratio, r.feasible) for r in rows])
    profile_rows = []
    for r in rows:
        if r.feasible:
            v = voltage_profile(problem, r.q)
            profile_rows.extend((r.gamma, b, v[k]) for k, b in enumerate(model.load_bus_ids))
    write_csv(out / "sweep_profiles.csv", ["gamma", "bus_id", "v_hat"], profile_rows)
    for r in rows:
        print(f"gamma {r.gamma:.4e}  devices {r.n_devices:3d}  ratio {r.cost_ratio:.6g}"
              + ("" if r.feasible else "  infeasible"))
    return 0


def cmd_simulate(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    case = _read_case(cfg)
    model = _model(case)
    q_load = _base_q_load(case, model)
    q_min, q_max = _capacities(cfg, model, q_load)
    xproblem = build_xproblem(model, q_load, q_min, q_max, cfg.v_nominal, cfg.dev_alpha)
    smooth = SmoothCfg(cfg.sharpness, cfg.exponent_eps)
    rho = cfg.rho
    if rho is None:
        rho = default_rho(model, smooth)
    elif smooth.exponent_eps == 1.0 and rho > step_size_bound(model, smooth):
        logger.warning("rho %.4g exceeds the convergence bound %.4g", rho,
                       step_size_bound(model, smooth))
    if cfg.schedule is not None:
        schedule = read_schedule_csv(cfg.schedule, case, model, cfg.rounds)
    elif cfg.rounds > 0:
        schedule = jump_schedule(case, model, cfg.rounds)
    else:
        schedule = constant_schedule(case, model, 0)
    try:
        trace = run_online(case, model, xproblem, smooth, rho, schedule, cfg.rounds,
                           cfg.plant, engine=cfg.engine, workers=cfg.workers,
                           v_nominal=cfg.v_nominal, dev_alpha=cfg.dev_alpha)
    except PlantDiverged as exc:
        if exc.trace is not None:
            exc.trace.write_csv(out / "trace.csv")
        raise
    trace.write_csv(out / "trace.csv")
    summary = summarize(trace)
    summary["rho"] = rho
    write_csv(out / "simulate_summary.csv", ["quantity", "value"],
              [(k, "" if v is None else v) for k, v in summary.items()])
    for k, v in summary.items():
        print(f"{k} {v}")
    return 0


COMMANDS = {
    "analyze": cmd_analyze, "optimize": cmd_optimize, "place": cmd_place,
    "sweep": cmd_sweep, "simulate": cmd_simulate,
}


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--case", required=True,
                        help="case file, or builtin:case30 / builtin:case2")
    common.add_argument("--format", choices=["matpower", "native"],
                        help="case format (default: from the file suffix)")
    common.add_argument("--vn", type=float, default=1.0, help="nominal voltage V_N (p.u.)")
    common.add_argument("--alpha", type=float, default=0.05,
                        help="allowed relative voltage deviation")
    common.add_argument("--cap-frac", type=float, default=0.5,
                        help="capacity box as a fraction of the largest reactive load")
    common.add_argument("--cap-file", help="CSV with bus_id, q_min, q_max (p.u.)")
    common.add_argument("--comp-buses",
                        help="comma-separated load bus ids that host compensators")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--seed", type=int, default=0, help="seed for random load scalings")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="qstress", description=__doc__.split("\n")[0],
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    an = sub.add_parser("analyze", parents=[common], help="model summary and nose curve")
    an.add_argument("--samples", type=int, default=100,
                    help="number of random load scalings to test")
    sub.add_parser("optimize", parents=[common], help="minimum-stress injections")
    pl = sub.add_parser("place", parents=[common], help="sparse compensator placement")
    pl.add_argument("--gamma", type=float, default=0.0, help="sparsity weight")
    sw = sub.add_parser("sweep", parents=[common], help="device count versus gamma")
    sw.add_argument("--gamma-grid", help="lo:hi:num (log-spaced) or a comma list")
    si = sub.add_parser("simulate", parents=[common], help="online distributed controller")
    si.add_argument("--sharpness", type=float, default=50.0, help="softmax sharpness a")
    si.add_argument("--eps", type=float, default=1.0, help="exponent offset of the surrogate")
    si.add_argument("--rho", type=float, help="dual step size (default 0.9 x bound)")
    si.add_argument("--rounds", type=int, default=60000, help="controller rounds")
    si.add_argument("--plant", choices=["linearized", "coupled"], default="linearized")
    si.add_argument("--schedule", help="CSV of load overrides t, bus_id, p_demand, q_demand")
    si.add_argument("--engine", choices=["vectorized", "agents"], default="vectorized",
                    help="array evaluation or explicit per-agent message passing")
    si.add_argument("--workers", type=int, default=1, help="threads for the agent engine")
    return parser


def _config(ns) -> RunConfig:
    comp = None
    if ns.comp_buses:
        try:
            comp = tuple(int(b) for b in ns.comp_buses.split(","))
        except ValueError:
            raise UsageError("--comp-buses must be comma-separated integers") from None
    return RunConfig(
        case=ns.case, format=ns.format, v_nominal=ns.vn, dev_alpha=ns.alpha,
        cap_frac=ns.cap_frac, cap_file=ns.cap_file, comp_buses=comp,
        gamma=getattr(ns, "gamma", 0.0), gamma_grid=getattr(ns, "gamma_grid", None),
        sharpness=getattr(ns, "sharpness", 50.0), exponent_eps=getattr(ns, "eps", 1.0),
        rho=getattr(ns, "rho", None), rounds=getattr(ns, "rounds", 60000),
        plant=getattr(ns, "plant", "linearized"), schedule=getattr(ns, "schedule", None),
        out=ns.out, seed=ns.seed, samples=getattr(ns, "samples", 100),
        engine=getattr(ns, "engine", "vectorized"), workers=getattr(ns, "workers", 1))


def exit_code(exc: BaseException) -> int:
    for kind, code in EXIT_CODES:
        if isinstance(exc, kind):
            return code
    return 1


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s: %(message)s",
                        stream=sys.stderr)
    try:
        ns = build_parser().parse_args(argv)
        if ns.verbose:
            logging.getLogger().setLevel(logging.DEBUG)
        cfg = _config(ns)
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        return COMMANDS[ns.command](cfg)
    except UsageError as exc:
        print(f"qstress: error: {exc}", file=sys.stderr)
        return 1
    except Infeasible as exc:
        print(f"qstress: {exc}", file=sys.stderr)
        for key, why in exc.report.items():
            print(f"  {key}: {why}", file=sys.stderr)
        return 4
    except (OSError, ValueError, ArithmeticError, *[k for k, _ in EXIT_CODES]) as exc:
        print(f"qstress: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
