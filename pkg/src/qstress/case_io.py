"""Grid case parsing and serialization.

Two input formats are supported:

* a subset of the MATPOWER ``.m`` case format (``mpc.baseMVA``, ``mpc.bus``,
  ``mpc.gen``, ``mpc.branch``), and
* a native JSON document with top-level keys ``base_mva``, ``buses``,
  ``branches`` and ``gens`` whose floats are rendered with 17 significant
  digits so that ``parse_native_case(write_native_case(c)) == c`` holds
  exactly.

All quantities in a :class:`GridCase` are per unit on ``base_mva``. Demands
keep the MATPOWER sign (positive means consumption); the reactive injection
vector of the load buses, which is negative for absorbing loads, is returned
by :meth:`GridCase.load_injections`.
"""

from __future__ import annotations

import json
import logging
import math
import re
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidTopology, MalformedCase

logger = logging.getLogger(__name__)

LOAD = "load"
GENERATOR = "generator"

# MATPOWER column indices (0-based)
BUS_I, BUS_TYPE, PD, QD, GS, BS, VM = 0, 1, 2, 3, 4, 5, 7
GEN_BUS, PG, VG, GEN_STATUS = 0, 1, 5, 7
F_BUS, T_BUS, BR_R, BR_X, BR_B, TAP, SHIFT, BR_STATUS = 0, 1, 2, 3, 4, 8, 9, 10

_MIN_COLS = {"bus": 13, "gen": 8, "branch": 11}
_RX_WARN = 0.25


@dataclass(frozen=True)
class BusRecord:
    id: int
    kind: str
    p_demand: float
    q_demand: float
    shunt_b: float
    v_setpoint: float


@dataclass(frozen=True)
class BranchRecord:
    from_bus: int
    to_bus: int
    reactance_x: float
    charging_b: float = 0.0


@dataclass(frozen=True)
class GenRecord:
    bus: int
    p_gen: float


@dataclass(frozen=True)
class GridCase:
    """Parsed grid data in per unit.

    Attributes
    ----------
    base_mva : float
        Per-unit power base.
    buses, branches, gens : tuple
        Records in file order (branches after parallel merging).
    """

    base_mva: float
    buses: tuple[BusRecord, ...]
    branches: tuple[BranchRecord, ...]
    gens: tuple[GenRecord, ...]

    @property
    def load_buses(self) -> list[BusRecord]:
        return [b for b in self.buses if b.kind == LOAD]

    @property
    def gen_buses(self) -> list[BusRecord]:
        return [b for b in self.buses if b.kind == GENERATOR]

    @property
    def slack_id(self) -> int:
        """Lowest-id generator bus."""
        return min(b.id for b in self.gen_buses)

    def load_injections(self) -> np.ndarray:
        """Reactive injections Q_L at load buses in model order (p.u.).

        Absorbing loads give negative entries.
        """
        return np.array([-b.q_demand for b in self.load_buses], dtype=float)

    def load_active_demands(self) -> np.ndarray:
        return np.array([b.p_demand for b in self.load_buses], dtype=float)

    def bus_index(self) -> dict[int, int]:
        return {b.id: k for k, b in enumerate(self.buses)}


# ---------------------------------------------------------------------------
# validation


def validate_case(case: GridCase) -> GridCase:
    """Check the structural invariants of ``case`` and return it unchanged.

    Raises
    ------
    InvalidTopology
        On duplicate bus ids, dangling branch or generator references,
        self-loops, duplicate branches, non-positive reactances or a case
        without any generator bus.
    """
    if not (case.base_mva > 0 and math.isfinite(case.base_mva)):
        raise InvalidTopology(f"base_mva must be positive, got {case.base_mva}")
    kinds = {}
    for b in case.buses:
        if b.id in kinds:
            raise InvalidTopology(f"duplicate bus id {b.id}")
        if b.kind not in (LOAD, GENERATOR):
            raise InvalidTopology(f"bus {b.id}: unknown kind {b.kind!r}")
        if not all(math.isfinite(v) for v in (b.p_demand, b.q_demand, b.shunt_b)):
            raise InvalidTopology(f"bus {b.id}: non-finite demand or shunt")
        if not (b.v_setpoint > 0 and math.isfinite(b.v_setpoint)):
            raise InvalidTopology(f"bus {b.id}: v_setpoint must be positive")
        kinds[b.id] = b.kind
    if GENERATOR not in kinds.values():
        raise InvalidTopology("case has no generator bus")
    seen = set()
    for br in case.branches:
        for end in (br.from_bus, br.to_bus):
            if end not in kinds:
                raise InvalidTopology(
                    f"branch {br.from_bus}-{br.to_bus} references unknown bus {end}")
        if br.from_bus == br.to_bus:
            raise InvalidTopology(f"branch {br.from_bus}-{br.to_bus} is a self-loop")
        if not (br.reactance_x > 0 and math.isfinite(br.reactance_x)):
            raise InvalidTopology(
                f"branch {br.from_bus}-{br.to_bus}: reactance must be positive")
        if not math.isfinite(br.charging_b):
            raise InvalidTopology(f"branch {br.from_bus}-{br.to_bus}: bad charging")
        key = frozenset((br.from_bus, br.to_bus))
        if key in seen:
            raise InvalidTopology(f"duplicate branch {br.from_bus}-{br.to_bus}")
        seen.add(key)
    for g in case.gens:
        if g.bus not in kinds:
            raise InvalidTopology(f"generator references unknown bus {g.bus}")
        if kinds[g.bus] != GENERATOR:
            raise InvalidTopology(f"generator at bus {g.bus} which is a load bus")
        if not math.isfinite(g.p_gen):
            raise InvalidTopology(f"generator at bus {g.bus}: non-finite p_gen")
    return case


# ---------------------------------------------------------------------------
# MATPOWER


def _strip_comments(text: str) -> str:
    return "\n".join(line.split("%", 1)[0] for line in text.splitlines())


def _matrix(text: str, name: str) -> np.ndarray:
    m = re.search(rf"mpc\.{name}\s*=\s*\[(.*?)\]\s*;?", text, re.DOTALL)
    if m is None:
        raise MalformedCase(f"missing mpc.{name} matrix")
    rows = []
    for raw in re.split(r"[;\n]", m.group(1)):
        tokens = raw.replace(",", " ").split()
        if not tokens:
            continue
        try:
            rows.append([float(t) for t in tokens])
        except ValueError as exc:
            raise MalformedCase(f"mpc.{name}: non-numeric token in row {raw.strip()!r}") from exc
    if not rows:
        raise MalformedCase(f"mpc.{name} is empty")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise MalformedCase(f"mpc.{name}: rows have differing column counts")
    if width < _MIN_COLS[name]:
        raise MalformedCase(
            f"mpc.{name}: expected at least {_MIN_COLS[name]} columns, got {width}")
    return np.array(rows)


def _as_id(value: float, what: str) -> int:
    if value != int(value):
        raise MalformedCase(f"{what}: non-integer id {value}")
    return int(value)


def parse_matpower_case(text: str) -> GridCase:
    """Parse MATPOWER case text into a validated :class:`GridCase`.

    Bus kinds follow the type column (1 is a load bus, 2 and 3 are
    generator buses). Parallel branches are merged by summing their
    susceptances and charging. Branch resistance is discarded.

    Raises
    ------
    MalformedCase
        Missing matrix, non-numeric token or wrong column count.
    InvalidTopology
        A :class:`GridCase` invariant does not hold.
    """
    body = _strip_comments(text)
    m = re.search(r"mpc\.baseMVA\s*=\s*([^;\n]+)", body)
    if m is None:
        raise MalformedCase("missing mpc.baseMVA")
    try:
        base = float(m.group(1))
    except ValueError as exc:
        raise MalformedCase(f"mpc.baseMVA: non-numeric value {m.group(1)!r}") from exc
    bus = _matrix(body, "bus")
    gen = _matrix(body, "gen")
    branch = _matrix(body, "branch")

    vg = {}
    gens = []
    for row in gen:
        if row[GEN_STATUS] <= 0:
            continue
        bid = _as_id(row[GEN_BUS], "mpc.gen")
        if bid in vg and vg[bid] != row[VG]:
            warnings.warn(f"bus {bid}: conflicting generator set-points, keeping the first")
        vg.setdefault(bid, row[VG])
        gens.append((bid, row[PG] / base))
    p_gen = {}
    for bid, pg in gens:
        p_gen[bid] = p_gen.get(bid, 0.0) + pg

    buses = []
    for row in bus:
        bid = _as_id(row[BUS_I], "mpc.bus")
        btype = int(row[BUS_TYPE])
        if btype == 1:
            kind = LOAD
        elif btype in (2, 3):
            kind = GENERATOR
        else:
            raise MalformedCase(f"bus {bid}: unsupported bus type {btype}")
        if row[GS] != 0:
            warnings.warn(f"bus {bid}: shunt conductance ignored (lossless model)")
        if kind == GENERATOR and (row[PD] != 0 or row[QD] != 0):
            warnings.warn(
                f"bus {bid}: demand at a voltage-regulated bus is ignored by the "
                "reactive model")
        v_set = vg.get(bid, row[VM]) if kind == GENERATOR else row[VM]
        if v_set <= 0:
            v_set = 1.0
        buses.append(BusRecord(
            id=bid, kind=kind, p_demand=row[PD] / base, q_demand=row[QD] / base,
            shunt_b=row[BS] / base, v_setpoint=float(v_set)))

    merged: dict[frozenset, list] = {}
    lossy = []
    for row in branch:
        if row[BR_STATUS] <= 0:
            continue
        f, t = _as_id(row[F_BUS], "mpc.branch"), _as_id(row[T_BUS], "mpc.branch")
        r, x = row[BR_R], row[BR_X]
        if x <= 0:
            raise InvalidTopology(f"branch {f}-{t}: reactance must be positive, got {x}")
        if r / x > _RX_WARN:
            lossy.append((f, t, r / x))
        if row[TAP] not in (0.0, 1.0) or row[SHIFT] != 0:
            warnings.warn(f"branch {f}-{t}: tap ratio and phase shift are ignored")
        key = frozenset((f, t))
        if key in merged:
            entry = merged[key]
            entry[2] += 1.0 / x
            entry[3] += row[BR_B]
        else:
            merged[key] = [f, t, 1.0 / x, row[BR_B], x]
    if lossy:
        worst = max(lossy, key=lambda e: e[2])
        warnings.warn(
            f"{len(lossy)} branches have r/x above {_RX_WARN} (worst {worst[0]}-{worst[1]} "
            f"at {worst[2]:.3g}); the lossless model may be inaccurate")
    branches = []
    for f, t, b, ch, x0 in merged.values():
        x = x0 if b == 1.0 / x0 else 1.0 / b
        branches.append(BranchRecord(f, t, float(x), float(ch)))

    case = GridCase(
        base_mva=float(base), buses=tuple(buses), branches=tuple(branches),
        gens=tuple(GenRecord(b, float(p)) for b, p in p_gen.items()))
    return validate_case(case)


# ---------------------------------------------------------------------------
# native JSON


def _num(x: float) -> str:
    return format(float(x), ".17g")


def write_native_case(case: GridCase) -> str:
    """Render ``case`` as native JSON text.

    Validity is not checked here; it is enforced when parsing.
    """
    lines = ["{", f'  "base_mva": {_num(case.base_mva)},', '  "buses": [']
    rows = [
        f'    {{"id": {b.id}, "kind": "{b.kind}", "p_demand": {_num(b.p_demand)}, '
        f'"q_demand": {_num(b.q_demand)}, "shunt_b": {_num(b.shunt_b)}, '
        f'"v_setpoint": {_num(b.v_setpoint)}}}'
        for b in case.buses
    ]
    lines.append(",\n".join(rows))
    lines.append("  ],")
    lines.append('  "branches": [')
    rows = [
        f'    {{"from": {br.from_bus}, "to": {br.to_bus}, '
        f'"reactance_x": {_num(br.reactance_x)}, "charging_b": {_num(br.charging_b)}}}'
        for br in case.branches
    ]
    lines.append(",\n".join(rows))
    lines.append("  ],")
    lines.append('  "gens": [')
    rows = [f'    {{"bus": {g.bus}, "p_gen": {_num(g.p_gen)}}}' for g in case.gens]
    lines.append(",\n".join(rows))
    lines.append("  ]")
    lines.append("}")
    return "\n".join(line for line in lines if line) + "\n"


def _field(rec: dict, key: str, kind, where: str):
    if key not in rec:
        raise MalformedCase(f"{where}: missing field {key!r}")
    value = rec[key]
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise MalformedCase(f"{where}: field {key!r} must be an integer")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise MalformedCase(f"{where}: field {key!r} must be a number")
        return float(value)
    if not isinstance(value, str):
        raise MalformedCase(f"{where}: field {key!r} must be a string")
    return value


def parse_native_case(text: str) -> GridCase:
    """Parse native JSON case text into a validated :class:`GridCase`."""
    if not text.strip():
        raise MalformedCase("empty document")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedCase(f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise MalformedCase("top level must be an object")
    for key in ("base_mva", "buses", "branches", "gens"):
        if key not in doc:
            raise MalformedCase(f"missing top-level key {key!r}")
    for key in ("buses", "branches", "gens"):
        if not isinstance(doc[key], list) or not all(isinstance(r, dict) for r in doc[key]):
            raise MalformedCase(f"{key!r} must be a list of objects")
    base = _field(doc, "base_mva", float, "document")
    buses = tuple(
        BusRecord(
            id=_field(r, "id", int, f"buses[{k}]"),
            kind=_field(r, "kind", str, f"buses[{k}]"),
            p_demand=_field(r, "p_demand", float, f"buses[{k}]"),
            q_demand=_field(r, "q_demand", float, f"buses[{k}]"),
            shunt_b=_field(r, "shunt_b", float, f"buses[{k}]"),
            v_setpoint=_field(r, "v_setpoint", float, f"buses[{k}]"),
        )
        for k, r in enumerate(doc["buses"])
    )
    branches = tuple(
        BranchRecord(
            from_bus=_field(r, "from", int, f"branches[{k}]"),
            to_bus=_field(r, "to", int, f"branches[{k}]"),
            reactance_x=_field(r, "reactance_x", float, f"branches[{k}]"),
            charging_b=_field(r, "charging_b", float, f"branches[{k}]"),
        )
        for k, r in enumerate(doc["branches"])
    )
    gens = tuple(
        GenRecord(bus=_field(r, "bus", int, f"gens[{k}]"),
                  p_gen=_field(r, "p_gen", float, f"gens[{k}]"))
        for k, r in enumerate(doc["gens"])
    )
    return validate_case(GridCase(base, buses, branches, gens))


# ---------------------------------------------------------------------------
# helpers


def load_case(path: str | Path, fmt: str | None = None) -> GridCase:
    """Read a case file; the format is inferred from the suffix if not given."""
    path = Path(path)
    text = path.read_text()
    if fmt is None:
        fmt = "matpower" if path.suffix == ".m" else "native"
    if fmt == "matpower":
        return parse_matpower_case(text)
    if fmt == "native":
        return parse_native_case(text)
    raise ValueError(f"unknown case format {fmt!r}")


def builtin_case_path(name: str) -> Path:
    """Path of a case shipped with the package (``case2`` or ``case30``)."""
    path = Path(__file__).parent / "data" / f"{name}.m"
    if not path.exists():
        raise FileNotFoundError(f"no built-in case {name!r}")
    return path


def builtin_case(name: str) -> GridCase:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return parse_matpower_case(builtin_case_path(name).read_text())
