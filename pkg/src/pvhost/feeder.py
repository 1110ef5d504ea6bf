"""Radial feeder data model, JSON parsing and topology helpers.

A feeder file is a single JSON document::

    {"name": ..., "base_kva": ...,
     "buses": [{"id", "phases", "kv_ll", "source"?}],
     "branches": [{"id", "from", "to", "phases", "r_ohm", "x_ohm", "length_factor"?}],
     "regulators": [{"branch", "setpoint_pu", "bandwidth_pu", "tap_step_pu", "delay_s",
                     "tap_min"?, "tap_max"?, "tap"?}],
     "load_nodes": [{"bus", "phase", "peak_kw"}]}

Phases are written as strings over ``"ABC"``. A load node with phase ``"ABC"``
is a balanced three-phase load.
"""

from __future__ import annotations

import bisect
import json
import math
from collections import deque
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any

PHASES = ("A", "B", "C")
BALANCED = "ABC"


class FeederError(ValueError):
    """Raised for malformed feeder files and invalid topologies."""


@dataclass(frozen=True)
class Bus:
    id: str
    phases: str
    nominal_kv_ll: float
    is_source: bool = False


@dataclass(frozen=True)
class Branch:
    id: str
    from_bus: str
    to_bus: str
    phases: str
    r_ohm_per_phase: float
    x_ohm_per_phase: float
    length_factor: float = 1.0

    @property
    def z_ohm(self) -> complex:
        return complex(self.r_ohm_per_phase, self.x_ohm_per_phase) * self.length_factor


@dataclass(frozen=True)
class Regulator:
    """Gang-operated step regulator sitting at the sending end of a branch.

    The tap scales the branch's sending-end voltage by ``1 + tap * tap_step_pu``.
    """

    branch_id: str
    setpoint_pu: float
    bandwidth_pu: float
    tap_step_pu: float = 0.00625
    tap_min: int = -16
    tap_max: int = 16
    delay_s: float = 30.0
    current_tap: int = 0

    def ratio(self, tap: int | None = None) -> float:
        return 1.0 + (self.current_tap if tap is None else tap) * self.tap_step_pu


@dataclass(frozen=True)
class LoadNode:
    bus_id: str
    phase: str
    peak_kw: float
    houses: tuple[str, ...] = ()


@dataclass(frozen=True)
class FeederModel:
    name: str
    base_kva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    regulators: tuple[Regulator, ...] = ()
    load_nodes: tuple[LoadNode, ...] = ()
    _bus_index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_bus_index", {b.id: b for b in self.buses})

    @property
    def source(self) -> Bus:
        return next(b for b in self.buses if b.is_source)

    def bus(self, bus_id: str) -> Bus:
        try:
            return self._bus_index[bus_id]
        except KeyError:
            raise FeederError(f"unknown bus {bus_id!r}") from None

    def regulator_for(self, branch_id: str) -> Regulator | None:
        for reg in self.regulators:
            if reg.branch_id == branch_id:
                return reg
        return None

    @property
    def n_load_nodes(self) -> int:
        return len(self.load_nodes)

    def without_regulators(self) -> "FeederModel":
        return replace(self, regulators=())


# --------------------------------------------------------------------------- #
# parsing


class _Obj(dict):
    """dict that remembers the source line it was decoded from."""

    line = 0


class _LineDecoder(json.JSONDecoder):
    def __init__(self, text: str):
        super().__init__()
        starts = [0]
        starts.extend(i + 1 for i, ch in enumerate(text) if ch == "\n")
        self._line_starts = starts

        def parse_object(s_and_end, *args):
            obj, end = json.decoder.JSONObject(s_and_end, *args)
            out = _Obj(obj)
            out.line = bisect.bisect_right(self._line_starts, s_and_end[1] - 1)
            return out, end

        self.parse_object = parse_object
        self.scan_once = json.scanner.py_make_scanner(self)


_TOP_KEYS = {"name", "base_kva", "buses", "branches", "regulators", "load_nodes"}
_KEYS = {
    "buses": ({"id", "phases", "kv_ll"}, {"source"}),
    "branches": ({"id", "from", "to", "phases", "r_ohm", "x_ohm"}, {"length_factor"}),
    "regulators": (
        {"branch", "setpoint_pu", "bandwidth_pu", "tap_step_pu", "delay_s"},
        {"tap_min", "tap_max", "tap"},
    ),
    "load_nodes": ({"bus", "phase", "peak_kw"}, set()),
}


def _where(obj: Any, section: str, idx: int) -> str:
    line = getattr(obj, "line", 0)
    return f"{section}[{idx}] (line {line})" if line else f"{section}[{idx}]"


def _check_keys(obj: Any, section: str, idx: int) -> None:
    required, optional = _KEYS[section]
    if not isinstance(obj, dict):
        raise FeederError(f"{_where(obj, section, idx)}: expected an object")
    missing = required - obj.keys()
    if missing:
        raise FeederError(f"{_where(obj, section, idx)}: missing field(s) {sorted(missing)}")
    unknown = obj.keys() - required - optional
    if unknown:
        raise FeederError(f"{_where(obj, section, idx)}: unknown field(s) {sorted(unknown)}")


def _phases(value: Any, where: str, allow_balanced: bool = True) -> str:
    if not isinstance(value, str) or not value:
        raise FeederError(f"{where}: phases must be a nonempty string over 'ABC'")
    if set(value) - set(PHASES) or len(set(value)) != len(value):
        raise FeederError(f"{where}: invalid phases {value!r}")
    return "".join(p for p in PHASES if p in value)


def _number(obj: dict, key: str, where: str) -> float:
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise FeederError(f"{where}: field {key!r} must be a number")
    return float(value)


def feeder_from_dict(doc: dict) -> FeederModel:
    """Build and validate a FeederModel from a decoded JSON document."""
    if not isinstance(doc, dict):
        raise FeederError("feeder document must be a JSON object")
    unknown = doc.keys() - _TOP_KEYS
    if unknown:
        raise FeederError(f"unknown top-level field(s) {sorted(unknown)}")
    for key in ("name", "base_kva", "buses", "branches"):
        if key not in doc:
            raise FeederError(f"missing top-level field {key!r}")

    buses = []
    for idx, raw in enumerate(doc["buses"]):
        _check_keys(raw, "buses", idx)
        where = _where(raw, "buses", idx)
        kv = _number(raw, "kv_ll", where)
        if kv <= 0:
            raise FeederError(f"{where}: kv_ll must be positive")
        buses.append(Bus(str(raw["id"]), _phases(raw["phases"], where), kv,
                         bool(raw.get("source", False))))

    branches = []
    for idx, raw in enumerate(doc["branches"]):
        _check_keys(raw, "branches", idx)
        where = _where(raw, "branches", idx)
        branches.append(Branch(
            str(raw["id"]), str(raw["from"]), str(raw["to"]), _phases(raw["phases"], where),
            _number(raw, "r_ohm", where), _number(raw, "x_ohm", where),
            _number(raw, "length_factor", where) if "length_factor" in raw else 1.0,
        ))

    regulators = []
    for idx, raw in enumerate(doc.get("regulators", [])):
        _check_keys(raw, "regulators", idx)
        where = _where(raw, "regulators", idx)
        regulators.append(Regulator(
            branch_id=str(raw["branch"]),
            setpoint_pu=_number(raw, "setpoint_pu", where),
            bandwidth_pu=_number(raw, "bandwidth_pu", where),
            tap_step_pu=_number(raw, "tap_step_pu", where),
            delay_s=_number(raw, "delay_s", where),
            tap_min=int(raw.get("tap_min", -16)),
            tap_max=int(raw.get("tap_max", 16)),
            current_tap=int(raw.get("tap", 0)),
        ))

    load_nodes = []
    for idx, raw in enumerate(doc.get("load_nodes", [])):
        _check_keys(raw, "load_nodes", idx)
        where = _where(raw, "load_nodes", idx)
        load_nodes.append(LoadNode(str(raw["bus"]), _phases(raw["phase"], where),
                                   _number(raw, "peak_kw", where)))

    feeder = FeederModel(
        name=str(doc["name"]),
        base_kva=float(doc["base_kva"]),
        buses=tuple(buses),
        branches=tuple(branches),
        regulators=tuple(regulators),
        load_nodes=tuple(load_nodes),
    )
    validate(feeder)
    return feeder


def parse_feeder(path: str | Path) -> FeederModel:
    """Read a feeder JSON file, check it against the schema and validate topology."""
    path = Path(path)
    if not path.exists():
        raise FeederError(f"feeder file not found: {path}")
    text = path.read_text()
    try:
        doc = _LineDecoder(text).decode(text)
    except json.JSONDecodeError as exc:
        raise FeederError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return feeder_from_dict(doc)


def load_builtin(name: str) -> FeederModel:
    """Load a bundled fixture, e.g. ``"ieee123"`` or ``"synthetic48"``."""
    ref = resources.files("pvhost") / "data" / f"{name}.json"
    with resources.as_file(ref) as path:
        return parse_feeder(path)


def feeder_to_dict(feeder: FeederModel) -> dict:
    def bus(b: Bus) -> dict:
        d = {"id": b.id, "phases": b.phases, "kv_ll": b.nominal_kv_ll}
        if b.is_source:
            d["source"] = True
        return d

    def branch(br: Branch) -> dict:
        d = {"id": br.id, "from": br.from_bus, "to": br.to_bus, "phases": br.phases,
             "r_ohm": br.r_ohm_per_phase, "x_ohm": br.x_ohm_per_phase}
        if br.length_factor != 1.0:
            d["length_factor"] = br.length_factor
        return d

    def reg(r: Regulator) -> dict:
        return {"branch": r.branch_id, "setpoint_pu": r.setpoint_pu,
                "bandwidth_pu": r.bandwidth_pu, "tap_step_pu": r.tap_step_pu,
                "delay_s": r.delay_s, "tap_min": r.tap_min, "tap_max": r.tap_max,
                "tap": r.current_tap}

    return {
        "name": feeder.name,
        "base_kva": feeder.base_kva,
        "buses": [bus(b) for b in feeder.buses],
        "branches": [branch(b) for b in feeder.branches],
        "regulators": [reg(r) for r in feeder.regulators],
        "load_nodes": [{"bus": n.bus_id, "phase": n.phase, "peak_kw": n.peak_kw}
                       for n in feeder.load_nodes],
    }


def dump_feeder(feeder: FeederModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(feeder_to_dict(feeder), indent=1) + "\n")


# --------------------------------------------------------------------------- #
# validation and topology


def validate(feeder: FeederModel) -> None:
    if feeder.base_kva <= 0:
        raise FeederError("base_kva must be positive")

    seen: set[str] = set()
    for b in feeder.buses:
        if b.id in seen:
            raise FeederError(f"duplicate bus id {b.id!r}")
        seen.add(b.id)
    sources = [b.id for b in feeder.buses if b.is_source]
    if len(sources) != 1:
        raise FeederError(f"feeder must have exactly one source bus, found {sources or 'none'}")
    if set(feeder.source.phases) != set(PHASES):
        raise FeederError(f"source bus {sources[0]!r} must carry all three phases")

    seen = set()
    for br in feeder.branches:
        if br.id in seen:
            raise FeederError(f"duplicate branch id {br.id!r}")
        seen.add(br.id)
        for end in (br.from_bus, br.to_bus):
            if end not in feeder._bus_index:
                raise FeederError(f"branch {br.id!r} references unknown bus {end!r}")
        if br.from_bus == br.to_bus:
            raise FeederError(f"branch {br.id!r} is a self-loop on {br.from_bus!r}")
        for end in (br.from_bus, br.to_bus):
            if set(br.phases) - set(feeder.bus(end).phases):
                raise FeederError(f"branch {br.id!r} phases {br.phases} not present on bus {end!r}")
        if br.r_ohm_per_phase < 0:
            raise FeederError(f"branch {br.id!r} has negative resistance")
        if br.length_factor <= 0:
            raise FeederError(f"branch {br.id!r} has non-positive length_factor")
        if abs(br.z_ohm) == 0:
            raise FeederError(f"branch {br.id!r} has zero impedance")

    branch_ids = {br.id for br in feeder.branches}
    seen = set()
    for reg in feeder.regulators:
        if reg.branch_id not in branch_ids:
            raise FeederError(f"regulator references unknown branch {reg.branch_id!r}")
        if reg.branch_id in seen:
            raise FeederError(f"duplicate regulator on branch {reg.branch_id!r}")
        seen.add(reg.branch_id)
        if not reg.tap_min <= reg.current_tap <= reg.tap_max:
            raise FeederError(f"regulator {reg.branch_id!r}: tap outside [tap_min, tap_max]")
        if reg.bandwidth_pu <= reg.tap_step_pu:
            raise FeederError(f"regulator {reg.branch_id!r}: bandwidth must exceed tap step")
        if reg.delay_s < 0:
            raise FeederError(f"regulator {reg.branch_id!r}: negative delay")

    for i, node in enumerate(feeder.load_nodes):
        if node.peak_kw <= 0:
            raise FeederError(f"load node {i} on bus {node.bus_id!r}: peak_kw must be positive")
        bus = feeder._bus_index.get(node.bus_id)
        if bus is None:
            raise FeederError(f"load node {i} references unknown bus {node.bus_id!r}")
        if set(node.phase) - set(bus.phases):
            raise FeederError(f"load node {i}: phase {node.phase} not on bus {node.bus_id!r}")
    if not feeder.load_nodes:
        raise FeederError("feeder has no load nodes")

    validate_tree(feeder)


def validate_tree(feeder: FeederModel) -> list[Branch]:
    """Return branches in breadth-first order from the source.

    Each branch is oriented parent -> child in the result (``from_bus`` is the
    parent). Raises FeederError on cycles, disconnected buses, or buses whose
    phases are not all fed through their parent branch.
    """
    adjacency: dict[str, list[Branch]] = {b.id: [] for b in feeder.buses}
    for br in feeder.branches:
        adjacency[br.from_bus].append(br)
        adjacency[br.to_bus].append(br)

    root = feeder.source.id
    visited = {root}
    used: set[str] = set()
    ordered: list[Branch] = []
    queue = deque([root])
    while queue:
        bus = queue.popleft()
        for br in adjacency[bus]:
            if br.id in used:
                continue
            used.add(br.id)
            other = br.to_bus if br.from_bus == bus else br.from_bus
            if other in visited:
                raise FeederError(f"cycle detected at branch {br.id!r} ({br.from_bus}-{br.to_bus})")
            visited.add(other)
            if br.from_bus != bus:
                br = replace(br, from_bus=bus, to_bus=other)
            ordered.append(br)
            queue.append(other)

    missing = [b.id for b in feeder.buses if b.id not in visited]
    if missing:
        raise FeederError(f"disconnected bus(es) not reachable from source: {missing}")
    for br in ordered:
        child = feeder.bus(br.to_bus)
        if set(child.phases) - set(br.phases):
            raise FeederError(
                f"bus {child.id!r} phases {child.phases} not all fed by branch {br.id!r} ({br.phases})")
    return ordered


def parent_map(feeder: FeederModel) -> dict[str, Branch]:
    """Map each non-source bus to the oriented branch feeding it."""
    return {br.to_bus: br for br in validate_tree(feeder)}


def electrical_distance(feeder: FeederModel, bus_id: str) -> float:
    """Sum of branch impedance magnitudes (ohm) on the path source -> bus."""
    feeder.bus(bus_id)
    parents = parent_map(feeder)
    total = 0.0
    while bus_id in parents:
        br = parents[bus_id]
        total += abs(br.z_ohm)
        bus_id = br.from_bus
    return total


def electrical_distances(feeder: FeederModel) -> dict[str, float]:
    dist = {feeder.source.id: 0.0}
    for br in validate_tree(feeder):
        dist[br.to_bus] = dist[br.from_bus] + abs(br.z_ohm)
    return dist


def children_map(feeder: FeederModel) -> dict[str, list[str]]:
    children: dict[str, list[str]] = {b.id: [] for b in feeder.buses}
    for br in validate_tree(feeder):
        children[br.from_bus].append(br.to_bus)
    return children


def base_impedance_ohm(kv_ll: float, base_kva: float) -> float:
    return kv_ll ** 2 * 1000.0 / base_kva


def base_current_a(kv_ll: float, base_kva: float) -> float:
    return base_kva / (math.sqrt(3.0) * kv_ll)
