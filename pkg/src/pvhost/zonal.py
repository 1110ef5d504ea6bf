"""Zonal PV deployment: split the feeder into connected zones and measure
the voltage change caused by full PV adoption inside one zone at a time."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .feeder import FeederError, FeederModel, children_map, electrical_distances
from .hosting import (HostingCapacityResult, RandomSizeDist, StochasticConfig, Strategy,
                      StudyError, assign_capacities, run_study)
from .loads import FeederAllocation, LoadPool, _ratio, block_mean
from .parallel import ordered_map
from .powerflow import DEFAULT_POWER_FACTOR, ConvergenceError, QstsResult, run_qsts
from .rng import Stream, substream


@dataclass(frozen=True)
class Zone:
    id: int
    bus_ids: frozenset[str]
    load_nodes: tuple[int, ...]  # indices into feeder.load_nodes
    centroid_distance_ohm: float

    @property
    def n_load_nodes(self) -> int:
        return len(self.load_nodes)

    def to_dict(self) -> dict:
        return {"id": self.id, "buses": sorted(self.bus_ids), "load_nodes": list(self.load_nodes),
                "centroid_distance_ohm": self.centroid_distance_ohm}


# --------------------------------------------------------------------------- #
# partition


def _preorder(children: Mapping[str, list[str]], root: str) -> list[str]:
    out, stack = [], [root]
    while stack:
        bus = stack.pop()
        out.append(bus)
        stack.extend(reversed(children[bus]))
    return out


def _covering_subtree(members: Sequence[str], parent: Mapping[str, str | None],
                      depth: Mapping[str, int]) -> tuple[set[str], str]:
    """Buses on the paths joining ``members``, and the top of that subtree."""
    top = members[0]
    for m in members[1:]:
        a, b = top, m
        while depth[a] > depth[b]:
            a = parent[a]
        while depth[b] > depth[a]:
            b = parent[b]
        while a != b:
            a, b = parent[a], parent[b]
        top = a
    buses = {top}
    for m in members:
        while m not in buses:
            buses.add(m)
            m = parent[m]
    return buses, top


def _feasible_zones(order, children, weight, k: int, lo: int, hi: int):
    """Tree DP: can the loads be split into ``k`` connected groups of size lo..hi?

    The state at a bus is (size of the group still open upward, size of a side
    group, zones closed below). A child's open group joins the upward group,
    becomes a zone on its own, or, at an unloaded (shareable) bus, joins a side
    group that is closed into a zone at that bus. Returns the zones as lists of
    load buses, or None.
    """
    tables: dict[str, dict] = {}  # bus -> {(open size, zones): (inner state, close here)}
    trace: dict[str, list] = {}
    for bus in reversed(order):  # children before parents
        own = weight.get(bus, 0)
        shareable = own == 0
        cur: dict = {(own, 0, 0): None}
        stages = []
        for ch in children[bus]:
            nxt: dict = {}
            for (s, side, c) in cur:
                for (sc, cc) in tables[ch]:
                    if c + cc > k:
                        continue
                    prev = (s, side, c)
                    if s + sc <= hi:
                        nxt.setdefault((s + sc, side, c + cc), (prev, ch, (sc, cc), "up"))
                    if lo <= sc <= hi and c + cc < k:
                        nxt.setdefault((s, side, c + cc + 1), (prev, ch, (sc, cc), "alone"))
                    if shareable and sc and side + sc <= hi:
                        nxt.setdefault((s, side + sc, c + cc), (prev, ch, (sc, cc), "side"))
            stages.append(nxt)
            cur = nxt
            if shareable:
                shut = {}
                for (s, side, c) in cur:
                    if side and lo <= side <= hi and c < k and (s, 0, c + 1) not in cur:
                        shut.setdefault((s, 0, c + 1), ((s, side, c), None, None, "shut"))
                if shut:
                    stages.append(shut)
                    cur = {**cur, **shut}
        out: dict = {}
        for st in cur:
            s, side, c = st
            if side == 0:
                out.setdefault((s, c), (st, False))
        for st in cur:
            s, side, c = st
            if side == 0 and s and lo <= s <= hi and c < k:
                out.setdefault((0, c + 1), (st, True))
        tables[bus] = out
        trace[bus] = stages
    root = order[0]
    if (0, k) not in tables[root]:
        return None

    zones: list[list[str]] = []

    def rebuild(bus: str, key) -> list[str]:
        state, close_here = tables[bus][key]
        steps = []
        for table in reversed(trace[bus]):
            if state in table:
                steps.append(table[state])
                state = table[state][0]
        group = [bus] if weight.get(bus, 0) else []
        side: list[str] = []
        for _, ch, child_key, action in reversed(steps):
            if action == "shut":
                zones.append(side)
                side = []
            elif action == "up":
                group.extend(rebuild(ch, child_key))
            elif action == "side":
                side.extend(rebuild(ch, child_key))
            else:
                zones.append(rebuild(ch, child_key))
        if close_here:
            zones.append(group)
            return []
        return group

    rebuild(root, (0, k))
    return zones


def partition(feeder: FeederModel, k: int) -> list[Zone]:
    """Split the feeder into ``k`` connected zones with balanced load-node counts.

    Each zone is the minimal subtree joining its load buses. Unloaded junction
    buses may be shared between zones, load buses never are. Zones are numbered
    by the mean electrical distance of their load nodes from the source.
    """
    n_nodes = feeder.n_load_nodes
    if k < 1:
        raise ValueError("need at least one zone")
    if k > n_nodes:
        raise ValueError(f"{k} zones requested but the feeder has only {n_nodes} load nodes")
    weight: dict[str, int] = {}
    for ln in feeder.load_nodes:
        weight[ln.bus_id] = weight.get(ln.bus_id, 0) + 1
    if k > len(weight):
        raise ValueError(f"{k} zones requested but load nodes sit on only {len(weight)} buses")

    children = children_map(feeder)
    root = feeder.source.id
    order = _preorder(children, root)
    order_index = {b: i for i, b in enumerate(order)}
    parent: dict[str, str | None] = {root: None}
    depth = {root: 0}
    for bus in order:
        for c in children[bus]:
            parent[c], depth[c] = bus, depth[bus] + 1

    zones = None
    target = n_nodes / k
    for slack in range(0, n_nodes + 1):
        lo, hi = max(1, math.ceil(target - slack)), math.floor(target + slack)
        if lo <= hi:
            zones = _feasible_zones(order, children, weight, k, lo, hi)
            if zones is not None:
                break
    if zones is None:
        raise FeederError(f"cannot form {k} connected zones")

    dist = electrical_distances(feeder)
    node_of: dict[str, list[int]] = {}
    for i, ln in enumerate(feeder.load_nodes):
        node_of.setdefault(ln.bus_id, []).append(i)
    drafts = []
    for members in zones:
        members = sorted(members, key=order_index.get)
        buses, _ = _covering_subtree(members, parent, depth)
        idx = sorted(i for b in members for i in node_of[b])
        centroid = float(np.mean([dist[feeder.load_nodes[i].bus_id] for i in idx]))
        drafts.append((centroid, idx[0], buses, idx))
    drafts.sort(key=lambda d: (d[0], d[1]))
    return [Zone(n + 1, frozenset(b), tuple(i), c) for n, (c, _, b, i) in enumerate(drafts)]


def check_partition(feeder: FeederModel, zones: Sequence[Zone]) -> None:
    """Raise if zones share a load bus, miss a load node, or are not connected subtrees."""
    loaded = {ln.bus_id for ln in feeder.load_nodes}
    seen: dict[str, int] = {}
    for z in zones:
        for b in z.bus_ids & loaded:
            if b in seen:
                raise FeederError(f"load bus {b!r} in zones {seen[b]} and {z.id}")
            seen[b] = z.id
    owner = {i: z.id for z in zones for i in z.load_nodes}
    for i, ln in enumerate(feeder.load_nodes):
        if owner.get(i) is None or owner[i] != seen.get(ln.bus_id):
            raise FeederError(f"load node {i} on bus {ln.bus_id!r} not covered by its zone")
    children = children_map(feeder)
    for z in zones:
        # a connected subtree has exactly one bus whose parent lies outside it
        fed_inside = {c for b in z.bus_ids for c in children[b] if c in z.bus_ids}
        heads = z.bus_ids - fed_inside
        if len(heads) != 1:
            raise FeederError(f"zone {z.id} is not connected ({len(heads)} components)")


# --------------------------------------------------------------------------- #
# zonal voltage change


@dataclass(frozen=True)
class ZonalRecord:
    zone: int
    strategy: str
    resolution_s: int
    delta_v_pu: float
    max_v_with: float
    max_v_without: float
    total_kw: float


@dataclass
class ZonalResult:
    records: list[ZonalRecord] = field(default_factory=list)

    def __post_init__(self):
        self.records = sorted(self.records, key=lambda r: (r.resolution_s, r.strategy, r.zone))

    def delta(self, zone: int, strategy: str, resolution_s: int) -> float:
        for r in self.records:
            if (r.zone, r.strategy, r.resolution_s) == (zone, Strategy(strategy).value, resolution_s):
                return r.delta_v_pu
        raise KeyError((zone, strategy, resolution_s))

    def merged(self, other: "ZonalResult") -> "ZonalResult":
        return ZonalResult(self.records + other.records)

    def to_dict(self) -> dict:
        return {"records": [asdict(r) for r in self.records]}


@dataclass
class _ZonalContext:
    feeder: FeederModel
    load: np.ndarray
    pv_shape: np.ndarray
    resolution_s: int
    house_node: np.ndarray
    house_kw: np.ndarray
    zones: list[Zone]
    base: QstsResult
    power_factor: float
    strategy: str


def _zone_run(ctx: _ZonalContext, z: int) -> ZonalRecord:
    zone = ctx.zones[z]
    base = float(np.max(ctx.base.zone_max_v[:, z]))
    in_zone = np.isin(ctx.house_node, zone.load_nodes)
    kw = np.where(in_zone, ctx.house_kw, 0.0)
    nodal = np.bincount(ctx.house_node, weights=kw, minlength=ctx.load.shape[0])
    if not nodal.any():
        with_pv = base
    else:
        try:
            res = run_qsts(ctx.feeder, ctx.load, nodal[:, None] * ctx.pv_shape[None, :],
                           ctx.resolution_s, power_factor=ctx.power_factor, zones=[zone.bus_ids])
        except ConvergenceError as exc:
            raise StudyError(f"zone {zone.id}: {exc}", None, None, exc.step, zone.id) from exc
        with_pv = float(np.max(res.zone_max_v[:, 0]))
    return ZonalRecord(zone.id, ctx.strategy, ctx.resolution_s, with_pv - base, with_pv, base,
                       float(kw.sum()))


def zone_capacities(allocation: FeederAllocation, strategy: Strategy | str, *,
                    sizing: Mapping[str, float] | None = None, fixed_kw: float = 10.0,
                    random_dist: RandomSizeDist = RandomSizeDist(), rng_seed: int = 0) -> np.ndarray:
    """Per-house PV size for zonal deployment; random draws use their own substream."""
    ids = [h for h, _, _ in allocation.houses()]
    rng = substream(rng_seed, Stream.ZONAL_SIZE, 0)
    return assign_capacities(ids, strategy, sizing=sizing, random_dist=random_dist,
                             fixed_kw=fixed_kw, rng=rng)


def zonal_study(feeder: FeederModel, allocation: FeederAllocation, zones: Sequence[Zone],
                strategy: Strategy | str, pv_shape: np.ndarray, *,
                sizing: Mapping[str, float] | None = None, fixed_kw: float = 10.0,
                random_dist: RandomSizeDist = RandomSizeDist(), rng_seed: int = 0,
                load_scale: float = 1.0, power_factor: float = DEFAULT_POWER_FACTOR,
                workers: int = 1) -> ZonalResult:
    """Voltage change from full PV adoption in each zone, one zone at a time.

    Loads everywhere keep their profiles; PV is installed only on the houses of
    the studied zone. The metric is the week maximum over the zone's buses.
    """
    strategy = Strategy(strategy)
    load = allocation.nodal_load_kw() * load_scale
    pv_shape = np.asarray(pv_shape, dtype=float)
    if pv_shape.shape != (load.shape[1],):
        raise ValueError(f"PV shape has {pv_shape.shape} samples, load window has {load.shape[1]}")
    houses = allocation.houses()
    kw = zone_capacities(allocation, strategy, sizing=sizing, fixed_kw=fixed_kw,
                         random_dist=random_dist, rng_seed=rng_seed)
    zones = list(zones)
    try:
        base = run_qsts(feeder, load, None, allocation.resolution_s, power_factor=power_factor,
                        zones=[z.bus_ids for z in zones])
    except ConvergenceError as exc:
        raise StudyError(f"zonal base case: {exc}", None, None, exc.step) from exc
    ctx = _ZonalContext(feeder, load, pv_shape, int(allocation.resolution_s),
                        np.array([n for _, n, _ in houses]), kw, zones, base, power_factor,
                        strategy.value)
    return ZonalResult(ordered_map(_zone_run, ctx, range(len(zones)), workers))


# --------------------------------------------------------------------------- #
# resolution sensitivity


@dataclass
class ResolutionComparison:
    zonal: ZonalResult
    hosting: dict[tuple[str, int], HostingCapacityResult]

    def table(self) -> list[dict]:
        """Strategy x resolution minimum hosting capacity."""
        strategies = sorted({s for s, _ in self.hosting}, key=[m.value for m in Strategy].index)
        resolutions = sorted({r for _, r in self.hosting})
        rows = []
        for s in strategies:
            row = {"strategy": s}
            for r in resolutions:
                res = self.hosting[(s, r)]
                row[f"min_hc_kw_{r}s"] = res.min_hosting_capacity_kw
                row[f"status_{r}s"] = res.status
            rows.append(row)
        return rows


def resample_shape(pv_shape: np.ndarray, source_s: int, target_s: int) -> np.ndarray:
    return block_mean(pv_shape, _ratio(source_s, target_s))


def resolution_comparison(feeder: FeederModel, pool: LoadPool, allocation: FeederAllocation,
                          zones: Sequence[Zone], strategies: Iterable[Strategy | str],
                          pv_shape: np.ndarray, config: StochasticConfig, *,
                          resolutions: Sequence[int] = (60, 1800),
                          sizing: Mapping[str, float] | None = None,
                          workers: int = 1) -> ResolutionComparison:
    """Zonal and hosting-capacity studies repeated at each data resolution.

    ``pool``, ``allocation`` and ``pv_shape`` are at the pool's native
    resolution; coarser data is derived by block averaging so every run sees
    the same houses and PV sizes.
    """
    strategies = [Strategy(s) for s in strategies]
    zonal = ZonalResult()
    hosting = {}
    for res in resolutions:
        alloc = allocation if res == allocation.resolution_s else allocation.with_pool(
            pool.resampled(res))
        shape = resample_shape(pv_shape, allocation.resolution_s, res)
        for s in strategies:
            zonal = zonal.merged(zonal_study(
                feeder, alloc, zones, s, shape, sizing=sizing, fixed_kw=config.fixed_kw,
                random_dist=config.random_dist, rng_seed=config.rng_seed,
                load_scale=config.load_scale, power_factor=config.power_factor, workers=workers))
            cfg = replace(config, strategy=s)
            hosting[(s.value, int(res))] = run_study(feeder, alloc, shape, cfg, sizing, workers)
    return ResolutionComparison(zonal, hosting)


# --------------------------------------------------------------------------- #
# artifacts


def write_zones_json(zones: Sequence[Zone], path: str | Path) -> None:
    doc = {"zones": [z.to_dict() for z in zones]}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def write_zonal_csv(result: ZonalResult, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["zone", "strategy", "resolution_s", "delta_v_pu", "max_v_with", "max_v_without"])
        for r in result.records:
            w.writerow([r.zone, r.strategy, r.resolution_s, repr(r.delta_v_pu),
                        repr(r.max_v_with), repr(r.max_v_without)])


def write_table_csv(comparison: ResolutionComparison, path: str | Path) -> None:
    rows = comparison.table()
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
