"""Study configuration and the staged, artifact-based pipeline behind the CLI.

Stages communicate through JSON/CSV files in the output directory so the
expensive ones (sizing, hosting) can be rerun independently.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .feeder import FeederModel, load_builtin, parse_feeder
from .hosting import (HostingCapacityResult, StochasticConfig, Strategy, run_study,
                      write_distribution_csv, write_penetration_csv, write_result_json)
from .loads import (WEEK_S, AllocationConfig, FeederAllocation, LoadPool, NodeAllocation,
                    allocate_feeder, generate_synthetic_pool, ingest_csv)
from .sizing import (DEFAULT_MONTH_FACTORS, ClearSky, PvCostModel, SizingGrid, TariffSchedule,
                     duke_tou_2018, load_shape_csv, load_tariff, size_house)
from .zonal import (ZonalResult, check_partition, partition, resample_shape, write_zonal_csv,
                    write_zones_json, zonal_study)

BUILTIN = "builtin:"
FIG_FOR_STRATEGY = {"optimal": "fig7.csv", "random": "fig8.csv", "fixed": "fig9.csv"}


class ConfigError(ValueError):
    """Malformed study configuration or a referenced input that does not exist."""


class ArtifactError(ValueError):
    """An upstream artifact is missing or was produced under a different configuration."""


# --------------------------------------------------------------------------- #
# configuration


@dataclass(frozen=True)
class PoolSpec:
    csv: str | None = None
    resolution_s: int = 60
    n_houses: int = 700

    def to_dict(self) -> dict:
        if self.csv is None:
            return {"synthetic": {"n_houses": self.n_houses}}
        return {"csv": self.csv, "resolution_s": self.resolution_s}


@dataclass(frozen=True)
class StudyConfig:
    rng_seed: int
    feeder: str = BUILTIN + "ieee123"
    pool: PoolSpec = PoolSpec()
    tariff: str = BUILTIN + "duke_tou_2018"
    pv_shape: str = BUILTIN + "clearsky"
    month: int = 4
    strategies: tuple[str, ...] = ("optimal", "random", "fixed")
    resolutions: tuple[int, ...] = (60, 1800)
    stochastic: StochasticConfig = field(default_factory=StochasticConfig)
    zonal_k: int = 10
    allocation: AllocationConfig = AllocationConfig()
    grid: SizingGrid = SizingGrid()
    cost: PvCostModel = PvCostModel()
    out: str = "out"
    workers: int = 1

    def to_dict(self) -> dict:
        stoch = self.stochastic.to_dict()
        for key in ("rng_seed", "strategy"):
            stoch.pop(key)
        alloc = {f.name: getattr(self.allocation, f.name) for f in fields(self.allocation)}
        alloc.pop("rng_seed")
        return {
            "rng_seed": self.rng_seed, "feeder": self.feeder, "pool": self.pool.to_dict(),
            "tariff": self.tariff, "pv_shape": self.pv_shape, "month": self.month,
            "strategies": list(self.strategies), "resolutions": list(self.resolutions),
            "stochastic": stoch, "zonal": {"k": self.zonal_k}, "allocation": alloc,
            "sizing": {"min_kw": self.grid.min_kw, "max_kw": self.grid.max_kw,
                       "step_kw": self.grid.step_kw, "a_pv": self.cost.a_pv,
                       "lifetime_y": self.cost.lifetime_y,
                       "discount_rate": self.cost.discount_rate},
            "out": self.out, "workers": self.workers,
        }


_TOP_KEYS = {"rng_seed", "feeder", "pool", "tariff", "pv_shape", "month", "strategies",
             "resolutions", "stochastic", "zonal", "allocation", "sizing", "out", "workers"}


def _expect(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def _resolve(value: str, base: Path) -> str:
    if value.startswith(BUILTIN):
        return value
    p = Path(value)
    return str(p if p.is_absolute() else base / p)


def _check_exists(value: str, what: str) -> None:
    if not value.startswith(BUILTIN) and not Path(value).exists():
        raise ConfigError(f"{what} not found: {value}")


def config_from_dict(doc: Mapping[str, Any], base_dir: str | Path = ".", *,
                     seed: int | None = None, out: str | None = None,
                     workers: int | None = None) -> StudyConfig:
    """Build and validate a StudyConfig; keyword overrides win over the document."""
    base = Path(base_dir)
    _expect(isinstance(doc, Mapping), "config must be a JSON object")
    unknown = set(doc) - _TOP_KEYS
    _expect(not unknown, f"unknown config key(s): {', '.join(sorted(unknown))}")
    if seed is None:
        seed = doc.get("rng_seed")
    _expect(seed is not None, "rng_seed is mandatory (set it in the config or pass --seed)")
    _expect(isinstance(seed, int) and not isinstance(seed, bool) and 0 <= seed < 2 ** 64,
            "rng_seed must be an unsigned 64-bit integer")

    pool_doc = doc.get("pool", {"synthetic": {}})
    _expect(isinstance(pool_doc, Mapping) and len(set(pool_doc) & {"csv", "synthetic"}) == 1,
            "pool must name exactly one of 'csv' or 'synthetic'")
    if "csv" in pool_doc:
        _expect(set(pool_doc) <= {"csv", "resolution_s"}, "pool.csv accepts only resolution_s")
        pool = PoolSpec(csv=_resolve(pool_doc["csv"], base),
                        resolution_s=int(pool_doc.get("resolution_s", 60)))
    else:
        syn = pool_doc["synthetic"] or {}
        _expect(set(syn) <= {"n_houses"}, "pool.synthetic accepts only n_houses")
        pool = PoolSpec(n_houses=int(syn.get("n_houses", 700)))
        _expect(pool.n_houses >= 1, "pool.synthetic.n_houses must be >= 1")

    month = int(doc.get("month", 4))
    _expect(1 <= month <= 12, "month must be in 1..12")
    strategies = tuple(doc.get("strategies", ("optimal", "random", "fixed")))
    try:
        strategies = tuple(Strategy(s).value for s in strategies)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    _expect(len(strategies) > 0, "strategies must not be empty")
    resolutions = tuple(int(r) for r in doc.get("resolutions", (60, 1800)))
    _expect(len(resolutions) > 0 and all(r > 0 and WEEK_S % r == 0 for r in resolutions),
            "resolutions must be positive divisors of one week (seconds)")

    stoch = dict(doc.get("stochastic", {}))
    _expect("rng_seed" not in stoch and "strategy" not in stoch,
            "stochastic.rng_seed/strategy are set by rng_seed/strategies")
    stoch.setdefault("load_scale", DEFAULT_MONTH_FACTORS[month - 1])
    alloc = dict(doc.get("allocation", {}))
    _expect("rng_seed" not in alloc, "allocation.rng_seed is set by rng_seed")
    sizing = dict(doc.get("sizing", {}))
    grid_keys = {"min_kw", "max_kw", "step_kw"}
    cost_keys = {"a_pv", "lifetime_y", "discount_rate"}
    _expect(set(sizing) <= grid_keys | cost_keys, "unknown sizing key")
    zonal = dict(doc.get("zonal", {}))
    _expect(set(zonal) <= {"k"}, "zonal accepts only k")
    try:
        cfg = StudyConfig(
            rng_seed=seed,
            feeder=_resolve(doc.get("feeder", BUILTIN + "ieee123"), base),
            pool=pool,
            tariff=_resolve(doc.get("tariff", BUILTIN + "duke_tou_2018"), base),
            pv_shape=_resolve(doc.get("pv_shape", BUILTIN + "clearsky"), base),
            month=month, strategies=strategies, resolutions=resolutions,
            stochastic=StochasticConfig(rng_seed=seed, **stoch),
            zonal_k=int(zonal.get("k", 10)),
            allocation=AllocationConfig(rng_seed=seed, **alloc),
            grid=SizingGrid(**{k: v for k, v in sizing.items() if k in grid_keys}),
            cost=PvCostModel(**{k: v for k, v in sizing.items() if k in cost_keys}),
            out=out if out is not None else _resolve(doc.get("out", "out"), base),
            workers=int(workers if workers is not None else doc.get("workers", 1)),
        )
    except TypeError as exc:
        raise ConfigError(f"bad config field: {exc}") from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    _expect(cfg.workers >= 1, "workers must be >= 1")
    _expect(cfg.zonal_k >= 1, "zonal.k must be >= 1")
    _expect(cfg.feeder.startswith(BUILTIN) or Path(cfg.feeder).suffix == ".json",
            "feeder must be a .json path or builtin:<name>")
    _expect(cfg.pv_shape.startswith(BUILTIN + "clearsky") or not cfg.pv_shape.startswith(BUILTIN),
            "pv_shape must be builtin:clearsky or a CSV path")
    _check_exists(cfg.feeder, "feeder file")
    _check_exists(cfg.tariff, "tariff file")
    _check_exists(cfg.pv_shape, "PV shape file")
    if pool.csv is not None:
        _check_exists(pool.csv, "load profile file")
    return cfg


def load_config(path: str | Path | None, **overrides) -> StudyConfig:
    if path is None:
        return config_from_dict({}, ".", **overrides)
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return config_from_dict(doc, path.parent, **overrides)


# --------------------------------------------------------------------------- #
# inputs


def feeder_of(cfg: StudyConfig) -> FeederModel:
    if cfg.feeder.startswith(BUILTIN):
        return load_builtin(cfg.feeder[len(BUILTIN):])
    return parse_feeder(cfg.feeder)


def pool_of(cfg: StudyConfig) -> LoadPool:
    if cfg.pool.csv is not None:
        return ingest_csv(cfg.pool.csv, cfg.pool.resolution_s)
    return generate_synthetic_pool(cfg.pool.n_houses, cfg.rng_seed)


def tariff_of(cfg: StudyConfig) -> TariffSchedule:
    if cfg.tariff.startswith(BUILTIN):
        _expect(cfg.tariff == BUILTIN + "duke_tou_2018", f"unknown builtin tariff {cfg.tariff}")
        return duke_tou_2018()
    return load_tariff(cfg.tariff)


def pv_week(cfg: StudyConfig, native_s: int, resolution_s: int) -> np.ndarray:
    """Per-unit PV output over the simulated week at ``resolution_s``."""
    if cfg.pv_shape.startswith(BUILTIN):
        return ClearSky().week(cfg.month, resolution_s)
    shape = load_shape_csv(cfg.pv_shape)
    if len(shape) != WEEK_S // native_s:
        raise ConfigError(f"{cfg.pv_shape}: {len(shape)} samples, expected {WEEK_S // native_s} "
                          f"(one week at {native_s} s)")
    return shape if resolution_s == native_s else resample_shape(shape, native_s, resolution_s)


def _dump(doc: Any, path: Path) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _read(path: Path, stage: str) -> Any:
    if not path.exists():
        raise ArtifactError(f"{path} not found; run '{stage}' first")
    return json.loads(path.read_text())


# --------------------------------------------------------------------------- #
# allocation


def allocation_to_dict(cfg: StudyConfig, feeder: FeederModel, alloc: FeederAllocation) -> dict:
    return {
        "feeder": feeder.name,
        "rng_seed": cfg.rng_seed,
        "pool": cfg.pool.to_dict(),
        "resolution_s": alloc.resolution_s,
        "n_houses": alloc.n_houses,
        "feeder_peak_kw": float(alloc.head_kw().max()),
        "nodes": [{"node_index": n.node_index, "bus": n.bus_id, "peak_kw": n.peak_kw,
                   "aggregate_peak_kw": n.aggregate_peak_kw,
                   "houses": [{"house_id": h, "profile_id": p}
                              for h, p in zip(n.house_ids(), n.profile_ids)]}
                  for n in alloc.nodes],
    }


def allocation_from_dict(doc: Mapping, pool: LoadPool) -> FeederAllocation:
    nodes = []
    for n in doc["nodes"]:
        ids = [h["profile_id"] for h in n["houses"]]
        missing = [p for p in ids if p not in pool.house_ids]
        if missing:
            raise ArtifactError(f"allocation refers to profile(s) not in the pool: {missing[:3]}")
        agg = pool.kw[[pool.index(p) for p in ids]].sum(axis=0)
        nodes.append(NodeAllocation(n["node_index"], n["bus"], n["peak_kw"], ids, agg,
                                    float(agg.max())))
    return FeederAllocation(nodes, pool.resolution_s)


def run_allocate(cfg: StudyConfig) -> dict:
    feeder = feeder_of(cfg)
    alloc = allocate_feeder(feeder, pool_of(cfg), cfg.allocation)
    doc = allocation_to_dict(cfg, feeder, alloc)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _dump(doc, out / "allocation.json")
    return {"n_nodes": len(doc["nodes"]), "n_houses": doc["n_houses"],
            "feeder_peak_kw": doc["feeder_peak_kw"]}


def _load_allocation(cfg: StudyConfig, pool: LoadPool) -> FeederAllocation:
    doc = _read(Path(cfg.out) / "allocation.json", "allocate")
    if doc.get("rng_seed") != cfg.rng_seed or doc.get("pool") != cfg.pool.to_dict():
        raise ArtifactError("allocation.json was produced with a different seed or pool; "
                            "rerun 'allocate'")
    return allocation_from_dict(doc, pool)


# --------------------------------------------------------------------------- #
# sizing


def run_size(cfg: StudyConfig) -> dict:
    """Size every distinct allocated profile once; houses inherit their profile's result."""
    pool = pool_of(cfg)
    alloc = _load_allocation(cfg, pool)
    tariff = tariff_of(cfg)
    profiles = {}
    for pid in sorted({p for _, _, p in alloc.houses()}):
        res = size_house(pool.profile(pid).kw, pool.resolution_s, tariff, cfg.cost, cfg.grid)
        profiles[pid] = {"optimal_kw": res.optimal_kw, "curve": res.curve()}
    doc = {
        "rng_seed": cfg.rng_seed,
        "grid": {"min_kw": cfg.grid.min_kw, "max_kw": cfg.grid.max_kw,
                 "step_kw": cfg.grid.step_kw},
        "houses": {h: {"optimal_kw": profiles[p]["optimal_kw"], "profile_id": p}
                   for h, _, p in alloc.houses()},
        "profiles": profiles,
    }
    _dump(doc, Path(cfg.out) / "sizing.json")
    kw = [v["optimal_kw"] for v in doc["houses"].values()]
    return {"n_houses": len(kw), "n_profiles": len(profiles), "total_kw": float(sum(kw))}


def _load_sizing(cfg: StudyConfig, needed: bool) -> dict[str, float] | None:
    path = Path(cfg.out) / "sizing.json"
    if not needed and not path.exists():
        return None
    doc = _read(path, "size")
    if doc.get("rng_seed") != cfg.rng_seed:
        raise ArtifactError("sizing.json does not match the current allocation; rerun 'size'")
    return {h: v["optimal_kw"] for h, v in doc["houses"].items()}


def _at_resolution(cfg: StudyConfig, pool: LoadPool, alloc: FeederAllocation, res: int):
    if res == pool.resolution_s:
        return alloc, pv_week(cfg, pool.resolution_s, res)
    return alloc.with_pool(pool.resampled(res)), pv_week(cfg, pool.resolution_s, res)


# --------------------------------------------------------------------------- #
# hosting capacity


def hosting_table(docs: Iterable[Mapping]) -> list[dict]:
    """Strategy x resolution minimum hosting capacity from serialized results."""
    cells = {}
    for d in docs:
        key = (d["config"]["strategy"], int(d["resolution_s"]))
        cells[key] = d["summary"]
    order = [s.value for s in Strategy]
    strategies = sorted({s for s, _ in cells}, key=order.index)
    resolutions = sorted({r for _, r in cells})
    rows = []
    for s in strategies:
        row = {"strategy": s}
        for r in resolutions:
            summary = cells.get((s, r))
            row[f"min_hc_kw_{r}s"] = None if summary is None else summary["min_hosting_capacity_kw"]
            row[f"status_{r}s"] = None if summary is None else summary["status"]
        rows.append(row)
    return rows


def write_rows_csv(rows: Sequence[Mapping], path: Path) -> None:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else ("" if v is None else v)
                        for k, v in row.items()})


def run_hosting(cfg: StudyConfig, strategies: Sequence[str] | None = None) -> list[dict]:
    strategies = [Strategy(s) for s in (strategies or cfg.strategies)]
    pool = pool_of(cfg)
    alloc = _load_allocation(cfg, pool)
    sizing = _load_sizing(cfg, Strategy.OPTIMAL in strategies)
    feeder = feeder_of(cfg)
    results: list[HostingCapacityResult] = []
    for res in cfg.resolutions:
        a, shape = _at_resolution(cfg, pool, alloc, res)
        for s in strategies:
            results.append(run_study(feeder, a, shape, replace(cfg.stochastic, strategy=s),
                                     sizing, cfg.workers))
    out = Path(cfg.out)
    write_result_json(results, out / "hosting.json")
    for s in strategies:
        write_penetration_csv([r for r in results if r.config.strategy is s],
                              out / FIG_FOR_STRATEGY[s.value])
    write_distribution_csv(results, out / "fig10.csv")
    rows = hosting_table(r.to_dict() for r in results)
    write_rows_csv(rows, out / "table2.csv")
    return rows


# --------------------------------------------------------------------------- #
# zonal


def run_zonal(cfg: StudyConfig, strategies: Sequence[str] | None = None) -> ZonalResult:
    strategies = [Strategy(s) for s in (strategies or cfg.strategies)]
    pool = pool_of(cfg)
    alloc = _load_allocation(cfg, pool)
    sizing = _load_sizing(cfg, Strategy.OPTIMAL in strategies)
    feeder = feeder_of(cfg)
    zones = partition(feeder, cfg.zonal_k)
    check_partition(feeder, zones)
    st = cfg.stochastic
    result = ZonalResult()
    for res in cfg.resolutions:
        a, shape = _at_resolution(cfg, pool, alloc, res)
        for s in strategies:
            result = result.merged(zonal_study(
                feeder, a, zones, s, shape, sizing=sizing, fixed_kw=st.fixed_kw,
                random_dist=st.random_dist, rng_seed=cfg.rng_seed, load_scale=st.load_scale,
                power_factor=st.power_factor, workers=cfg.workers))
    out = Path(cfg.out)
    write_zones_json(zones, out / "zones.json")
    write_zonal_csv(result, out / "zonal.csv")
    _dump(result.to_dict(), out / "zonal.json")
    return result


# --------------------------------------------------------------------------- #
# report


def resolution_differences(zonal_doc: Mapping) -> list[dict]:
    """Per zone and strategy, delta_v at every resolution and its spread."""
    by_key: dict[tuple[int, str], dict[int, float]] = {}
    for r in zonal_doc["records"]:
        by_key.setdefault((r["zone"], r["strategy"]), {})[int(r["resolution_s"])] = r["delta_v_pu"]
    resolutions = sorted({res for d in by_key.values() for res in d})
    rows = []
    for (zone, strategy), d in sorted(by_key.items()):
        row = {"zone": zone, "strategy": strategy}
        for res in resolutions:
            row[f"delta_v_pu_{res}s"] = d.get(res)
        present = [d[r] for r in resolutions if r in d]
        row["difference_pu"] = present[0] - present[-1] if len(present) > 1 else None
        rows.append(row)
    return rows


def run_report(cfg: StudyConfig) -> dict:
    out = Path(cfg.out)
    hosting = _read(out / "hosting.json", "hosting")
    table = hosting_table(hosting)
    write_rows_csv(table, out / "table2.csv")
    report = {"table": table}
    zpath = out / "zonal.json"
    if zpath.exists():
        diffs = resolution_differences(json.loads(zpath.read_text()))
        if diffs:
            write_rows_csv(diffs, out / "zonal_resolution.csv")
        report["zonal_resolution"] = diffs
    return report
