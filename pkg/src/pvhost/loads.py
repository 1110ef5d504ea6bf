"""Household load pool, nodal load allocation and resampling."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .feeder import FeederModel
from .rng import Stream, substream

WEEK_S = 7 * 24 * 3600


class LoadDataError(ValueError):
    pass


class AllocationError(RuntimeError):
    """No combination of pool profiles hit the nodal peak band."""

    def __init__(self, message: str, nodes: Sequence[str] = ()):
        super().__init__(message)
        self.nodes = list(nodes)


@dataclass(frozen=True)
class LoadProfile:
    house_id: str
    resolution_s: int
    kw: np.ndarray

    def __post_init__(self):
        kw = np.asarray(self.kw, dtype=float)
        object.__setattr__(self, "kw", kw)
        if kw.ndim != 1 or len(kw) * self.resolution_s != WEEK_S:
            raise LoadDataError(
                f"{self.house_id}: {len(kw)} samples at {self.resolution_s} s is not one week")
        if np.any(kw < 0):
            raise LoadDataError(f"{self.house_id}: negative kW")

    @property
    def peak_kw(self) -> float:
        return float(self.kw.max())

    @property
    def energy_kwh(self) -> float:
        return float(self.kw.sum() * self.resolution_s / 3600.0)


@dataclass
class LoadPool:
    """Immutable collection of weekly profiles at one resolution, stored as a matrix."""

    house_ids: list[str]
    kw: np.ndarray  # (n_houses, T)
    resolution_s: int
    peaks: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.kw = np.ascontiguousarray(self.kw, dtype=float)
        if not self.house_ids:
            raise LoadDataError("load pool is empty")
        if self.kw.shape != (len(self.house_ids), WEEK_S // self.resolution_s):
            raise LoadDataError(f"pool matrix shape {self.kw.shape} does not match "
                                f"{len(self.house_ids)} weekly profiles at {self.resolution_s} s")
        self.kw.setflags(write=False)
        self.peaks = self.kw.max(axis=1)
        self._index = {h: i for i, h in enumerate(self.house_ids)}

    @classmethod
    def from_profiles(cls, profiles: Iterable[LoadProfile]) -> "LoadPool":
        profiles = list(profiles)
        if not profiles:
            raise LoadDataError("load pool is empty")
        res = {p.resolution_s for p in profiles}
        if len(res) > 1:
            raise LoadDataError(f"mixed resolutions in pool: {sorted(res)}")
        return cls([p.house_id for p in profiles], np.vstack([p.kw for p in profiles]), res.pop())

    def __len__(self) -> int:
        return len(self.house_ids)

    def index(self, house_id: str) -> int:
        return self._index[house_id]

    def profile(self, house_id: str) -> LoadProfile:
        return LoadProfile(house_id, self.resolution_s, self.kw[self._index[house_id]])

    def resampled(self, target_resolution_s: int) -> "LoadPool":
        ratio = _ratio(self.resolution_s, target_resolution_s)
        kw = self.kw.reshape(len(self), -1, ratio).mean(axis=2)
        return LoadPool(list(self.house_ids), kw, target_resolution_s)


# --------------------------------------------------------------------------- #
# ingestion and synthesis


def ingest_csv(path: str | Path, resolution_s: int) -> LoadPool:
    """Read ``house_id,t0,t1,...`` rows (kW), one weekly profile per row."""
    path = Path(path)
    if not path.exists():
        raise LoadDataError(f"profile file not found: {path}")
    expected = WEEK_S // resolution_s
    if expected * resolution_s != WEEK_S:
        raise LoadDataError(f"resolution {resolution_s} s does not divide one week")
    ids, rows = [], []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "house_id":
            raise LoadDataError(f"{path}: header must start with 'house_id'")
        if len(header) - 1 != expected:
            raise LoadDataError(
                f"{path}: header has {len(header) - 1} time columns, expected {expected} "
                f"for one week at {resolution_s} s")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != expected + 1:
                raise LoadDataError(f"{path}: row {lineno} has {len(row) - 1} values, expected {expected}")
            try:
                values = np.array([float(v) for v in row[1:]])
            except ValueError:
                raise LoadDataError(f"{path}: row {lineno} has a non-numeric value") from None
            if np.any(values < 0) or not np.all(np.isfinite(values)):
                raise LoadDataError(f"{path}: row {lineno} has negative or non-finite kW")
            ids.append(row[0])
            rows.append(values)
    if len(set(ids)) != len(ids):
        raise LoadDataError(f"{path}: duplicate house ids")
    if not rows:
        raise LoadDataError(f"{path}: no profiles")
    return LoadPool(ids, np.vstack(rows), resolution_s)


def write_csv(pool: LoadPool, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["house_id"] + [f"t{i}" for i in range(pool.kw.shape[1])])
        for hid, row in zip(pool.house_ids, pool.kw):
            w.writerow([hid] + [repr(float(v)) for v in row])


def _bump(hours: np.ndarray, center: float, width: float) -> np.ndarray:
    """Periodic (24 h) Gaussian bump."""
    d = (hours - center + 12.0) % 24.0 - 12.0
    return np.exp(-0.5 * (d / width) ** 2)


def synthetic_profile(rng: np.random.Generator) -> np.ndarray:
    """One week of 1-minute household demand (kW)."""
    minutes = np.arange(WEEK_S // 60)
    hours = (minutes % 1440) / 60.0
    day = minutes // 1440
    weekend = day >= 5

    base = rng.uniform(0.15, 0.6)
    morning = rng.uniform(0.3, 2.5)
    evening = rng.uniform(0.8, 3.5)
    daytime = rng.uniform(0.3, 4.5)
    t_morning = rng.normal(7.0, 0.6)
    t_evening = rng.normal(19.0, 0.8)
    t_day = rng.normal(15.0, 1.0)
    w_day = rng.uniform(2.5, 3.5)

    kw = np.full(len(minutes), base)
    for d in range(7):
        sel = day == d
        h = hours[sel]
        shift = 1.5 if weekend[sel][0] else 0.0
        scale = rng.uniform(0.75, 1.25, size=3)
        kw[sel] += scale[0] * morning * _bump(h, t_morning + shift + rng.normal(0, 0.3), 0.8)
        kw[sel] += scale[1] * evening * _bump(h, t_evening + rng.normal(0, 0.4), 1.4)
        kw[sel] += scale[2] * daytime * (1.2 if weekend[sel][0] else 1.0) * _bump(h, t_day, w_day)

    # appliance cycles: short rectangular bursts
    n_events = rng.poisson(4 * 7)
    starts = rng.integers(0, len(minutes), size=n_events)
    lengths = rng.integers(5, 45, size=n_events)
    powers = rng.uniform(0.5, 2.5, size=n_events)
    for s, n, p in zip(starts, lengths, powers):
        kw[s:s + n] += p

    kw *= 1.0 + rng.normal(0.0, 0.05, size=len(kw))
    return np.clip(kw, 0.0, 12.0)


def generate_synthetic_pool(n_houses: int, rng_seed: int, resolution_s: int = 60) -> LoadPool:
    """Deterministic pool of synthetic weekly profiles (Monday 00:00 start)."""
    if n_houses < 1:
        raise ValueError("n_houses must be >= 1")
    kw = np.vstack([synthetic_profile(substream(rng_seed, Stream.POOL, h))
                    for h in range(n_houses)])
    pool = LoadPool([f"H{h:04d}" for h in range(n_houses)], kw, 60)
    return pool if resolution_s == 60 else pool.resampled(resolution_s)


# --------------------------------------------------------------------------- #
# allocation


@dataclass(frozen=True)
class AllocationConfig:
    upper_factor: float = 1.03
    lower_factor: float = 0.97
    max_attempts: int = 1000
    max_redraws: int = 200
    rng_seed: int = 0

    def __post_init__(self):
        if not self.lower_factor < 1.0 < self.upper_factor:
            raise ValueError("need lower_factor < 1 < upper_factor")


@dataclass
class NodeAllocation:
    node_index: int
    bus_id: str
    peak_kw: float
    profile_ids: list[str]
    aggregate_kw: np.ndarray
    aggregate_peak_kw: float

    @property
    def n_houses(self) -> int:
        return len(self.profile_ids)

    def house_ids(self) -> list[str]:
        return [f"{self.bus_id}#{self.node_index}-{k}" for k in range(self.n_houses)]


def allocate_node(pool: LoadPool, peak_kw: float, config: AllocationConfig = AllocationConfig(),
                  rng: np.random.Generator | None = None, *, node_index: int = 0,
                  bus_id: str = "") -> NodeAllocation:
    """Draw house profiles until the aggregate weekly maximum lies in the nodal band.

    Within one attempt profiles are drawn without replacement; a draw that
    pushes the aggregate above the upper bound is discarded and replaced.
    Attempts restart from an empty node and may reuse any profile.
    """
    if peak_kw <= 0:
        raise ValueError("peak_kw must be positive")
    if len(pool) == 0:
        raise AllocationError("empty load pool")
    upper = config.upper_factor * peak_kw
    lower = config.lower_factor * peak_kw
    if pool.peaks.min() > upper:
        raise AllocationError(
            f"node peak {peak_kw:g} kW is below every house peak in the pool "
            f"(min {pool.peaks.min():.3g} kW)", [bus_id] if bus_id else [])
    if rng is None:
        rng = np.random.default_rng(config.rng_seed)

    n = len(pool)
    for _ in range(config.max_attempts):
        agg = np.zeros(pool.kw.shape[1])
        chosen: list[int] = []
        redraws = 0
        for idx in rng.permutation(n):
            if pool.peaks[idx] > upper:
                continue
            cand = agg + pool.kw[idx]
            peak = cand.max()
            if peak > upper:
                redraws += 1
                if redraws > config.max_redraws:
                    break
                continue
            agg = cand
            chosen.append(int(idx))
            if peak > lower:
                return NodeAllocation(node_index, bus_id, peak_kw,
                                      [pool.house_ids[i] for i in chosen], agg, float(peak))
    raise AllocationError(
        f"could not allocate {peak_kw:g} kW within ({lower:g}, {upper:g}] "
        f"after {config.max_attempts} attempts", [bus_id] if bus_id else [])


@dataclass
class FeederAllocation:
    """Houses placed on every load node of a feeder."""

    nodes: list[NodeAllocation]
    resolution_s: int

    @property
    def n_houses(self) -> int:
        return sum(n.n_houses for n in self.nodes)

    def houses(self) -> list[tuple[str, int, str]]:
        """(house id, load-node index, pool profile id) for every simulated house."""
        out = []
        for node in self.nodes:
            for hid, pid in zip(node.house_ids(), node.profile_ids):
                out.append((hid, node.node_index, pid))
        return out

    def nodal_load_kw(self) -> np.ndarray:
        return np.vstack([n.aggregate_kw for n in self.nodes])

    def head_kw(self) -> np.ndarray:
        """Feeder-head demand series used to express penetration (losses excluded)."""
        return self.nodal_load_kw().sum(axis=0)

    def with_pool(self, pool: LoadPool) -> "FeederAllocation":
        """Same house-to-profile mapping evaluated on another pool (e.g. resampled)."""
        nodes = []
        for n in self.nodes:
            agg = pool.kw[[pool.index(p) for p in n.profile_ids]].sum(axis=0)
            nodes.append(NodeAllocation(n.node_index, n.bus_id, n.peak_kw, list(n.profile_ids),
                                        agg, float(agg.max())))
        return FeederAllocation(nodes, pool.resolution_s)


def allocate_feeder(feeder: FeederModel, pool: LoadPool,
                    config: AllocationConfig = AllocationConfig()) -> FeederAllocation:
    """Allocate every load node with its own RNG substream derived from (seed, node)."""
    if len(pool) == 0:
        raise AllocationError("empty load pool")
    nodes, failed = [], []
    for i, ln in enumerate(feeder.load_nodes):
        rng = substream(config.rng_seed, Stream.ALLOCATION, i)
        try:
            nodes.append(allocate_node(pool, ln.peak_kw, config, rng, node_index=i, bus_id=ln.bus_id))
        except AllocationError:
            failed.append(f"{i}:{ln.bus_id}")
    if failed:
        raise AllocationError(f"allocation failed for load node(s) {', '.join(failed)}", failed)
    return FeederAllocation(nodes, pool.resolution_s)


# --------------------------------------------------------------------------- #
# resampling


def _ratio(source_s: int, target_s: int) -> int:
    if target_s < source_s:
        raise LoadDataError(f"upsampling {source_s} s -> {target_s} s is not supported")
    ratio = target_s / source_s
    if ratio != math.floor(ratio):
        raise LoadDataError(f"{target_s} s is not an integer multiple of {source_s} s")
    return int(ratio)


def block_mean(series: np.ndarray, ratio: int) -> np.ndarray:
    series = np.asarray(series, dtype=float)
    if series.shape[-1] % ratio:
        raise LoadDataError(f"series length {series.shape[-1]} not divisible by {ratio}")
    return series.reshape(*series.shape[:-1], -1, ratio).mean(axis=-1)


def resample(profile: LoadProfile, target_resolution_s: int) -> LoadProfile:
    """Downsample by block mean; weekly energy is preserved."""
    ratio = _ratio(profile.resolution_s, target_resolution_s)
    return LoadProfile(profile.house_id, target_resolution_s, block_mean(profile.kw, ratio))
