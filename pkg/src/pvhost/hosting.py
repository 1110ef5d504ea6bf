"""Stochastic PV hosting-capacity study.

Each scenario is a random ordering of the feeder's houses. PV is deployed
along that ordering in ``n_steps`` penetration increments, a weekly QSTS is
run at every step and the first step whose maximum voltage exceeds the
overvoltage limit marks the scenario's hosting capacity.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import ndtr, ndtri
from threadpoolctl import threadpool_limits

from .feeder import FeederModel
from .loads import FeederAllocation
from .parallel import ordered_map
from .powerflow import DEFAULT_POWER_FACTOR, ConvergenceError, QstsResult, run_qsts
from .rng import Stream, substream

PERCENTILES = (("min", 0.0), ("p5", 5.0), ("p25", 25.0), ("p50", 50.0),
               ("p75", 75.0), ("p95", 95.0), ("max", 100.0))
NO_VIOLATION = "no violation observed"


class Basis(str, Enum):
    CAPACITY_RATIO = "capacity_ratio"
    CUSTOMER_FRACTION = "customer_fraction"


class Strategy(str, Enum):
    OPTIMAL = "optimal"
    RANDOM = "random"
    FIXED = "fixed"


class StudyError(ConvergenceError):
    """Solver failure tagged with where in the study it happened."""

    def __init__(self, message: str, scenario: int | None, step: int | None,
                 timestep: int | None, zone: int | None = None):
        super().__init__(message, timestep)
        self.scenario = scenario
        self.step_index = step
        self.timestep = timestep
        self.zone = zone


@dataclass(frozen=True)
class RandomSizeDist:
    """Log-normal PV sizes truncated to ``[low_kw, high_kw]``."""

    median_kw: float = 5.0
    sigma: float = 0.5
    low_kw: float = 1.0
    high_kw: float = 15.0

    def __post_init__(self):
        if self.median_kw <= 0 or self.sigma < 0:
            raise ValueError("log-normal needs a positive median and non-negative sigma")
        if not 0 < self.low_kw <= self.high_kw:
            raise ValueError("truncation bounds must satisfy 0 < low <= high")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        u = rng.random(n)
        mu = math.log(self.median_kw)
        if self.sigma == 0:
            return np.full(n, min(max(self.median_kw, self.low_kw), self.high_kw))
        lo = ndtr((math.log(self.low_kw) - mu) / self.sigma)
        hi = ndtr((math.log(self.high_kw) - mu) / self.sigma)
        kw = np.exp(mu + self.sigma * ndtri(lo + u * (hi - lo)))
        return np.clip(kw, self.low_kw, self.high_kw)


@dataclass(frozen=True)
class StochasticConfig:
    m_scenarios: int = 100
    n_steps: int = 20
    overvoltage_limit_pu: float = 1.05
    penetration_basis: Basis = Basis.CAPACITY_RATIO
    strategy: Strategy = Strategy.OPTIMAL
    fixed_kw: float = 10.0
    random_dist: RandomSizeDist = field(default_factory=RandomSizeDist)
    rng_seed: int = 0
    power_factor: float = DEFAULT_POWER_FACTOR
    load_scale: float = 1.0  # seasonal multiplier on the allocated profiles during QSTS

    def __post_init__(self):
        object.__setattr__(self, "penetration_basis", Basis(self.penetration_basis))
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if isinstance(self.random_dist, Mapping):
            object.__setattr__(self, "random_dist", RandomSizeDist(**self.random_dist))
        if self.m_scenarios < 1:
            raise ValueError("need at least one scenario")
        if self.n_steps < 1:
            raise ValueError("need at least one penetration step")
        if self.overvoltage_limit_pu <= 1.0:
            raise ValueError("overvoltage limit must exceed 1.0 pu")
        if self.fixed_kw < 0:
            raise ValueError("fixed PV size must be non-negative")
        if self.load_scale <= 0:
            raise ValueError("load scale must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["penetration_basis"] = self.penetration_basis.value
        d["strategy"] = self.strategy.value
        return d


# --------------------------------------------------------------------------- #
# scenarios and deployments


def generate_scenarios(houses: Sequence, config: StochasticConfig) -> list[np.ndarray]:
    """One independent permutation of house indices per scenario."""
    if len(houses) == 0:
        raise ValueError("no houses to deploy PV on")
    return [substream(config.rng_seed, Stream.SCENARIO, m).permutation(len(houses))
            for m in range(config.m_scenarios)]


def assign_capacities(house_ids: Sequence[str], strategy: Strategy | str, *,
                      sizing: Mapping[str, float] | None = None,
                      random_dist: RandomSizeDist = RandomSizeDist(),
                      fixed_kw: float = 10.0,
                      rng: np.random.Generator | None = None) -> np.ndarray:
    """PV size per house, in the order of ``house_ids``."""
    strategy = Strategy(strategy)
    n = len(house_ids)
    if strategy is Strategy.FIXED:
        return np.full(n, float(fixed_kw))
    if strategy is Strategy.RANDOM:
        if rng is None:
            raise ValueError("random strategy needs a generator")
        return random_dist.sample(rng, n)
    if sizing is None:
        raise KeyError("optimal strategy needs sizing results")
    missing = [h for h in house_ids if h not in sizing]
    if missing:
        raise KeyError(f"no sizing result for house(s) {', '.join(missing[:5])}")
    return np.array([float(sizing[h]) for h in house_ids])


def step_counts(order: np.ndarray, kw: np.ndarray, n_steps: int, basis: Basis | str,
                basis_kva: float | None = None) -> np.ndarray:
    """Number of houses (prefix length of ``order``) carrying PV at each step 0..N."""
    basis = Basis(basis)
    h = len(order)
    steps = np.arange(n_steps + 1)
    if basis is Basis.CUSTOMER_FRACTION:
        # integer ceil of n*H/N avoids float fuzz at exact multiples
        return -((-steps * h) // n_steps)
    if basis_kva is None or basis_kva <= 0:
        raise ValueError("capacity-ratio basis needs a positive feeder kVA")
    cum = np.concatenate([[0.0], np.cumsum(kw[order])])
    targets = steps / n_steps * basis_kva
    # shortest prefix reaching each target; unreachable targets deploy everyone
    counts = np.searchsorted(cum, targets - 1e-9 * basis_kva, side="left")
    return np.minimum(counts, h)


@dataclass
class PvDeployment:
    scenario: int
    step: int
    has_pv: np.ndarray  # bool per house; zero-kW houses still count as customers
    house_kw: np.ndarray
    total_kw: float
    penetration: float

    @property
    def n_pv_houses(self) -> int:
        return int(np.count_nonzero(self.has_pv))


def deployments(order: np.ndarray, kw: np.ndarray, config: StochasticConfig, scenario: int,
                basis_kva: float | None = None) -> list[PvDeployment]:
    """Nested deployments of one scenario for steps 0..N."""
    counts = step_counts(order, kw, config.n_steps, config.penetration_basis, basis_kva)
    out = []
    for n, c in enumerate(counts):
        mask = np.zeros(len(order), dtype=bool)
        mask[order[:c]] = True
        house_kw = np.where(mask, kw, 0.0)
        total = float(house_kw.sum())
        if config.penetration_basis is Basis.CAPACITY_RATIO:
            pen = total / basis_kva
        else:
            pen = int(c) / len(order)
        out.append(PvDeployment(scenario, n, mask, house_kw, total, pen))
    return out


# --------------------------------------------------------------------------- #
# study


@dataclass(frozen=True)
class StepRecord:
    scenario: int
    step: int
    penetration: float
    total_kw: float
    n_pv_houses: int
    max_v_pu: float
    max_bus: str
    max_timestep: int
    violation: bool


@dataclass
class HostingCapacityResult:
    config: StochasticConfig
    resolution_s: float
    basis_kva: float
    n_houses: int
    records: list[StepRecord]

    def __post_init__(self):
        self.records = sorted(self.records, key=lambda r: (r.scenario, r.step))

    def scenario_records(self, scenario: int) -> list[StepRecord]:
        return [r for r in self.records if r.scenario == scenario]

    def first_violations(self) -> dict[int, StepRecord]:
        first: dict[int, StepRecord] = {}
        for r in self.records:
            if r.violation and r.scenario not in first:
                first[r.scenario] = r
        return first

    @property
    def violation_observed(self) -> bool:
        return bool(self.first_violations())

    @property
    def min_hosting_capacity_kw(self) -> float:
        """Smallest installed kW at a first violation; without any, the 100%-step capacity."""
        first = self.first_violations()
        if first:
            return min(r.total_kw for r in first.values())
        last = self.config.n_steps
        return min(r.total_kw for r in self.records if r.step == last)

    @property
    def status(self) -> str:
        return "violation" if self.violation_observed else NO_VIOLATION

    def max_voltages(self, step: int) -> np.ndarray:
        if not 0 <= step <= self.config.n_steps:
            raise IndexError(f"step {step} outside 0..{self.config.n_steps}")
        return np.array([r.max_v_pu for r in self.records if r.step == step])

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "resolution_s": self.resolution_s,
            "basis_kva": self.basis_kva,
            "n_houses": self.n_houses,
            "records": [asdict(r) for r in self.records],
            "summary": {
                "status": self.status,
                "min_hosting_capacity_kw": self.min_hosting_capacity_kw,
                "first_violation_step": {str(s): r.step
                                         for s, r in sorted(self.first_violations().items())},
                "max_voltage_distribution": [
                    {"step": n, **max_voltage_distribution(self, n)}
                    for n in range(self.config.n_steps + 1)
                ],
            },
        }


def max_voltage_distribution(result: HostingCapacityResult, step: int) -> dict[str, float]:
    """Empirical percentiles of the per-scenario maximum voltage at one step."""
    v = result.max_voltages(step)
    return {name: float(np.percentile(v, q)) for name, q in PERCENTILES}


def feeder_basis_kva(allocation: FeederAllocation,
                     power_factor: float = DEFAULT_POWER_FACTOR) -> float:
    """Peak apparent power at the feeder head, from the allocated profiles."""
    return float(allocation.head_kw().max()) / power_factor


@dataclass
class _Context:
    feeder: FeederModel
    load: np.ndarray
    pv_shape: np.ndarray
    house_node: np.ndarray
    house_ids: list[str]
    config: StochasticConfig
    resolution_s: float
    basis_kva: float
    sizing: dict[str, float] | None
    base: QstsResult | None = None


def _capacities(ctx: _Context, scenario: int) -> np.ndarray:
    cfg = ctx.config
    rng = substream(cfg.rng_seed, Stream.RANDOM_SIZE, scenario)
    return assign_capacities(ctx.house_ids, cfg.strategy, sizing=ctx.sizing,
                             random_dist=cfg.random_dist, fixed_kw=cfg.fixed_kw, rng=rng)


def _qsts(ctx: _Context, nodal_kw: np.ndarray) -> QstsResult:
    pv = nodal_kw[:, None] * ctx.pv_shape[None, :]
    return run_qsts(ctx.feeder, ctx.load, pv, ctx.resolution_s,
                    power_factor=ctx.config.power_factor)


def _record(dep: PvDeployment, res: QstsResult, limit: float) -> StepRecord:
    v, bus, t = res.peak()
    return StepRecord(dep.scenario, dep.step, dep.penetration, dep.total_kw,
                      dep.n_pv_houses, v, bus, t, bool(v > limit))


def _run_scenario(ctx: _Context, scenario: int) -> list[StepRecord]:
    cfg = ctx.config
    order = substream(cfg.rng_seed, Stream.SCENARIO, scenario).permutation(len(ctx.house_ids))
    kw = _capacities(ctx, scenario)
    n_nodes = ctx.load.shape[0]
    records = []
    previous: tuple[bytes, QstsResult] | None = None
    for dep in deployments(order, kw, cfg, scenario, ctx.basis_kva):
        nodal = np.bincount(ctx.house_node, weights=dep.house_kw, minlength=n_nodes)
        key = nodal.tobytes()
        if not nodal.any():
            res = ctx.base
        elif previous is not None and previous[0] == key:
            res = previous[1]
        else:
            try:
                res = _qsts(ctx, nodal)
            except ConvergenceError as exc:
                raise StudyError(f"scenario {scenario}, step {dep.step}: {exc}",
                                 scenario, dep.step, exc.step) from exc
        previous = (key, res)
        records.append(_record(dep, res, cfg.overvoltage_limit_pu))
    return records


def run_study(feeder: FeederModel, allocation: FeederAllocation, pv_shape: np.ndarray,
              config: StochasticConfig, sizing: Mapping[str, float] | None = None,
              workers: int = 1) -> HostingCapacityResult:
    """Run every scenario and penetration step and aggregate the hosting capacity.

    ``pv_shape`` is the per-unit PV output over the simulation window, aligned
    with the allocated load profiles. ``sizing`` maps house id to optimal kW.
    Results do not depend on ``workers``.
    """
    load = allocation.nodal_load_kw()
    pv_shape = np.asarray(pv_shape, dtype=float)
    if pv_shape.shape != (load.shape[1],):
        raise ValueError(f"PV shape has {pv_shape.shape} samples, load window has {load.shape[1]}")
    houses = allocation.houses()
    if not houses:
        raise ValueError("allocation has no houses")
    if config.strategy is Strategy.OPTIMAL and sizing is None:
        raise KeyError("optimal strategy needs sizing results")
    ctx = _Context(
        feeder=feeder, load=load * config.load_scale, pv_shape=pv_shape,
        house_node=np.array([node for _, node, _ in houses]),
        house_ids=[h for h, _, _ in houses], config=config,
        resolution_s=float(allocation.resolution_s),
        basis_kva=feeder_basis_kva(allocation, config.power_factor),
        sizing=None if sizing is None else {h: float(sizing[h]) for h, _, _ in houses
                                            if h in sizing},
    )
    with threadpool_limits(1):
        try:
            ctx.base = _qsts(ctx, np.zeros(load.shape[0]))
        except ConvergenceError as exc:
            raise StudyError(f"step 0: {exc}", None, 0, exc.step) from exc
    chunks = ordered_map(_run_scenario, ctx, range(config.m_scenarios), workers)
    records = [r for chunk in chunks for r in chunk]
    return HostingCapacityResult(config, ctx.resolution_s, ctx.basis_kva, len(houses), records)


# --------------------------------------------------------------------------- #
# artifacts


def write_result_json(results: Iterable[HostingCapacityResult], path: str | Path) -> None:
    doc = [r.to_dict() for r in results]
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def write_penetration_csv(results: Iterable[HostingCapacityResult], path: str | Path) -> None:
    """Max voltage against penetration for every scenario (one row per scenario step)."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["penetration", "total_kw", "max_v_pu", "scenario", "strategy", "resolution_s"])
        for res in results:
            for r in res.records:
                w.writerow([repr(r.penetration), repr(r.total_kw), repr(r.max_v_pu), r.scenario,
                            res.config.strategy.value, int(res.resolution_s)])


def write_distribution_csv(results: Iterable[HostingCapacityResult], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "percentile", "value", "strategy", "resolution_s"])
        for res in results:
            for n in range(res.config.n_steps + 1):
                for name, value in max_voltage_distribution(res, n).items():
                    w.writerow([n, name, repr(value), res.config.strategy.value,
                                int(res.resolution_s)])
