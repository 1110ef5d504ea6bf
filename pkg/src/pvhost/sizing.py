"""Time-of-use billing and cost-benefit PV sizing for a single household.

Bills use no export credit: surplus PV in an interval is simply lost. A
monthly demand charge applies to the highest net (post-PV) interval demand
in each billing month.
"""

from __future__ import annotations

import calendar
import csv
import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .loads import WEEK_S, block_mean

PRECEDENCE = ("peak", "partial-peak", "off-peak")
BILLING_YEAR = 2018


class TariffError(ValueError):
    pass


# --------------------------------------------------------------------------- #
# tariff


@dataclass(frozen=True)
class Period:
    label: str
    hours: tuple[tuple[int, int], ...]
    rate_usd_per_kwh: float

    def covers(self, hour: int) -> bool:
        for start, end in self.hours:
            if start <= end:
                if start <= hour < end:
                    return True
            elif hour >= start or hour < end:
                return True
        return False


@dataclass(frozen=True)
class Season:
    name: str
    months: tuple[int, ...]
    periods: tuple[Period, ...]


@dataclass(frozen=True)
class TariffSchedule:
    name: str
    seasons: tuple[Season, ...]
    demand_charge_usd_per_kw: float

    def rate_table(self) -> np.ndarray:
        """Energy rate by (month - 1, hour); overlapping ranges resolve peak first."""
        table = np.full((12, 24), np.nan)
        for season in self.seasons:
            ranked = sorted(season.periods, key=lambda p: PRECEDENCE.index(p.label))
            for month in season.months:
                if not np.isnan(table[month - 1]).all():
                    raise TariffError(f"month {month} appears in more than one season")
                for hour in range(24):
                    for period in ranked:
                        if period.covers(hour):
                            table[month - 1, hour] = period.rate_usd_per_kwh
                            break
        missing = np.argwhere(np.isnan(table))
        if len(missing):
            m, h = missing[0]
            raise TariffError(f"no TOU period covers month {m + 1}, hour {h}")
        return table

    def rate(self, month: int, hour: int) -> float:
        return float(self.rate_table()[month - 1, hour])

    def scaled(self, factor: float) -> "TariffSchedule":
        """All energy and demand rates multiplied by ``factor``."""
        seasons = tuple(
            Season(s.name, s.months, tuple(
                Period(p.label, p.hours, p.rate_usd_per_kwh * factor) for p in s.periods))
            for s in self.seasons)
        return TariffSchedule(self.name, seasons, self.demand_charge_usd_per_kw * factor)


def tariff_from_dict(doc: dict) -> TariffSchedule:
    try:
        seasons = []
        for s in doc["seasons"]:
            periods = []
            for p in s["periods"]:
                if p["label"] not in PRECEDENCE:
                    raise TariffError(f"unknown period label {p['label']!r}")
                if p["rate"] <= 0:
                    raise TariffError(f"rate for {s['name']}/{p['label']} must be positive")
                hours = tuple((int(a), int(b)) for a, b in p["hours"])
                periods.append(Period(p["label"], hours, float(p["rate"])))
            seasons.append(Season(s["name"], tuple(int(m) for m in s["months"]), tuple(periods)))
        tariff = TariffSchedule(doc["name"], tuple(seasons), float(doc["demand_charge_usd_per_kw"]))
    except (KeyError, TypeError) as exc:
        raise TariffError(f"malformed tariff document: {exc}") from None
    tariff.rate_table()
    return tariff


def load_tariff(path: str | Path) -> TariffSchedule:
    return tariff_from_dict(json.loads(Path(path).read_text()))


def duke_tou_2018() -> TariffSchedule:
    ref = resources.files("pvhost") / "data" / "duke_tou_2018.json"
    return tariff_from_dict(json.loads(ref.read_text()))


# --------------------------------------------------------------------------- #
# cost model


def capital_recovery_factor(i: float, y: int) -> float:
    """Annuity factor turning a capital cost into an equal annual payment."""
    if i < 0:
        raise ValueError("discount rate must be non-negative")
    if y < 1:
        raise ValueError("lifetime must be at least one year")
    if i == 0:
        return 1.0 / y
    g = (1.0 + i) ** y
    return i * g / (g - 1.0)


@dataclass(frozen=True)
class PvCostModel:
    a_pv: float = 1000.0
    lifetime_y: int = 20
    discount_rate: float = 0.08

    @property
    def k_pv(self) -> float:
        return capital_recovery_factor(self.discount_rate, self.lifetime_y)


def levelized_cost(model: PvCostModel, p_pv_kw):
    """Levelized annual cost of ``p_pv_kw`` of installed PV (USD/yr)."""
    p = np.asarray(p_pv_kw, dtype=float)
    if np.any(p < 0):
        raise ValueError("PV capacity must be non-negative")
    c = model.k_pv * model.a_pv * p
    return float(c) if c.ndim == 0 else c


# --------------------------------------------------------------------------- #
# PV production shape


def day_length_h(day_of_year: int, latitude_deg: float) -> float:
    decl = math.radians(23.44) * math.sin(2.0 * math.pi * (284 + day_of_year) / 365.0)
    x = -math.tan(math.radians(latitude_deg)) * math.tan(decl)
    return 2.0 * math.degrees(math.acos(max(-1.0, min(1.0, x)))) / 15.0


@dataclass(frozen=True)
class ClearSky:
    """sin^2 daylight bump centred on solar noon (clock hours)."""

    latitude_deg: float = 35.8
    solar_noon_h: float = 13.0
    peak_pu: float = 0.8

    def day(self, month: int, resolution_s: int = 60) -> np.ndarray:
        doy = (np.cumsum([0] + [calendar.monthrange(BILLING_YEAR, m)[1] for m in range(1, 12)])
               [month - 1] + 15)
        length = day_length_h(int(doy), self.latitude_deg)
        hours = (np.arange(1440) + 0.5) / 60.0
        rise = self.solar_noon_h - length / 2.0
        phase = (hours - rise) / length
        shape = np.where((phase > 0) & (phase < 1), self.peak_pu * np.sin(np.pi * phase) ** 2, 0.0)
        return block_mean(shape, resolution_s // 60) if resolution_s != 60 else shape

    def week(self, month: int, resolution_s: int = 60) -> np.ndarray:
        return np.tile(self.day(month, resolution_s), 7)


def load_shape_csv(path: str | Path) -> np.ndarray:
    """``t,pu_output`` rows -> per-unit output array (ordered by t)."""
    rows = []
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) != {"t", "pu_output"}:
            raise ValueError(f"{path}: header must be 't,pu_output'")
        for lineno, row in enumerate(reader, start=2):
            v = float(row["pu_output"])
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{path}: row {lineno} output {v} outside [0, 1]")
            rows.append((float(row["t"]), v))
    rows.sort()
    return np.array([v for _, v in rows])


# --------------------------------------------------------------------------- #
# billing


@dataclass(frozen=True)
class BillingCalendar:
    """Interval metadata: month (1-12), hour of day, duration and multiplicity."""

    month: np.ndarray
    hour: np.ndarray
    dt_h: float
    weight: np.ndarray

    def __len__(self) -> int:
        return len(self.month)

    @classmethod
    def single(cls, month: int, hour: int, dt_h: float = 1.0) -> "BillingCalendar":
        return cls(np.array([month]), np.array([hour]), dt_h, np.ones(1))

    @classmethod
    def for_year(cls, resolution_s: int, year: int = BILLING_YEAR) -> "BillingCalendar":
        days = 366 if calendar.isleap(year) else 365
        n = days * 86400 // resolution_s
        t = np.arange(n) * resolution_s
        day = t // 86400
        month_of_day = np.concatenate([
            np.full(calendar.monthrange(year, m)[1], m) for m in range(1, 13)])
        return cls(month_of_day[day], (t % 86400) // 3600, resolution_s / 3600.0, np.ones(n))

    @classmethod
    def representative(cls, resolution_s: int, year: int = BILLING_YEAR) -> "BillingCalendar":
        """Twelve representative weeks, each weighted to its month's day count."""
        per_week = WEEK_S // resolution_s
        t = np.arange(per_week) * resolution_s
        hour = (t % 86400) // 3600
        months = np.repeat(np.arange(1, 13), per_week)
        weight = np.repeat([calendar.monthrange(year, m)[1] / 7.0 for m in range(1, 13)], per_week)
        return cls(months, np.tile(hour, 12), resolution_s / 3600.0, weight)


DEFAULT_MONTH_FACTORS = (0.85, 0.8, 0.7, 0.65, 0.75, 0.95, 1.0, 1.0, 0.85, 0.7, 0.75, 0.85)


def representative_year(week_kw: np.ndarray, resolution_s: int, shape: ClearSky = ClearSky(),
                         month_factors: Sequence[float] = DEFAULT_MONTH_FACTORS):
    """Tile one weekly profile into twelve seasonally scaled weeks.

    Returns ``(load, pv_shape, calendar)`` aligned interval by interval.
    """
    week_kw = np.asarray(week_kw, dtype=float)
    if len(month_factors) != 12:
        raise ValueError("need twelve monthly scaling factors")
    load = np.concatenate([f * week_kw for f in month_factors])
    pv = np.concatenate([shape.week(m, resolution_s) for m in range(1, 13)])
    return load, pv, BillingCalendar.representative(resolution_s)


@dataclass(frozen=True)
class Bill:
    energy_usd: float
    demand_usd: float

    @property
    def total_usd(self) -> float:
        return self.energy_usd + self.demand_usd


def _check_aligned(load, shape, cal: BillingCalendar):
    if not (len(load) == len(shape) == len(cal)):
        raise ValueError(f"misaligned series: load {len(load)}, shape {len(shape)}, "
                         f"calendar {len(cal)}")


def _bills(load: np.ndarray, sizes: np.ndarray, shape: np.ndarray, tariff: TariffSchedule,
           cal: BillingCalendar) -> tuple[np.ndarray, np.ndarray]:
    """Energy and demand charges for each candidate size (vectorised)."""
    rates = tariff.rate_table()[cal.month - 1, cal.hour]
    net = np.maximum(0.0, load[None, :] - sizes[:, None] * shape[None, :])
    energy = net @ (rates * cal.weight) * cal.dt_h
    demand = np.zeros(len(sizes))
    for m in np.unique(cal.month):
        demand += net[:, cal.month == m].max(axis=1)
    return energy, demand * tariff.demand_charge_usd_per_kw


def annual_bill(load: np.ndarray, pv_kw: float, shape: np.ndarray, tariff: TariffSchedule,
                cal: BillingCalendar) -> Bill:
    load = np.asarray(load, dtype=float)
    shape = np.asarray(shape, dtype=float)
    _check_aligned(load, shape, cal)
    energy, demand = _bills(load, np.array([float(pv_kw)]), shape, tariff, cal)
    return Bill(float(energy[0]), float(demand[0]))


@dataclass(frozen=True)
class SizingGrid:
    min_kw: float = 0.0
    max_kw: float = 20.0
    step_kw: float = 0.5

    def candidates(self) -> np.ndarray:
        if self.step_kw <= 0:
            raise ValueError("grid step must be positive")
        if self.max_kw < self.min_kw:
            raise ValueError("empty sizing grid")
        n = int(math.floor((self.max_kw - self.min_kw) / self.step_kw + 1e-9)) + 1
        grid = self.min_kw + self.step_kw * np.arange(n)
        return np.union1d([0.0], grid)


@dataclass
class SizingResult:
    optimal_kw: float
    kw: np.ndarray
    annual_bill_usd: np.ndarray
    savings_usd: np.ndarray
    levelized_cost_usd: np.ndarray
    net_benefit_usd: np.ndarray

    def curve(self) -> list[dict]:
        return [
            {"kw": float(k), "annual_bill_usd": float(b), "savings_usd": float(s),
             "levelized_cost_usd": float(c), "net_benefit_usd": float(n)}
            for k, b, s, c, n in zip(self.kw, self.annual_bill_usd, self.savings_usd,
                                     self.levelized_cost_usd, self.net_benefit_usd)
        ]


def optimal_size(load: np.ndarray, shape: np.ndarray, tariff: TariffSchedule,
                 model: PvCostModel = PvCostModel(), grid: SizingGrid = SizingGrid(),
                 cal: BillingCalendar | None = None) -> SizingResult:
    """Exhaustive search for the PV size with the greatest annual net benefit.

    ``cal`` defaults to the twelve-representative-week calendar matching the
    load length. Ties resolve to the smaller size.
    """
    load = np.asarray(load, dtype=float)
    shape = np.asarray(shape, dtype=float)
    if cal is None:
        per_week = len(load) // 12
        cal = BillingCalendar.representative(WEEK_S // per_week)
    _check_aligned(load, shape, cal)
    sizes = grid.candidates()
    energy, demand = _bills(load, sizes, shape, tariff, cal)
    bills = energy + demand
    base = bills[sizes == 0.0][0]
    savings = base - bills
    cost = levelized_cost(model, sizes)
    benefit = savings - cost
    best = int(np.argmax(benefit))
    return SizingResult(float(sizes[best]), sizes, bills, savings, cost, benefit)


def size_house(week_kw: np.ndarray, resolution_s: int, tariff: TariffSchedule,
               model: PvCostModel = PvCostModel(), grid: SizingGrid = SizingGrid(),
               shape: ClearSky = ClearSky(),
               month_factors: Sequence[float] = DEFAULT_MONTH_FACTORS) -> SizingResult:
    """Optimal size for a household known only through one weekly profile."""
    load, pv, cal = representative_year(week_kw, resolution_s, shape, month_factors)
    return optimal_size(load, pv, tariff, model, grid, cal)
