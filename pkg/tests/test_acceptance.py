"""Acceptance suite: one test per criterion, each at its stated tolerance.

A summary line per criterion is printed at the end of the pytest run.
"""

import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from oracles import net_benefit_oracle, newton_oracle, random_radial_feeder, tou_rate_reference
from pvhost.cli import EXIT_OK, main
from pvhost.feeder import feeder_from_dict
from pvhost.hosting import StochasticConfig
from pvhost.loads import (AllocationConfig, AllocationError, allocate_feeder,
                          allocate_node, resample)
from pvhost.powerflow import Injection, solve_snapshot
from pvhost.sizing import (DEFAULT_MONTH_FACTORS, BillingCalendar, ClearSky, PvCostModel,
                           annual_bill, capital_recovery_factor, duke_tou_2018, levelized_cost,
                           representative_year, size_house)
from pvhost.zonal import partition, resolution_comparison, zonal_study

TINY = Path(__file__).parent / "data" / "tiny_study.json"
CORES = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count()
WORKERS = max(1, min(4, CORES or 1))


# --------------------------------------------------------------------------- #
# 1. sweep vs Newton


def test_c01_sweep_matches_newton(verdict):
    sizes = np.linspace(2, 130, 24).round().astype(int)
    worst, t0 = 0.0, time.perf_counter()
    for k, n in enumerate(sizes):
        f = feeder_from_dict(random_radial_feeder(np.random.default_rng(1000 + k), int(n)))
        tan = math.tan(math.acos(0.95))
        inj = [Injection(ln.bus_id, ln.phase, ln.peak_kw, ln.peak_kw * tan) for ln in f.load_nodes]
        sol = solve_snapshot(f, inj)
        kva = {}
        for i in inj:
            phases = "ABC" if i.phase == "ABC" else i.phase
            for p in phases:
                kva[(i.bus_id, p)] = kva.get((i.bus_id, p), 0j) + complex(i.p_kw, i.q_kvar) / len(phases)
        ref = newton_oracle(f, kva)
        worst = max(worst, max(abs(sol.voltage(b, p) - v) for (b, p), v in ref.items()))
    elapsed = time.perf_counter() - t0
    verdict(1, worst < 1e-6 and elapsed < 10.0,
            f"{len(sizes)} networks ({sizes.min()}-{sizes.max()} buses), max gap {worst:.2e} pu, "
            f"{elapsed:.1f} s")


# --------------------------------------------------------------------------- #
# 2. allocation band contract


def test_c02_allocation_band(verdict, pool7):
    rng = np.random.default_rng(2024)
    cfg = AllocationConfig(max_attempts=200)
    inside = infeasible = outside = 0
    for _ in range(1000):
        peak = float(np.exp(rng.uniform(math.log(0.5), math.log(500.0))))
        try:
            node = allocate_node(pool7, peak, cfg, np.random.default_rng(rng.integers(2 ** 63)))
        except AllocationError:
            infeasible += 1
            continue
        if 0.97 * peak < node.aggregate_peak_kw <= 1.03 * peak:
            inside += 1
        else:
            outside += 1
    verdict(2, outside == 0 and inside + infeasible == 1000,
            f"{inside} in band, {infeasible} explicit infeasible, {outside} out of band")


# --------------------------------------------------------------------------- #
# 3. cost closed form


def test_c03_cost_closed_form(verdict):
    crf = capital_recovery_factor(0.08, 20)
    cost = levelized_cost(PvCostModel(), 10.0)
    verdict(3, abs(crf - 0.101852) <= 1e-6 and abs(cost - 1018.52) <= 0.01,
            f"CRF {crf:.7f}, 10 kW cost ${cost:.4f}")


# --------------------------------------------------------------------------- #
# 4. tariff fidelity


def test_c04_tariff_fidelity(verdict):
    tariff = duke_tou_2018()
    mismatches = []
    for month in range(1, 13):
        for hour in range(24):
            cal = BillingCalendar.single(month, hour)
            bill = annual_bill(np.array([1.0]), 0.0, np.array([0.0]), tariff, cal)
            if bill.energy_usd != tou_rate_reference(month, hour):
                mismatches.append((month, hour, bill.energy_usd))
    peak = annual_bill(np.array([1.0]), 0.0, np.array([0.0]), tariff,
                       BillingCalendar.single(7, 15)).energy_usd
    surplus = annual_bill(np.array([1.0]), 4.0, np.array([1.0]), tariff,
                          BillingCalendar.single(7, 15))
    ok = not mismatches and peak == 0.23507 and surplus.total_usd == 0.0
    verdict(4, ok, f"288 month-hours, {len(mismatches)} mismatches; summer peak ${peak}; "
                   f"surplus interval ${surplus.total_usd:.2f}")


# --------------------------------------------------------------------------- #
# 5. sizing oracle


def test_c05_sizing_oracle(verdict, alloc123, pool42):
    profiles = sorted({p for _, _, p in alloc123.houses()})[:50]
    tariff = duke_tou_2018()
    argmax_bad, worst = 0, 0.0
    for pid in profiles:
        week = pool42.profile(pid).kw
        res = size_house(week, 60, tariff)
        load, shape, _ = representative_year(week, 60)
        ref = net_benefit_oracle(load, shape, 60, res.kw)
        worst = max(worst, float(np.max(np.abs(res.net_benefit_usd - ref))))
        argmax_bad += res.optimal_kw != res.kw[int(np.argmax(ref))]
    verdict(5, argmax_bad == 0 and worst <= 0.01,
            f"{len(profiles)} households at 60 s, {argmax_bad} argmax mismatches, "
            f"max net-benefit gap ${worst:.2e}")


# --------------------------------------------------------------------------- #
# 6, 8, 9: the fixture study (seed 42, M=20, 1-min data, 30-min comparison)


@pytest.fixture(scope="module")
def fixture_study(ieee123, pool42, alloc123):
    t0 = time.perf_counter()
    tariff = duke_tou_2018()
    sized = {p: size_house(pool42.profile(p).kw, 60, tariff).optimal_kw
             for p in sorted({p for _, _, p in alloc123.houses()})}
    sizing = {h: sized[p] for h, _, p in alloc123.houses()}
    zones = partition(ieee123, 10)
    cfg = StochasticConfig(m_scenarios=20, rng_seed=42, load_scale=DEFAULT_MONTH_FACTORS[3])
    comparison = resolution_comparison(ieee123, pool42, alloc123, zones,
                                       ["optimal", "random", "fixed"], ClearSky().week(4, 60),
                                       cfg, resolutions=(60, 1800), sizing=sizing,
                                       workers=WORKERS)
    return comparison, zones, time.perf_counter() - t0


def test_c06_hosting_capacity_ordering(verdict, fixture_study):
    comparison, _, elapsed = fixture_study
    hc = {s: comparison.hosting[(s, 60)].min_hosting_capacity_kw
          for s in ("optimal", "random", "fixed")}
    status = {s: comparison.hosting[(s, 60)].status for s in hc}
    # the criterion's budget is for 4 cores; scale the measured time to that machine
    on_four = elapsed * WORKERS / 4
    ok = hc["optimal"] >= hc["random"] and hc["optimal"] >= hc["fixed"] and on_four < 900
    verdict(6, ok, "min HC at 60 s: " + ", ".join(f"{s} {hc[s]:.0f} kW ({status[s]})" for s in hc)
            + f"; study {elapsed:.0f} s on {WORKERS} core(s), {on_four:.0f} s scaled to 4")


def test_c08_zonal_strategy_ordering(verdict, fixture_study):
    comparison, zones, _ = fixture_study
    z = comparison.zonal
    wins = sum(z.delta(k.id, "optimal", 60) <= z.delta(k.id, "fixed", 60) for k in zones)
    verdict(8, wins >= 8, f"delta_v(optimal) <= delta_v(fixed 10 kW) in {wins}/10 zones at 60 s")


def test_c09_resampling_and_table(verdict, pool42, fixture_study):
    worst_energy, max_rises = 0.0, 0
    for target in (120, 300, 900, 1800, 3600):
        for hid in pool42.house_ids:
            src = pool42.profile(hid)
            out = resample(src, target)
            worst_energy = max(worst_energy, abs(out.energy_kwh - src.energy_kwh) / src.energy_kwh)
            max_rises += out.peak_kw > src.peak_kw
    comparison, _, _ = fixture_study
    rows = comparison.table()
    cells = [row[f"min_hc_kw_{r}s"] for row in rows for r in (60, 1800)]
    populated = len(rows) == 3 and len(cells) == 6 and all(
        isinstance(c, float) and c > 0 for c in cells)
    verdict(9, worst_energy <= 1e-9 and max_rises == 0 and populated,
            f"{len(pool42)} profiles x 5 targets: energy rel err {worst_energy:.1e}, "
            f"{max_rises} peak increases; table {len(rows)}x2 with {len(cells)} values")


# --------------------------------------------------------------------------- #
# 7. ladder distance ordering


def test_c07_ladder_distance_ordering(verdict, ladder, pool7):
    alloc = allocate_feeder(ladder, pool7, AllocationConfig(rng_seed=7))
    zones = partition(ladder, 3)
    res = zonal_study(ladder, alloc, zones, "fixed", ClearSky().week(4, 60), fixed_kw=10.0)
    deltas = [res.delta(z.id, "fixed", 60) for z in zones]
    dist = [z.centroid_distance_ohm for z in zones]
    ok = not ladder.regulators and dist == sorted(dist) and deltas[0] < deltas[1] < deltas[2]
    verdict(7, ok, "delta_v by zone (near to far): " + ", ".join(f"{d:.5f}" for d in deltas))


# --------------------------------------------------------------------------- #
# 10. determinism under parallelism


def test_c10_worker_and_rerun_determinism(verdict, tmp_path):
    base = tmp_path / "base"
    assert main(["allocate", "--config", str(TINY), "--out", str(base)]) == EXIT_OK
    assert main(["size", "--config", str(TINY), "--out", str(base)]) == EXIT_OK
    blobs = {}
    for tag, workers in (("w1", 1), ("w4", 4), ("w8", 8), ("w1-again", 1)):
        out = tmp_path / tag
        out.mkdir()
        for name in ("allocation.json", "sizing.json"):
            (out / name).write_bytes((base / name).read_bytes())
        for cmd in ("hosting", "zonal"):
            assert main([cmd, "--config", str(TINY), "--out", str(out),
                         "--workers", str(workers)]) == EXIT_OK
        blobs[tag] = tuple((out / n).read_bytes() for n in ("hosting.json", "zonal.json"))
    same = len(set(blobs.values())) == 1
    n_records = len(json.loads(blobs["w1"][0]))
    verdict(10, same, f"hosting.json and zonal.json identical across workers 1/4/8 and a rerun "
                      f"({n_records} hosting results)" if same else "outputs differ")
