from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pvhost.feeder import feeder_from_dict, load_builtin  # noqa: E402
from pvhost.loads import generate_synthetic_pool  # noqa: E402

DATA = Path(__file__).parent / "data"


def chain_doc(n: int, r: float = 0.3, x: float = 0.4, *, peak_kw: float = 30.0,
              phase: str = "ABC", loaded=None, kv: float = 4.16, base_kva: float = 1000.0,
              regulator: bool = False) -> dict:
    """Source followed by ``n`` identical series sections; one load per loaded bus."""
    buses = [{"id": "s", "phases": "ABC", "kv_ll": kv, "source": True}]
    branches, loads = [], []
    prev = "s"
    for k in range(1, n + 1):
        bid = f"b{k}"
        buses.append({"id": bid, "phases": "ABC", "kv_ll": kv})
        branches.append({"id": f"l{k}", "from": prev, "to": bid, "phases": "ABC",
                         "r_ohm": r, "x_ohm": x})
        if loaded is None or k in loaded:
            loads.append({"bus": bid, "phase": phase, "peak_kw": peak_kw})
        prev = bid
    regs = []
    if regulator:
        regs.append({"branch": "l1", "setpoint_pu": 1.0, "bandwidth_pu": 0.0167,
                     "tap_step_pu": 0.00625, "delay_s": 30.0})
    return {"name": f"chain{n}", "base_kva": base_kva, "buses": buses, "branches": branches,
            "regulators": regs, "load_nodes": loads}


def two_bus_doc(r: float = 1.0, x: float = 1.0, peak_kw: float = 10.0) -> dict:
    return chain_doc(1, r, x, peak_kw=peak_kw)


@pytest.fixture(scope="session")
def ieee123():
    return load_builtin("ieee123")


@pytest.fixture(scope="session")
def synthetic48():
    return load_builtin("synthetic48")


@pytest.fixture(scope="session")
def tiny_path() -> Path:
    return DATA / "tiny_feeder.json"


@pytest.fixture(scope="session")
def ladder():
    """Regulator-free uniform ladder: nine identical sections, one equal load on each."""
    return feeder_from_dict(chain_doc(9, 0.15, 0.25, peak_kw=40.0))


@pytest.fixture(scope="session")
def pool7():
    return generate_synthetic_pool(200, 7)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def pool42():
    return generate_synthetic_pool(700, 42)


@pytest.fixture(scope="session")
def alloc123(ieee123, pool42):
    from pvhost.loads import AllocationConfig, allocate_feeder
    return allocate_feeder(ieee123, pool42, AllocationConfig(rng_seed=42))


class Setup:
    """Small end-to-end study inputs at 30-minute resolution."""

    def __init__(self, feeder, pool, resolution_s=1800, seed=5):
        from pvhost.loads import AllocationConfig, allocate_feeder
        from pvhost.sizing import ClearSky, duke_tou_2018, size_house

        self.feeder = feeder
        self.pool = pool.resampled(resolution_s) if pool.resolution_s != resolution_s else pool
        self.alloc = allocate_feeder(feeder, self.pool, AllocationConfig(rng_seed=seed))
        tariff = duke_tou_2018()
        sized = {p: size_house(self.pool.profile(p).kw, resolution_s, tariff).optimal_kw
                 for p in {p for _, _, p in self.alloc.houses()}}
        self.sizing = {h: sized[p] for h, _, p in self.alloc.houses()}
        self.shape = ClearSky().week(4, resolution_s)


@pytest.fixture(scope="session")
def tiny(tiny_path, pool7):
    from pvhost.feeder import parse_feeder
    return Setup(parse_feeder(tiny_path), pool7)


# --------------------------------------------------------------------------- #
# acceptance verdicts, printed together at the end of the run

_VERDICTS: dict[int, tuple[bool, str]] = {}
_CRITERIA = 10


@pytest.fixture
def verdict():
    """Record one acceptance criterion's outcome, then assert it."""
    def record(number: int, ok: bool, detail: str) -> None:
        _VERDICTS[number] = (bool(ok), detail)
        assert ok, f"criterion {number}: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, _CRITERIA + 1):
        ok, detail = _VERDICTS.get(n, (False, "not run or did not finish"))
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
