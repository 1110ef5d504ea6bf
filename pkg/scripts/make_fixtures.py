"""Regenerate the bundled feeder fixtures in src/pvhost/data/.

Both feeders are synthetic but deterministic:

* ieee123.json: 4.16 kV, 123 buses below the substation, a three-phase trunk
  with single-phase laterals, a substation regulator and one mid-feeder
  regulator, 91 residential load nodes.
* synthetic48.json: 24 kV, long three-phase backbone with two-phase and
  single-phase taps, 48 load nodes.

Usage: python scripts/make_fixtures.py
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

DATA = Path(__file__).resolve().parents[1] / "src" / "pvhost" / "data"

# ohm per mile, per phase (overhead 336 ACSR trunk / 1/0 ACSR laterals)
TRUNK_Z = (0.4576, 1.0780)
LATERAL_Z = (1.3292, 1.3475)
# lateral length multiplier; puts the fixture's hosting limit inside the 0-100% sweep
LATERAL_SCALE = 2.0


def _branch(bid, a, b, phases, z, miles):
    return {"id": bid, "from": a, "to": b, "phases": phases,
            "r_ohm": round(z[0] * miles, 5), "x_ohm": round(z[1] * miles, 5)}


def ieee123(seed: int = 123, lateral_scale: float = LATERAL_SCALE) -> dict:
    rng = np.random.default_rng(seed)
    kv = 4.16
    buses = [{"id": "150", "phases": "ABC", "kv_ll": kv, "source": True},
             {"id": "149", "phases": "ABC", "kv_ll": kv}]
    branches = [{"id": "reg1", "from": "150", "to": "149", "phases": "ABC",
                 "r_ohm": 0.001, "x_ohm": 0.002}]
    phases_of = {"150": "ABC", "149": "ABC"}
    next_id = iter(range(1, 200))

    def add(parent, phases, z, miles, bid=None):
        name = str(next(next_id))
        buses.append({"id": name, "phases": phases, "kv_ll": kv})
        branches.append(_branch(bid or f"L{parent}-{name}", parent, name, phases, z, miles))
        phases_of[name] = phases
        return name

    # main trunk (22 buses) with a mid-feeder regulator after trunk bus 9
    trunk = ["149"]
    for k in range(22):
        bid = "reg2" if k == 10 else None
        miles = 0.01 if k == 10 else rng.uniform(0.04, 0.11)
        trunk.append(add(trunk[-1], "ABC", TRUNK_Z, miles, bid))
    # two three-phase sub-trunks
    subs = []
    for root, n in ((trunk[5], 5), (trunk[15], 4)):
        chain = [root]
        for _ in range(n):
            chain.append(add(chain[-1], "ABC", TRUNK_Z, rng.uniform(0.04, 0.1)))
        subs.extend(chain[1:])
    three_phase = trunk[1:] + subs

    # single-phase laterals until the feeder has 123 buses below the source
    lateral_buses = []
    n_laterals = 0
    while len(buses) - 1 < 123:
        root = three_phase[int(rng.integers(0, len(three_phase)))]
        ph = "ABC"[n_laterals % 3]  # rotate phases to keep the feeder roughly balanced
        n_laterals += 1
        length = min(int(rng.integers(2, 5)), 123 - (len(buses) - 1))
        parent = root
        for _ in range(length):
            parent = add(parent, ph, LATERAL_Z, rng.uniform(0.08, 0.24) * lateral_scale)
            lateral_buses.append(parent)

    # 91 load nodes: every lateral bus first, the rest on the trunk
    candidates = list(lateral_buses)
    rng.shuffle(candidates)
    chosen = candidates[:91]
    if len(chosen) < 91:
        extra = [b for b in three_phase if b != "reg2"]
        rng.shuffle(extra)
        chosen += extra[:91 - len(chosen)]
    loads = []
    for b in sorted(chosen, key=int):
        ph = phases_of[b]
        if ph == "ABC" and rng.random() < 0.6:
            ph = "ABC"[int(rng.integers(0, 3))]
        peak = float(rng.uniform(12.0, 50.0)) * (2.2 if ph == "ABC" else 1.0)
        loads.append({"bus": b, "phase": ph, "peak_kw": round(peak, 1)})

    regulators = [
        {"branch": "reg1", "setpoint_pu": 1.035, "bandwidth_pu": 0.0167,
         "tap_step_pu": 0.00625, "delay_s": 30.0, "tap": 5},
        {"branch": "reg2", "setpoint_pu": 1.03, "bandwidth_pu": 0.0167,
         "tap_step_pu": 0.00625, "delay_s": 45.0},
    ]
    return {"name": "ieee123-style", "base_kva": 5000.0, "buses": buses,
            "branches": branches, "regulators": regulators, "load_nodes": loads}


def synthetic48(seed: int = 48) -> dict:
    rng = np.random.default_rng(seed)
    kv = 24.0
    z3 = (0.306, 0.627)
    z2 = (0.592, 0.789)
    z1 = (0.592, 0.789)
    buses = [{"id": "sub", "phases": "ABC", "kv_ll": kv, "source": True}]
    branches = []
    count = iter(range(1, 500))
    phases_of = {"sub": "ABC"}

    def add(parent, phases, z, miles):
        name = f"n{next(count)}"
        buses.append({"id": name, "phases": phases, "kv_ll": kv})
        branches.append(_branch(f"{parent}-{name}", parent, name, phases, z, miles))
        phases_of[name] = phases
        return name

    backbone = ["sub"]
    for _ in range(16):
        backbone.append(add(backbone[-1], "ABC", z3, rng.uniform(0.4, 1.0)))
    taps = []
    while len(taps) + len(backbone) - 1 < 60:
        root = backbone[int(rng.integers(2, len(backbone)))]
        ph = ["AB", "BC", "CA", "A", "B", "C"][int(rng.integers(0, 6))]
        ph = "".join(p for p in "ABC" if p in ph)
        parent = root
        for _ in range(int(rng.integers(1, 4))):
            parent = add(parent, ph, z2 if len(ph) == 2 else z1, rng.uniform(0.2, 0.7))
            taps.append(parent)
    pool = taps + backbone[1:]
    rng.shuffle(pool)
    loads = []
    for b in sorted(pool[:48], key=lambda s: int(s[1:])):
        ph = phases_of[b]
        if len(ph) == 2:
            ph = ph[int(rng.integers(0, 2))]
        peak = float(rng.uniform(60.0, 180.0)) * (1.6 if ph == "ABC" else 1.0)
        loads.append({"bus": b, "phase": ph, "peak_kw": round(peak, 1)})
    regulators = [{"branch": branches[0]["id"], "setpoint_pu": 1.0, "bandwidth_pu": 0.0167,
                   "tap_step_pu": 0.00625, "delay_s": 30.0}]
    return {"name": "synthetic48", "base_kva": 10000.0, "buses": buses,
            "branches": branches, "regulators": regulators, "load_nodes": loads}


def main() -> None:
    DATA.mkdir(parents=True, exist_ok=True)
    for name, doc in (("ieee123", ieee123()), ("synthetic48", synthetic48())):
        (DATA / f"{name}.json").write_text(json.dumps(doc, indent=1) + "\n")
        print(f"{name}: {len(doc['buses'])} buses, {len(doc['load_nodes'])} load nodes, "
              f"{sum(l['peak_kw'] for l in doc['load_nodes']):.0f} kW of nodal peaks")


if __name__ == "__main__":
    main()
