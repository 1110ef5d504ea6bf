import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import chain_doc
from oracles import newton_oracle, random_radial_feeder, sequential_qsts, two_bus_voltage
from pvhost.feeder import FeederError, Regulator, feeder_from_dict
from pvhost.powerflow import (ConvergenceError, Injection, apply_regulator_logic,
                              reactive_from_pf, run_qsts, solve_snapshot)


def peak_injections(feeder, scale=1.0, pf=0.95):
    tan = math.tan(math.acos(pf))
    return [Injection(ln.bus_id, ln.phase, ln.peak_kw * scale, ln.peak_kw * scale * tan)
            for ln in feeder.load_nodes]


def per_phase_kva(injections):
    out = {}
    for inj in injections:
        phases = "ABC" if inj.phase == "ABC" else inj.phase
        for p in phases:
            key = (inj.bus_id, p)
            out[key] = out.get(key, 0j) + complex(inj.p_kw, inj.q_kvar) / len(phases)
    return out


def max_oracle_gap(feeder, injections, taps=None):
    sol = solve_snapshot(feeder, injections, taps)
    assert sol.converged
    tap_map = None
    if taps is not None:
        tap_map = {r.branch_id: t for r, t in zip(feeder.regulators, taps)}
    ref = newton_oracle(feeder, per_phase_kva(injections), tap_map)
    return max(abs(sol.voltage(b, p) - v) for (b, p), v in ref.items())


# --------------------------------------------------------------------------- #
# snapshots


def test_zero_injection_is_flat():
    f = feeder_from_dict(chain_doc(5))
    sol = solve_snapshot(f, [])
    assert sol.converged and sol.iterations <= 2
    np.testing.assert_allclose(sol.v_pu, 1.0, atol=1e-12)
    assert all(abs(c) == 0 for c in sol.branch_current_pu.values())


def test_source_voltage_is_configurable():
    f = feeder_from_dict(chain_doc(3))
    sol = solve_snapshot(f, [], v_source_pu=1.03)
    np.testing.assert_allclose(sol.v_pu, 1.03, atol=1e-12)


def test_two_bus_closed_form():
    kv, base = 4.16, 1000.0
    zbase = kv * kv * 1000.0 / base
    z_pu = complex(0.02, 0.04)
    doc = chain_doc(1, z_pu.real * zbase, z_pu.imag * zbase, kv=kv, base_kva=base, phase="A")
    f = feeder_from_dict(doc)
    s_pu = complex(0.5, 0.1)
    s_phase = base / 3.0
    sol = solve_snapshot(f, [Injection("b1", "A", s_pu.real * s_phase, s_pu.imag * s_phase)])
    expected = two_bus_voltage(1.0, z_pu, s_pu)
    assert abs(sol.voltage("b1", "A")) == pytest.approx(expected, abs=1e-6)


def test_fixture_snapshot_matches_newton(ieee123):
    assert max_oracle_gap(ieee123, peak_injections(ieee123)) < 1e-6


def test_fixture_snapshot_with_taps_matches_newton(ieee123):
    assert max_oracle_gap(ieee123, peak_injections(ieee123, 0.7), (3, -2)) < 1e-6


def test_taps_by_mapping_and_default(ieee123):
    inj = peak_injections(ieee123, 0.5)
    by_seq = solve_snapshot(ieee123, inj, [r.current_tap for r in ieee123.regulators])
    by_default = solve_snapshot(ieee123, inj)
    by_map = solve_snapshot(ieee123, inj, {})
    np.testing.assert_array_equal(by_seq.v, by_default.v)
    np.testing.assert_array_equal(by_seq.v, by_map.v)
    with pytest.raises(ValueError):
        solve_snapshot(ieee123, inj, [0])


def test_non_convergence_is_flagged():
    f = feeder_from_dict(chain_doc(4, 3.0, 4.0))
    sol = solve_snapshot(f, peak_injections(f, 3.0), max_iter=2)
    assert not sol.converged


def test_unknown_injection_bus():
    f = feeder_from_dict(chain_doc(2))
    with pytest.raises(FeederError, match="zz"):
        solve_snapshot(f, [Injection("zz", "A", 1.0)])


def test_branch_currents_in_amperes():
    f = feeder_from_dict(chain_doc(1, phase="A", peak_kw=10.0))
    sol = solve_snapshot(f, [Injection("b1", "A", 100.0)])
    # ~100 kW at 2.4 kV line-to-neutral
    amps = sol.branch_current_a[("l1", "A")]
    assert amps == pytest.approx(100.0 / (4.16 / math.sqrt(3)), rel=0.02)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(2, 80), st.floats(0.2, 1.5))
def test_sweep_matches_newton_on_random_networks(seed, n, scale):
    f = feeder_from_dict(random_radial_feeder(np.random.default_rng(seed), n))
    assert max_oracle_gap(f, peak_injections(f, scale)) < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(2, 60))
def test_power_balance_at_every_bus(seed, n):
    f = feeder_from_dict(random_radial_feeder(np.random.default_rng(seed), n))
    inj = peak_injections(f)
    sol = solve_snapshot(f, inj)
    s_base = f.base_kva / 3.0
    load = {k: v / s_base for k, v in per_phase_kva(inj).items()}
    feeding = {(br.to_bus, p): br.id for br in f.branches for p in br.phases}
    children = {}
    for br in f.branches:
        for p in br.phases:
            children.setdefault((br.from_bus, p), []).append(br.id)
    for (bus, p), bid in feeding.items():
        v = sol.voltage(bus, p)
        s_in = v * np.conj(sol.branch_current_pu[(bid, p)])
        s_out = load.get((bus, p), 0j) + sum(
            v * np.conj(sol.branch_current_pu[(c, p)]) for c in children.get((bus, p), []))
        assert abs(s_in - s_out) < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(3, 50), st.floats(0.1, 3.0))
def test_pv_never_lowers_voltage(seed, n, pv_ratio):
    rng = np.random.default_rng(seed)
    f = feeder_from_dict(random_radial_feeder(rng, n))
    loads = peak_injections(f)
    pv = [Injection(i.bus_id, i.phase, -pv_ratio * i.p_kw) for i in loads]
    without = solve_snapshot(f, loads).v_pu
    with_pv = solve_snapshot(f, loads + pv).v_pu
    assert np.all(with_pv >= without - 1e-9)


# --------------------------------------------------------------------------- #
# regulator control


REG = Regulator("r", setpoint_pu=1.0, bandwidth_pu=0.0167, delay_s=30.0)


def test_regulator_in_band_holds():
    assert apply_regulator_logic(REG, 1.0, 1000.0) == 0


def test_regulator_raises_one_step_after_delay():
    assert apply_regulator_logic(REG, 0.95, 60.0) == 1


def test_regulator_waits_for_delay():
    assert apply_regulator_logic(REG, 0.95, 10.0) == 0


def test_regulator_saturates_at_limit():
    reg = Regulator("r", 1.0, 0.0167, tap_min=-16, tap_max=16, current_tap=-16)
    assert apply_regulator_logic(reg, 1.10, 600.0) == -16
    top = Regulator("r", 1.0, 0.0167, current_tap=16)
    assert apply_regulator_logic(top, 0.90, 600.0) == 16


@given(st.floats(0.85, 1.15), st.floats(0, 600), st.integers(-16, 16))
def test_regulator_moves_at_most_one_step_toward_band(v, elapsed, tap):
    reg = Regulator("r", 1.0, 0.0167, current_tap=tap)
    new = apply_regulator_logic(reg, v, elapsed)
    assert abs(new - tap) <= 1 and -16 <= new <= 16
    if new != tap:
        assert (new - tap) * (1.0 - v) > 0


# --------------------------------------------------------------------------- #
# quasi-static time series


def test_qsts_all_zero_profiles_flat():
    f = feeder_from_dict(chain_doc(3))
    res = run_qsts(f, np.zeros((3, 10)))
    assert res.n_steps == 10
    np.testing.assert_allclose(res.max_v, 1.0, atol=1e-12)


def test_qsts_constant_load_equals_snapshot():
    f = feeder_from_dict(chain_doc(2, loaded={2}, peak_kw=100.0))
    res = run_qsts(f, np.full((1, 5), 100.0))
    sol = solve_snapshot(f, [Injection("b2", "ABC", 100.0, float(reactive_from_pf(100.0)))])
    np.testing.assert_allclose(res.max_v, sol.v_pu.max(), atol=1e-9)
    np.testing.assert_allclose(res.min_v, sol.v_pu.min(), atol=1e-9)


def test_qsts_shape_errors():
    f = feeder_from_dict(chain_doc(3))
    with pytest.raises(ValueError, match="shape"):
        run_qsts(f, np.zeros((2, 10)))
    with pytest.raises(ValueError, match="PV"):
        run_qsts(f, np.zeros((3, 10)), np.zeros((3, 9)))


def test_qsts_non_convergence_reports_step():
    f = feeder_from_dict(chain_doc(4, 3.0, 4.0))
    load = np.full((4, 6), 1.0)
    load[:, 3] = 5000.0
    with pytest.raises(ConvergenceError) as err:
        run_qsts(f, load, max_iter=5)
    assert err.value.step == 3


def _day_profiles(f, res_s=600, pv_kw=None):
    t = np.arange(86400 // res_s) * res_s / 3600.0
    shape = np.clip(np.sin(np.pi * (t - 6.0) / 12.0), 0, None) ** 2
    load = np.array([ln.peak_kw * (0.4 + 0.5 * np.exp(-((t - 19) / 2.5) ** 2))
                     for ln in f.load_nodes])
    pv_kw = 2.5 * np.array([ln.peak_kw for ln in f.load_nodes]) if pv_kw is None else pv_kw
    return load, pv_kw[:, None] * shape[None, :], shape


def test_qsts_peak_falls_in_pv_window_and_matches_snapshot(ieee123):
    f = ieee123.without_regulators()
    load, pv, shape = _day_profiles(f)
    res = run_qsts(f, load, pv, 600)
    v, bus, t = res.peak()
    assert shape[t] > 0
    tan = math.tan(math.acos(0.95))
    inj = [Injection(ln.bus_id, ln.phase, load[j, t] - pv[j, t], load[j, t] * tan)
           for j, ln in enumerate(f.load_nodes)]
    sol = solve_snapshot(f, inj)
    assert v == pytest.approx(sol.v_pu.max(), abs=1e-7)
    assert bus in {b for (b, _), m in sol.magnitudes().items() if abs(m - v) < 1e-7}


def test_qsts_with_regulators_matches_sequential_reference(ieee123):
    load, pv, _ = _day_profiles(ieee123, 300)
    res = run_qsts(ieee123, load, pv, 300)
    ref_max, ref_min, ref_taps = sequential_qsts(ieee123, load, pv, 300)
    np.testing.assert_array_equal(res.taps, ref_taps)
    np.testing.assert_allclose(res.max_v, ref_max, atol=1e-7)
    np.testing.assert_allclose(res.min_v, ref_min, atol=1e-7)
    assert len(np.unique(res.taps[:, 1])) > 1  # the regulators actually moved


def test_qsts_regulated_chain_matches_reference():
    f = feeder_from_dict(chain_doc(6, 0.4, 0.6, peak_kw=150.0, regulator=True))
    rng = np.random.default_rng(3)
    load = rng.uniform(20, 250, size=(6, 240))
    pv = rng.uniform(0, 300, size=(6, 240))
    res = run_qsts(f, load, pv, 15)
    ref_max, _, ref_taps = sequential_qsts(f, load, pv, 15)
    np.testing.assert_array_equal(res.taps, ref_taps)
    np.testing.assert_allclose(res.max_v, ref_max, atol=1e-7)


def test_qsts_without_regulators_is_order_independent(ieee123):
    f = ieee123.without_regulators()
    load, pv, _ = _day_profiles(f, 1800)
    perm = np.random.default_rng(0).permutation(load.shape[1])
    a = run_qsts(f, load, pv, 1800)
    b = run_qsts(f, load[:, perm], pv[:, perm], 1800)
    np.testing.assert_allclose(b.max_v, a.max_v[perm], atol=1e-12)
    np.testing.assert_array_equal(b.max_bus, a.max_bus[perm])


def test_qsts_zone_maxima(ieee123):
    f = ieee123.without_regulators()
    load, pv, _ = _day_profiles(f, 3600)
    buses = [b.id for b in f.buses]
    zones = [buses[:40], buses[40:]]
    res = run_qsts(f, load, pv, 3600, zones=zones)
    np.testing.assert_allclose(res.zone_max_v.max(axis=1), res.max_v, atol=1e-15)
