"""Per-phase backward/forward sweep power flow and quasi-static time series.

Phases are solved independently (mutual coupling neglected). Each phase of a
feeder is a rooted tree; a regulator on a branch is an ideal autotransformer at
the sending end, so ``V_child = a * V_parent - z * J`` and the current seen
upstream of the regulator is ``a * J``.

Two routes share the same tree description:

* :func:`solve_snapshot` runs the textbook sweep branch by branch.
* :func:`run_qsts` uses the matrix form of the same sweep. Because the sweep is
  linear in the load currents for fixed taps, pushing unit currents through it
  once yields an operator ``V = G * v_src - K @ I`` that is then applied to
  every timestep at once.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .feeder import (
    BALANCED,
    PHASES,
    FeederError,
    FeederModel,
    Regulator,
    base_current_a,
    base_impedance_ohm,
    validate_tree,
)

log = logging.getLogger(__name__)

TOLERANCE_PU = 1e-8
MAX_ITERATIONS = 100
DEFAULT_POWER_FACTOR = 0.95


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class Injection:
    """Complex power drawn at a bus/phase; generation is negative ``p_kw``.

    ``phase="ABC"`` splits the injection equally across the three phases.
    """

    bus_id: str
    phase: str
    p_kw: float
    q_kvar: float = 0.0


@dataclass
class Solution:
    nodes: list[tuple[str, str]]
    v: np.ndarray
    branch_current_pu: dict[tuple[str, str], complex]
    branch_current_a: dict[tuple[str, str], float]
    converged: bool
    iterations: int

    @property
    def v_pu(self) -> np.ndarray:
        return np.abs(self.v)

    @property
    def angle_rad(self) -> np.ndarray:
        return np.angle(self.v)

    def voltage(self, bus_id: str, phase: str) -> complex:
        return complex(self.v[self.nodes.index((bus_id, phase))])

    def magnitudes(self) -> dict[tuple[str, str], float]:
        return {node: float(abs(v)) for node, v in zip(self.nodes, self.v)}


class _PhaseTree:
    """One phase of the feeder in breadth-first order (index 0 is the source)."""

    def __init__(self, phase: str, feeder: FeederModel, ordered):
        self.phase = phase
        src = feeder.source.id
        self.buses = [src]
        index = {src: 0}
        parent, z, branch_ids, regs = [-1], [0j], [""], [-1]
        reg_pos = {r.branch_id: i for i, r in enumerate(feeder.regulators)}
        for br in ordered:
            if phase not in br.phases:
                continue
            index[br.to_bus] = len(self.buses)
            self.buses.append(br.to_bus)
            parent.append(index[br.from_bus])
            zbase = base_impedance_ohm(feeder.bus(br.to_bus).nominal_kv_ll, feeder.base_kva)
            z.append(br.z_ohm / zbase)
            branch_ids.append(br.id)
            regs.append(reg_pos.get(br.id, -1))
        self.index = index
        self.parent = np.array(parent, dtype=np.intp)
        self.z = np.array(z, dtype=complex)
        self.branch_ids = branch_ids
        self.reg_of_node = np.array(regs, dtype=np.intp)
        self.n = len(self.buses)

    def ratios(self, ratio_by_reg: np.ndarray) -> np.ndarray:
        a = np.ones(self.n)
        has = self.reg_of_node >= 0
        a[has] = ratio_by_reg[self.reg_of_node[has]]
        return a

    def sweep(self, a: np.ndarray, v_src, current: np.ndarray):
        """One backward (current summation) and forward (voltage update) pass.

        ``current`` holds the load current drawn at each node, shape ``(n, ...)``.
        Returns node voltages and the receiving-end current of each node's
        feeding branch (entry 0 is the total current leaving the source).
        """
        parent, z = self.parent, self.z
        j = np.array(current, dtype=complex, copy=True)
        for k in range(self.n - 1, 0, -1):
            j[parent[k]] += a[k] * j[k]
        v = np.empty_like(j)
        v[0] = v_src
        for k in range(1, self.n):
            v[k] = a[k] * v[parent[k]] - z[k] * j[k]
        return v, j


class Network:
    """Feeder compiled into per-phase trees, load mapping and per-unit bases."""

    def __init__(self, feeder: FeederModel):
        ordered = validate_tree(feeder)
        self.feeder = feeder
        self.regulators: tuple[Regulator, ...] = feeder.regulators
        self.trees = {p: _PhaseTree(p, feeder, ordered) for p in PHASES}
        self.s_base_phase_kva = feeder.base_kva / 3.0
        self.nodes: list[tuple[str, str]] = []
        self.offsets: dict[str, int] = {}
        for p in PHASES:
            self.offsets[p] = len(self.nodes)
            self.nodes.extend((bus, p) for bus in self.trees[p].buses)
        self.node_bus = np.array([b for b, _ in self.nodes], dtype=object)
        self._build_load_maps()
        self._operators: dict[tuple[int, ...], dict] = {}

    # -- loads ------------------------------------------------------------ #

    def _build_load_maps(self) -> None:
        """Per phase: which tree nodes carry load and the share of each load node."""
        self.load_nodes = {}
        self.load_weights = {}
        n_ln = len(self.feeder.load_nodes)
        for p in PHASES:
            tree = self.trees[p]
            rows: dict[int, int] = {}
            entries = []
            for j, ln in enumerate(self.feeder.load_nodes):
                if p not in ln.phase:
                    continue
                share = 1.0 / len(ln.phase)
                node = tree.index[ln.bus_id]
                row = rows.setdefault(node, len(rows))
                entries.append((row, j, share))
            weights = np.zeros((len(rows), n_ln))
            for row, j, share in entries:
                weights[row, j] += share
            self.load_nodes[p] = np.array(sorted(rows, key=rows.get), dtype=np.intp)
            self.load_weights[p] = weights / self.s_base_phase_kva

    def injections_to_pu(self, injections: Iterable[Injection]) -> dict[str, np.ndarray]:
        s = {p: np.zeros(self.trees[p].n, dtype=complex) for p in PHASES}
        for inj in injections:
            phases = PHASES if inj.phase == BALANCED else (inj.phase,)
            for p in phases:
                if p not in PHASES or inj.bus_id not in self.trees[p].index:
                    raise FeederError(f"injection on unknown bus/phase {inj.bus_id}.{inj.phase}")
                share = 1.0 / len(phases)
                s[p][self.trees[p].index[inj.bus_id]] += (
                    complex(inj.p_kw, inj.q_kvar) * share / self.s_base_phase_kva)
        return s

    # -- taps ------------------------------------------------------------- #

    def default_taps(self) -> tuple[int, ...]:
        return tuple(r.current_tap for r in self.regulators)

    def ratio_vector(self, taps: Sequence[int]) -> np.ndarray:
        return np.array([r.ratio(t) for r, t in zip(self.regulators, taps)], dtype=float)

    def operator(self, taps: Sequence[int]) -> dict:
        """``{phase: (G, K)}`` with ``V = G * v_src - K @ I_load`` for fixed taps."""
        key = tuple(int(t) for t in taps)
        op = self._operators.get(key)
        if op is None:
            ratio = self.ratio_vector(key)
            op = {}
            for p, tree in self.trees.items():
                a = tree.ratios(ratio)
                g, _ = tree.sweep(a, 1.0, np.zeros(tree.n, dtype=complex))
                loads = self.load_nodes[p]
                unit = np.zeros((tree.n, len(loads)), dtype=complex)
                unit[loads, np.arange(len(loads))] = 1.0
                drop, _ = tree.sweep(a, 0.0, unit)
                op[p] = (g, -drop)
            self._operators[key] = op
        return op

    def regulated_nodes(self) -> list[list[int]]:
        """Global node indices monitored by each regulator (its receiving bus)."""
        out = []
        for reg in self.regulators:
            idx = []
            for p in PHASES:
                tree = self.trees[p]
                for k, bid in enumerate(tree.branch_ids):
                    if bid == reg.branch_id:
                        idx.append(self.offsets[p] + k)
            out.append(idx)
        return out


_NETWORKS: dict[int, Network] = {}


def compile_network(feeder: FeederModel) -> Network:
    net = _NETWORKS.get(id(feeder))
    if net is None or net.feeder is not feeder:
        net = Network(feeder)
        _NETWORKS[id(feeder)] = net
    return net


def solve_snapshot(
    feeder: FeederModel,
    injections: Iterable[Injection],
    taps: Sequence[int] | Mapping[str, int] | None = None,
    v_source_pu: float = 1.0,
    tol: float = TOLERANCE_PU,
    max_iter: int = MAX_ITERATIONS,
) -> Solution:
    """Solve one steady-state snapshot by backward/forward sweep.

    ``taps`` may be a sequence aligned with ``feeder.regulators`` or a mapping
    from regulator branch id to tap; missing entries use the regulator's
    ``current_tap``. Non-convergence is reported through ``converged=False``.
    """
    net = compile_network(feeder)
    tap_vec = _resolve_taps(net, taps)
    ratio = net.ratio_vector(tap_vec)
    s = net.injections_to_pu(injections)

    converged = True
    iterations = 0
    volts, currents = [], {}
    for p in PHASES:
        tree = net.trees[p]
        a = tree.ratios(ratio)
        v, _ = tree.sweep(a, v_source_pu, np.zeros(tree.n, dtype=complex))
        sp = s[p]
        ok = False
        for it in range(1, max_iter + 1):
            v_new, j = tree.sweep(a, v_source_pu, np.conj(sp / v))
            delta = np.max(np.abs(v_new - v))
            v = v_new
            if delta < tol:
                ok = True
                break
        iterations = max(iterations, it)
        converged &= ok
        volts.append(v)
        for k in range(1, tree.n):
            kv = feeder.bus(tree.buses[k]).nominal_kv_ll
            ibase = base_current_a(kv, feeder.base_kva)
            currents[(tree.branch_ids[k], p)] = (complex(j[k]), abs(j[k]) * ibase)
    if not converged:
        log.warning("snapshot did not converge after %d iterations", max_iter)
    return Solution(
        nodes=list(net.nodes),
        v=np.concatenate(volts),
        branch_current_pu={k: c for k, (c, _) in currents.items()},
        branch_current_a={k: a for k, (_, a) in currents.items()},
        converged=converged,
        iterations=iterations,
    )


def _resolve_taps(net: Network, taps) -> tuple[int, ...]:
    if taps is None:
        return net.default_taps()
    if isinstance(taps, Mapping):
        return tuple(int(taps.get(r.branch_id, r.current_tap)) for r in net.regulators)
    taps = tuple(int(t) for t in taps)
    if len(taps) != len(net.regulators):
        raise ValueError(f"expected {len(net.regulators)} taps, got {len(taps)}")
    return taps


# --------------------------------------------------------------------------- #
# regulator control


def apply_regulator_logic(reg: Regulator, regulated_voltage_pu: float,
                          elapsed_out_of_band_s: float) -> int:
    """Next tap position after one control timestep.

    In band (``|v - setpoint| <= bandwidth / 2``) the tap holds. Out of band,
    once the out-of-band time has reached ``delay_s`` the tap moves one step in
    the correcting direction, saturating at the tap limits.
    """
    error = regulated_voltage_pu - reg.setpoint_pu
    if abs(error) <= reg.bandwidth_pu / 2.0 or elapsed_out_of_band_s < reg.delay_s:
        return reg.current_tap
    step = -1 if error > 0 else 1
    return min(reg.tap_max, max(reg.tap_min, reg.current_tap + step))


# --------------------------------------------------------------------------- #
# quasi-static time series


@dataclass
class QstsResult:
    max_v: np.ndarray
    max_bus: np.ndarray
    min_v: np.ndarray
    taps: np.ndarray
    zone_max_v: np.ndarray | None = None
    resolution_s: float = 60.0
    iterations: int = 0

    @property
    def n_steps(self) -> int:
        return len(self.max_v)

    def peak(self) -> tuple[float, str, int]:
        """Week maximum voltage, its bus and timestep."""
        t = int(np.argmax(self.max_v))
        return float(self.max_v[t]), str(self.max_bus[t]), t


@dataclass
class _Window:
    v: np.ndarray  # (n_nodes, W) complex
    iterations: int


def _solve_window(net: Network, taps, s_by_phase: dict, lo: int, hi: int,
                  v_src: float, tol: float, max_iter: int) -> _Window:
    op = net.operator(taps)
    blocks = []
    worst = 0
    for p in PHASES:
        g, k = op[p]
        loads = net.load_nodes[p]
        s = s_by_phase[p][:, lo:hi]
        if len(loads) == 0:
            blocks.append(np.broadcast_to((g * v_src)[:, None], (len(g), hi - lo)).copy())
            continue
        k_ll = k[loads]
        g_l = (g[loads] * v_src)[:, None]
        s_conj = np.conj(s)
        v_l = np.broadcast_to(g_l, s.shape).astype(complex)
        v_new = np.empty_like(v_l)
        work = np.empty_like(v_l)
        dist = np.empty(v_l.shape)
        for it in range(1, max_iter + 1):
            np.conjugate(v_l, out=work)
            np.divide(s_conj, work, out=work)
            np.matmul(k_ll, work, out=v_new)
            np.subtract(g_l, v_new, out=v_new)
            np.subtract(v_new, v_l, out=work)
            np.abs(work, out=dist)
            v_l, v_new = v_new, v_l
            if dist.max() < tol:
                break
        else:
            bad = int(np.flatnonzero(dist.max(axis=0) >= tol)[0]) + lo
            raise ConvergenceError(f"power flow did not converge at step {bad}", step=bad)
        worst = max(worst, it)
        np.conjugate(v_l, out=work)
        np.divide(s_conj, work, out=work)
        blocks.append((g * v_src)[:, None] - k @ work)
    return _Window(np.vstack(blocks), worst)


def nodal_power_pu(net: Network, p_kw: np.ndarray, q_kvar: np.ndarray) -> dict[str, np.ndarray]:
    """Map per-load-node series ``(n_load_nodes, T)`` to per-phase load-node power in pu."""
    s = p_kw + 1j * q_kvar
    return {p: net.load_weights[p] @ s for p in PHASES}


def reactive_from_pf(p_kw: np.ndarray, power_factor: float = DEFAULT_POWER_FACTOR) -> np.ndarray:
    return p_kw * math.tan(math.acos(power_factor))


def run_qsts(
    feeder: FeederModel,
    nodal_load_kw: np.ndarray,
    nodal_pv_kw: np.ndarray | None = None,
    resolution_s: float = 60.0,
    *,
    power_factor: float = DEFAULT_POWER_FACTOR,
    v_source_pu: float = 1.0,
    zones: Sequence[Iterable[str]] | None = None,
    initial_taps: Sequence[int] | None = None,
    tol: float = TOLERANCE_PU,
    max_iter: int = MAX_ITERATIONS,
) -> QstsResult:
    """Sequential snapshots over a load/PV horizon with regulator state carried across steps.

    ``nodal_load_kw`` and ``nodal_pv_kw`` have shape ``(n_load_nodes, T)`` in
    the order of ``feeder.load_nodes``. PV is applied at unity power factor as
    negative active power; loads draw reactive power at ``power_factor`` lagging.
    ``zones`` (bus id collections) adds a per-step maximum voltage per zone.
    """
    net = compile_network(feeder)
    load = np.asarray(nodal_load_kw, dtype=float)
    n_ln = len(feeder.load_nodes)
    if load.ndim != 2 or load.shape[0] != n_ln:
        raise ValueError(f"load profiles must have shape ({n_ln}, T), got {load.shape}")
    if nodal_pv_kw is None:
        pv = np.zeros_like(load)
    else:
        pv = np.asarray(nodal_pv_kw, dtype=float)
        if pv.shape != load.shape:
            raise ValueError(f"PV profile shape {pv.shape} does not match load shape {load.shape}")
    T = load.shape[1]
    s_by_phase = nodal_power_pu(net, load - pv, reactive_from_pf(load, power_factor))

    zone_masks = None
    if zones is not None:
        zone_masks = [np.isin(net.node_bus, list(z)) for z in zones]

    taps = list(initial_taps) if initial_taps is not None else list(net.default_taps())
    n_reg = len(net.regulators)
    reg_nodes = net.regulated_nodes()
    elapsed = np.zeros(n_reg)
    tap_trace = np.zeros((T, n_reg), dtype=int)
    max_v = np.empty(T)
    max_idx = np.empty(T, dtype=np.intp)
    min_v = np.empty(T)
    zone_max = np.empty((T, len(zone_masks))) if zone_masks else None
    worst_it = 0

    window = T if n_reg == 0 else min(T, 64)
    t = 0
    while t < T:
        hi = min(T, t + window)
        sol = _solve_window(net, taps, s_by_phase, t, hi, v_source_pu, tol, max_iter)
        worst_it = max(worst_it, sol.iterations)
        mag = np.abs(sol.v)
        end = hi
        new_taps = taps
        if n_reg:
            cut, new_taps, elapsed = _scan_regulators(
                net.regulators, taps, elapsed, mag, reg_nodes, resolution_s)
            if cut is not None:
                end = t + cut + 1
        n = end - t
        mag = mag[:, :n]
        idx = np.argmax(mag, axis=0)
        max_idx[t:end] = idx
        max_v[t:end] = mag[idx, np.arange(n)]
        min_v[t:end] = mag.min(axis=0)
        tap_trace[t:end] = taps
        if zone_masks:
            for z, mask in enumerate(zone_masks):
                zone_max[t:end, z] = mag[mask].max(axis=0) if mask.any() else np.nan
        if n_reg:
            window = max(16, window // 2) if end < hi else min(T, window * 2)
        taps = list(new_taps)
        t = end

    return QstsResult(
        max_v=max_v,
        max_bus=net.node_bus[max_idx],
        min_v=min_v,
        taps=tap_trace,
        zone_max_v=zone_max,
        resolution_s=resolution_s,
        iterations=worst_it,
    )


def _scan_regulators(regs, taps, elapsed, mag, reg_nodes, resolution_s):
    """Advance regulator timers through a solved window.

    Returns the index of the first step after which some tap moves (or None),
    the taps to use from the following step, and the timers at the cut.
    """
    W = mag.shape[1]
    first = W
    per_reg = []
    for r, reg in enumerate(regs):
        v = mag[reg_nodes[r]].mean(axis=0)
        error = v - reg.setpoint_pu
        out = np.abs(error) > reg.bandwidth_pu / 2.0
        # out-of-band duration up to and including each step; a run touching the
        # window start continues the timer carried in from the previous window
        idx = np.arange(W)
        last_in = np.maximum.accumulate(np.where(~out, idx, -1))
        run = np.where(out, (idx - last_in) * resolution_s, 0.0)
        run = np.where(out & (last_in < 0), run + elapsed[r], run)
        step = np.where(error > 0, -1, 1)
        target = taps[r] + step
        feasible = (target >= reg.tap_min) & (target <= reg.tap_max)
        moving = out & (run >= reg.delay_s) & feasible
        hit = np.flatnonzero(moving)
        cut = int(hit[0]) if hit.size else W
        first = min(first, cut)
        per_reg.append((run, out, step, feasible))

    stop = min(first, W - 1)
    new_taps = list(taps)
    new_elapsed = np.empty_like(elapsed)
    for r, (run, out, step, feasible) in enumerate(per_reg):
        new_elapsed[r] = run[stop] if out[stop] else 0.0
        if first < W:
            new_taps[r] = apply_regulator_logic(
                _with_tap(regs[r], taps[r]), float(mag[reg_nodes[r], stop].mean()),
                float(new_elapsed[r]))
    return (first if first < W else None), new_taps, new_elapsed


def _with_tap(reg: Regulator, tap: int) -> Regulator:
    return reg if reg.current_tap == tap else replace(reg, current_tap=int(tap))
