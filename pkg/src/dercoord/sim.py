"""Closed-loop simulation: synthetic truth, DER deployment, controller timing.

The world advances one step at a time.  Smart-meter readings enter a
:class:`MeterArchive` as they happen; the global controller may only read
readings at least ``delta_gc`` steps old, and each local controller only its
own node's readings.  True voltages always come from the exact AC power flow
on the realized injections.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .forecast import ArtificialForecaster, SeasonalForecaster
from .global_controller import CycleInputs, GCConfig, GlobalPlan, run_gc_cycle
from .local_controller import DecisionLog, LCConfig, StalePlan, lc_step
from .network import RadialNetwork
from .opf import NoConvergence, solve_ac_oracle
from .storage import BatterySpec, BatteryState, replay, step_simple
from .tariff import SimMetrics, TouTariff, arbitrage_profit, sq_voltage_deviation

log = logging.getLogger(__name__)

SUNRISE = 6.0
SUNSET = 20.0
SOLAR_NOISE = 0.05
CONTROLLERS = ("two_layer", "uncoordinated", "none")


class EmptySelection(ValueError):
    pass


@dataclass(frozen=True)
class DeploymentPlan:
    solar_penetration: float = 0.6
    storage_penetration: float = 0.4
    der_node_fraction: float = 0.6
    seed: int = 0
    storage_hours: float = 4.0     # q_max / u_max

    def __post_init__(self):
        for name in ("solar_penetration", "storage_penetration", "der_node_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.storage_hours <= 0:
            raise ValueError("storage_hours must be positive")


@dataclass
class DerAssignment:
    nodes: list                # chosen DER nodes
    solar_peak_kw: np.ndarray  # (n_buses,)
    q_max: np.ndarray          # (n_buses,) kWh

    def battery_specs(self, hours: float = 4.0) -> dict:
        return {int(i): BatterySpec(q_max=float(self.q_max[i]), u_max=float(self.q_max[i] / hours),
                                    u_min=-float(self.q_max[i] / hours))
                for i in range(self.q_max.size) if self.q_max[i] > 0}


@dataclass
class TruthData:
    demand: np.ndarray      # (n_buses, T) kW
    solar: np.ndarray       # (n_buses, T) kW
    reactive: np.ndarray    # (n_buses, T) kvar
    days: float
    ders: DerAssignment = None

    @property
    def steps(self) -> int:
        return self.demand.shape[1]

    @property
    def net_load(self) -> np.ndarray:
        return self.demand - self.solar

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.demand, self.solar, self.reactive):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()[:16]


def clear_sky(hours) -> np.ndarray:
    """Normalized clear-sky output at hour-of-day (step midpoints); zero outside daylight."""
    h = np.mod(np.asarray(hours, dtype=float), 24.0) + 0.5
    day = (h > SUNRISE) & (h < SUNSET)
    return np.where(day, np.sin(np.pi * (h - SUNRISE) / (SUNSET - SUNRISE)), 0.0)


def _household_shapes(rng, n_homes: int, steps: int) -> np.ndarray:
    """Aggregate of ``n_homes`` synthetic homes: base + two diurnal harmonics, lognormal noise."""
    t = np.arange(steps)
    total = np.zeros(steps)
    for _ in range(n_homes):
        base = rng.uniform(0.6, 1.0)
        a1, p1 = rng.uniform(0.3, 0.5), rng.normal(18.5, 1.0)
        a2, p2 = rng.uniform(0.1, 0.25), rng.normal(8.0, 1.0)
        shape = base + a1 * np.cos(2 * np.pi * (t - p1) / 24) + a2 * np.cos(4 * np.pi * (t - p2) / 24)
        noise = rng.lognormal(mean=-0.5 * 0.25 ** 2, sigma=0.25, size=steps)
        total += np.maximum(shape, 0.05) * noise
    return total


def assign_ders(net: RadialNetwork, plan: DeploymentPlan, daily_demand_kwh=None,
                daily_solar_shape=None, rng=None) -> DerAssignment:
    """Choose DER nodes and split the network's solar and storage totals among them.

    Totals are fractions of the network's daily demand energy (``daily_demand_kwh``,
    estimated from peak loads if omitted); each chosen node gets a share in
    proportion to its peak load.  Solar is returned as peak kW of the clear-sky
    profile, storage as ``q_max`` in kWh.
    """
    loads = np.array(net.load_buses, dtype=int)
    if loads.size == 0:
        raise EmptySelection("network has no nonzero-load nodes")
    k = math.ceil(plan.der_node_fraction * loads.size - 1e-9)
    nb = net.n_buses
    if k == 0:
        if plan.solar_penetration > 0 or plan.storage_penetration > 0:
            raise EmptySelection("DER node fraction selects no nodes")
        return DerAssignment([], np.zeros(nb), np.zeros(nb))
    rng = rng if rng is not None else np.random.default_rng(plan.seed)
    chosen = np.sort(rng.choice(loads, size=k, replace=False))
    peaks = net.peak_loads_kw
    share = np.zeros(nb)
    share[chosen] = peaks[chosen] / peaks[chosen].sum()
    if daily_demand_kwh is None:
        daily_demand_kwh = 0.7 * peaks.sum() * 24.0
    if daily_solar_shape is None:
        daily_solar_shape = clear_sky(np.arange(24)).sum()
    solar_energy = plan.solar_penetration * daily_demand_kwh * share
    solar_peak = solar_energy / daily_solar_shape
    q_max = plan.storage_penetration * daily_demand_kwh * share
    return DerAssignment([int(c) for c in chosen], solar_peak, q_max)


def generate_truth(net: RadialNetwork, plan: DeploymentPlan, days: float, seed=0,
                   homes_per_bus: int = 20) -> TruthData:
    """Synthetic demand, solar and reactive series plus the DER assignment.

    Demand per bus is an aggregate of synthetic homes scaled so its peak
    equals the bus peak load.  Solar is one clear-sky profile scaled to each
    node's allocation plus white noise at 5% of the node's peak generation,
    clipped at zero and exactly zero at night.
    """
    steps = int(round(days * 24))
    if steps < 1:
        raise ValueError("need at least one step")
    ss = np.random.SeedSequence(seed)
    r_dem, r_der, r_sol = (np.random.default_rng(s) for s in ss.spawn(3))
    nb = net.n_buses
    peaks = net.peak_loads_kw
    demand = np.zeros((nb, steps))
    for i in range(nb):
        if peaks[i] > 0:
            agg = _household_shapes(r_dem, homes_per_bus, steps)
            demand[i] = agg * (peaks[i] / agg.max())
    cs = clear_sky(np.arange(steps))
    daily_demand = demand.sum() / (steps / 24.0)
    ders = assign_ders(net, plan, daily_demand, cs.sum() / (steps / 24.0), rng=r_der)
    solar = ders.solar_peak_kw[:, None] * cs[None]
    noise = r_sol.standard_normal((nb, steps)) * (SOLAR_NOISE * ders.solar_peak_kw[:, None])
    solar = np.where(cs[None] > 0, np.maximum(solar + noise, 0.0), 0.0)
    reactive = demand * net.reactive_ratios[:, None]
    return TruthData(demand, solar, reactive, steps / 24.0, ders)


def baseline_uncoordinated(spec: BatterySpec, tariff: TouTariff, steps: int, q0: float,
                           dt: float = 1.0, start_hour: float = 0.0) -> np.ndarray:
    """Fixed-schedule storage, one cycle per day.

    Charges at a constant rate over the daylight off-peak hours (clear-sky
    support minus the peak window) and discharges at a constant rate over the
    peak window.  Each rate is set when its window opens, ``min(rate limit,
    headroom / window length)``, so bounds hold by construction.
    """
    hours = start_hour + np.arange(steps) * dt
    peak = tariff.is_peak(hours)
    charge = (clear_sky(hours) > 0) & ~peak
    day = np.arange(int(round(24 / dt))) * dt
    n_charge = max(int(np.count_nonzero((clear_sky(day) > 0) & ~tariff.is_peak(day))), 1)
    n_peak = max(int(np.count_nonzero(tariff.is_peak(day))), 1)
    u = np.zeros(steps)
    q, rate, prev = q0, 0.0, None
    for t in range(steps):
        kind = "c" if charge[t] else ("d" if peak[t] else None)
        if kind != prev:
            if kind == "c":
                rate = min(spec.u_max, max(spec.q_max - q, 0.0) / (n_charge * dt))
            elif kind == "d":
                rate = -min(-spec.u_min, max(q - spec.q_min, 0.0) / (n_peak * dt))
            else:
                rate = 0.0
            prev = kind
        # leakage can only shrink the charge; keep the step inside the box
        ut = float(np.clip(rate, (spec.q_min - spec.leakage * q) / dt, (spec.q_max - spec.leakage * q) / dt))
        u[t] = ut
        q = spec.leakage * q + ut * dt
    return u


# ---------------------------------------------------------------------------
# information boundary


class MeterArchive:
    """Per-node readings of uncontrollable net load, filled as time advances.

    Every read is logged with the reader, the nodes and the newest step
    returned, so the information boundary can be audited after a run.
    """

    def __init__(self, n_buses: int, steps: int):
        self.real = np.full((n_buses, steps), np.nan)
        self.reactive = np.full((n_buses, steps), np.nan)
        self.recorded = 0
        self.reads: list[tuple] = []

    def record(self, t: int, real, reactive):
        if t != self.recorded:
            raise ValueError(f"readings must arrive in order (expected step {self.recorded}, got {t})")
        self.real[:, t] = real
        self.reactive[:, t] = reactive
        self.recorded = t + 1

    def view(self, reader: str, nodes, stop: int, clock: int, reactive: bool = False):
        nodes = list(nodes)
        if stop > self.recorded:
            raise ValueError(f"{reader} asked for step {stop - 1}, only {self.recorded} recorded")
        self.reads.append((reader, tuple(nodes), int(stop), int(clock)))
        src = self.reactive if reactive else self.real
        return src[nodes, :stop].copy()

    def violations(self, delay: int) -> list:
        """Reads that crossed the information boundary."""
        bad = []
        for reader, nodes, stop, clock in self.reads:
            if reader == "gc":
                if stop > clock - delay:
                    bad.append((reader, nodes, stop, clock))
            elif reader.startswith("lc:"):
                own = int(reader.split(":")[1])
                if nodes != (own,) or stop > clock:
                    bad.append((reader, nodes, stop, clock))
            else:
                bad.append((reader, nodes, stop, clock))
        return bad


# ---------------------------------------------------------------------------
# simulation


@dataclass
class SimConfig:
    controller: str = "two_layer"
    gamma: float = 100.0
    lc_scenarios: int = 10
    warmup: int = 96
    sigma: float | None = None      # artificial forecaster error level; None = seasonal
    storage_hours: float = 4.0
    initial_soc: float = 0.5

    def __post_init__(self):
        if self.controller not in CONTROLLERS:
            raise ValueError(f"controller must be one of {CONTROLLERS}")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")


@dataclass
class SimResult:
    metrics: SimMetrics
    voltages: np.ndarray      # (T, n_buses) |v|, NaN where the power flow failed
    u: np.ndarray             # (n_buses, T) executed storage rates, kW
    q: np.ndarray             # (n_buses, T) end-of-step charge, kWh
    q0: np.ndarray            # (n_buses,) initial charge
    plans: list
    shadow_log: list
    read_violations: list
    decisions: DecisionLog
    planned_x: np.ndarray     # (n_buses, T) plan profile in force, NaN without a plan
    fallbacks: int = 0
    truth_digest: str = ""

    def write_run_log(self, path, truth: TruthData, tariff: TouTariff, dt: float = 1.0):
        prices = tariff.prices(np.arange(truth.steps), dt)
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["step", "bus", "v_pu", "d_kw", "solar_kw", "u_kw", "q_kwh", "price"])
            for t in range(truth.steps):
                for i in range(truth.demand.shape[0]):
                    wr.writerow([t, i, f"{self.voltages[t, i]:.8f}", f"{truth.demand[i, t]:.6f}",
                                 f"{truth.solar[i, t]:.6f}", f"{self.u[i, t]:.6f}",
                                 f"{self.q[i, t]:.6f}", prices[t]])


def _forecaster(cfg: SimConfig, truth: TruthData):
    if cfg.sigma is None:
        return SeasonalForecaster()

    def oracle(nodes, start, stop):
        nodes = slice(None) if nodes is None else list(nodes)
        net = truth.net_load[nodes, start:stop]
        if net.shape[1] < stop - start:
            # beyond the generated truth: repeat the last day
            extra = stop - start - net.shape[1]
            tail = truth.net_load[nodes, -24:]
            net = np.concatenate([net, np.tile(tail, (1, extra // 24 + 1))[:, :extra]], 1)
        return net
    return ArtificialForecaster(cfg.sigma, oracle)


def run_simulation(net: RadialNetwork, truth: TruthData, gc_cfg: GCConfig, sim_cfg: SimConfig,
                   seed=0, out_dir=None) -> SimResult:
    """Run the closed loop over the whole truth horizon; metrics cover steps ``>= warmup``.

    The first global cycle runs at the end of the warmup; before that the
    two-layer batteries idle.  The uncoordinated baseline follows its fixed
    schedule from step 0.
    """
    tariff = gc_cfg.tariff
    dt = gc_cfg.dt
    T = truth.steps
    nb = net.n_buses
    base = net.base_power_kva
    storage = truth.ders.battery_specs(sim_cfg.storage_hours) if truth.ders else {}
    nodes = sorted(storage)
    if sim_cfg.controller == "two_layer" and nodes and sim_cfg.warmup < gc_cfg.delta_gc + 48:
        raise ValueError("warmup too short: the first global cycle needs 48 h of delayed data")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    ss = np.random.SeedSequence([int(seed), 7])
    gc_seed_seq, lc_seq = ss.spawn(2)
    lc_rngs = {j: np.random.default_rng(s) for j, s in zip(nodes, lc_seq.spawn(max(len(nodes), 1)))}
    forecaster = _forecaster(sim_cfg, truth)

    q = np.zeros(nb)
    for j in nodes:
        q[j] = sim_cfg.initial_soc * storage[j].q_max
    q0 = q.copy()
    shadow = q[nodes].copy()
    baseline = {}
    if sim_cfg.controller == "uncoordinated":
        for j in nodes:
            baseline[j] = baseline_uncoordinated(storage[j], tariff, T, q[j], dt)

    archive = MeterArchive(nb, T)
    volts = np.full((T, nb), np.nan)
    U = np.zeros((nb, T))
    Q = np.zeros((nb, T))
    planned = np.full((nb, T), np.nan)
    plans, shadow_log = [], []
    dlog = DecisionLog()
    metrics = SimMetrics()
    plan = None
    fallbacks = 0
    lc_cfgs = {j: LCConfig(storage[j], sim_cfg.gamma, sim_cfg.lc_scenarios, gc_cfg.delta_f, dt, forecaster)
               for j in nodes}
    q_eval_start = q.copy()
    for t in range(T):
        if t == sim_cfg.warmup:
            q_eval_start = q.copy()
        if (sim_cfg.controller == "two_layer" and nodes and t >= sim_cfg.warmup
                and (t - sim_cfg.warmup) % gc_cfg.delta_gc == 0):
            plan, shadow_next = _gc_cycle(net, storage, archive, forecaster, gc_cfg, t, shadow,
                                          gc_seed_seq.spawn(1)[0])
            # the plan crosses the GC -> LC boundary as a serialized document
            doc = json.dumps(plan.to_dict())
            if out is not None:
                (out / f"plan_{t:05d}.json").write_text(doc + "\n")
            diag = plan.diagnostics
            plan = GlobalPlan.from_dict(json.loads(doc))
            plans.append(plan)
            shadow_log.append({"step": t, "shadow": shadow.tolist(), "true": q[nodes].tolist(),
                               "gap_kwh": float(np.max(np.abs(shadow - q[nodes]), initial=0.0)),
                               **diag})
            shadow = shadow_next
        u = np.zeros(nb)
        for j in nodes:
            spec = storage[j]
            if sim_cfg.controller == "uncoordinated":
                u[j] = baseline[j][t]
            elif sim_cfg.controller == "two_layer" and plan is not None:
                hist = archive.view(f"lc:{j}", [j], t, t)
                try:
                    dec = lc_step(hist, plan, j, t, q[j], tariff, lc_cfgs[j], lc_rngs[j])
                except StalePlan:
                    log.error("plan exhausted at step %d for node %d; idling", t, j)
                    fallbacks += 1
                    continue
                if dec.fallback:
                    fallbacks += 1
                u[j] = dec.u_now
                xj, _, _ = plan.node_slice(j, t)
                planned[j, t] = xj[0]
            # absorb solver round-off at the charge limits
            u[j] = float(np.clip(u[j], (spec.q_min - spec.leakage * q[j]) / dt,
                                 (spec.q_max - spec.leakage * q[j]) / dt))
            q[j] = step_simple(BatteryState(q[j], j), u[j], dt, spec).q
            if np.isfinite(planned[j, t]):
                dlog.add(t, j, dec, q[j], truth.net_load[j, t] + u[j], planned[j, t])
        U[:, t] = u
        Q[:, t] = q
        x = truth.net_load[:, t] + u
        inj = -(x + 1j * truth.reactive[:, t]) / base
        try:
            pf = solve_ac_oracle(net, inj[1:])
            volts[t] = pf.magnitudes
        except NoConvergence:
            if t >= sim_cfg.warmup:
                metrics.violation_count += 1
        archive.record(t, truth.net_load[:, t], truth.reactive[:, t])
        if t >= sim_cfg.warmup:
            price = float(tariff.prices(np.array([t]), dt)[0])
            if np.all(np.isfinite(volts[t])):
                metrics.sq_volt_dev += sq_voltage_deviation(volts[t])
            metrics.energy_cost += price * float(np.sum(x)) * dt
            metrics.steps += 1
            if nodes and np.any(np.isfinite(planned[nodes, t])):
                m = np.isfinite(planned[nodes, t])
                metrics.profile_deviation += float(np.sum(np.abs(x[nodes][m] - planned[nodes, t][m])))
    w0 = sim_cfg.warmup
    if nodes and T > w0:
        metrics.arbitrage_profit = arbitrage_profit(U[nodes, w0:], tariff, dt, w0, 0.0,
                                                    q_eval_start[nodes], Q[nodes, -1])
    if out is not None:
        dlog.write(out / "decisions.csv")
    return SimResult(metrics, volts, U, Q, q0, plans, shadow_log, archive.violations(gc_cfg.delta_gc),
                     dlog, planned, fallbacks, truth.digest())


def _gc_cycle(net, storage, archive: MeterArchive, forecaster, cfg: GCConfig, t, shadow, seed_seq):
    """Assemble delayed-data forecasts and run one global cycle at clock ``t``."""
    stop = t - cfg.delta_gc
    H = cfg.horizon
    nb = net.n_buses
    rng = np.random.default_rng(seed_seq)
    hist = archive.view("gc", range(nb), stop, t)
    hist_q = archive.view("gc", range(nb), stop, t, reactive=True)
    point = forecaster.point(hist, H, lag=cfg.delta_gc, rng=rng, nodes=range(nb))
    stats = forecaster.residual_stats(hist, H, lag=cfg.delta_gc, rng=rng)
    reactive = SeasonalForecaster().point(hist_q, H, lag=cfg.delta_gc)
    # the slack bus carries no load
    point[0] = 0.0
    reactive[0] = 0.0
    inp = CycleInputs(point, reactive, stats.mean, stats.std, np.asarray(shadow, dtype=float), t, t)
    gc_seed = int(rng.integers(2 ** 31))
    return run_gc_cycle(net, storage, inp, cfg, seed=gc_seed)


def check_replay(result: SimResult, storage: dict, dt: float = 1.0, tol: float = 1e-9) -> float:
    """Largest mismatch between logged charges and a replay of logged rates."""
    worst = 0.0
    for j, spec in storage.items():
        qr = replay(result.q0[j], result.u[j], dt, spec)
        worst = max(worst, float(np.max(np.abs(qr - result.q[j]), initial=0.0)))
    return worst


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepRow:
    cell: dict
    n_ok: int
    mean: dict
    std: dict
    errors: list = field(default_factory=list)
    per_seed: list = field(default_factory=list)


def _run_task(task):
    fn, cell, seed = task
    try:
        return seed, fn(cell, seed), None
    except Exception as err:          # recorded per cell, the sweep goes on
        log.error("cell %s seed %s failed: %s", cell, seed, err)
        return seed, None, f"{type(err).__name__}: {err}"


def sweep(cells: list, seeds, run_cell, workers: int = 1) -> list:
    """Run ``run_cell(cell, seed) -> dict of floats`` over every (cell, seed).

    Tasks are independent and may run in a process pool; results are
    collected in submission order, so the table is identical for any worker
    count.  ``run_cell`` must be a picklable module-level function when
    ``workers > 1``.  Returns one :class:`SweepRow` per cell with the mean and
    sample standard deviation (0 for a single seed) of each metric.
    """
    cells = list(cells)
    seeds = [int(s) for s in seeds]
    if not cells or not seeds:
        raise ValueError("sweep needs at least one cell and one seed")
    tasks = [(run_cell, c, s) for c in cells for s in seeds]
    if workers > 1 and len(tasks) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as ex:
            out = list(ex.map(_run_task, tasks))
    else:
        out = [_run_task(t) for t in tasks]
    rows = []
    k = len(seeds)
    for i, cell in enumerate(cells):
        chunk = out[i * k:(i + 1) * k]
        good = [r for _, r, e in chunk if e is None]
        errs = [(s, e) for s, _, e in chunk if e is not None]
        keys = list(good[0]) if good else []
        mean = {key: float(np.mean([g[key] for g in good])) for key in keys}
        std = {key: float(np.std([g[key] for g in good], ddof=1)) if len(good) > 1 else 0.0
               for key in keys}
        rows.append(SweepRow(dict(cell), len(good), mean, std, errs,
                             [(s, r) for s, r, e in chunk if e is None]))
    return rows


def write_sweep_table(rows: list, path) -> None:
    """Aggregate table: one line per cell, ``<metric>_mean`` and ``<metric>_std`` columns."""
    axes = sorted({k for r in rows for k in r.cell})
    metrics = []
    for r in rows:
        for k in r.mean:
            if k not in metrics:
                metrics.append(k)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(axes + ["n_ok"] + [f"{m}_{s}" for m in metrics for s in ("mean", "std")] + ["errors"])
        for r in rows:
            vals = []
            for m in metrics:
                vals += [repr(r.mean.get(m, math.nan)), repr(r.std.get(m, math.nan))]
            wr.writerow([json.dumps(r.cell.get(a)) for a in axes] + [r.n_ok] + vals
                        + ["; ".join(f"seed {s}: {e}" for s, e in r.errors)])
