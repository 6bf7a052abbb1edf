"""Global controller: scenario OPF solves, profile averaging and load bounds.

Every cycle the global controller forecasts the net load of all buses from
delayed meter data, draws forecast scenarios, solves one multi-period relaxed
OPF per scenario, averages the storage nodes' net-load profiles and finally
asks, per storage node and step, how far that node's net load may move while
all other nodes follow the averaged plan.  The result is one
:class:`GlobalPlan` per storage node.

Units: net loads and bounds are kW (consumption positive), charges kWh.  Inside
the programs powers are per unit of the network base; the objective is
``sum_t price_t * P_slack,t * dt`` (per-unit import, $/kWh) plus ``lambda``
times the hinge-squared voltage penalty on ``w_ii``.
"""
from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .conic import ProgramBuilder, SolverSettings, solve
from .forecast import ResidualStats, generate_scenarios
from .network import RadialNetwork
from .opf import WValues, build_flow_constraints, build_voltage_penalty, relaxation_gap
from .storage import build_storage_constraints
from .tariff import TouTariff

log = logging.getLogger(__name__)

# residual level below which a max_iters solve is still accepted (normalized units)
ACCEPT_RESIDUAL = 1e-4
# bounds requests stacked into one program
BOUNDS_CHUNK = 48
LOSS_WEIGHT = 2.0


class SolverFailure(RuntimeError):
    def __init__(self, msg, context=None):
        super().__init__(msg)
        self.context = context or {}


class ShapeMismatch(ValueError):
    pass


@dataclass
class GCConfig:
    delta_gc: int = 24
    delta_f: int = 48
    n_scenarios: int = 24
    lam: float = 1000.0
    v_tol_minus: float = 0.955
    v_tol_plus: float = 1.045
    tariff: TouTariff = field(default_factory=TouTariff)
    dt: float = 1.0
    workers: int = 1
    settings: SolverSettings = field(default_factory=lambda: SolverSettings(eps_abs=1e-4, eps_rel=1e-4,
                                                                            max_iters=20_000))

    def __post_init__(self):
        if self.delta_gc < 1 or self.delta_f < 0:
            raise ValueError("need delta_gc >= 1 and delta_f >= 0")
        if self.n_scenarios < 1:
            raise ValueError("n_scenarios must be >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not self.v_tol_minus < self.v_tol_plus:
            raise ValueError("inverted voltage band")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    @property
    def horizon(self) -> int:
        return self.delta_gc + self.delta_f


@dataclass
class GlobalPlan:
    """Profile and soft bounds for every storage node, in kW."""

    nodes: list
    x: np.ndarray        # (k, H)
    lower: np.ndarray    # (k, H)
    upper: np.ndarray    # (k, H)
    issued_at: int       # clock step at which the plan was produced
    start: int = None    # first step the arrays describe (defaults to issued_at)
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.nodes = [int(n) for n in self.nodes]
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.lower = np.atleast_2d(np.asarray(self.lower, dtype=float))
        self.upper = np.atleast_2d(np.asarray(self.upper, dtype=float))
        if self.start is None:
            self.start = self.issued_at
        if not (self.x.shape == self.lower.shape == self.upper.shape):
            raise ShapeMismatch("profile and bounds differ in shape")
        if self.x.shape[0] != len(self.nodes):
            raise ShapeMismatch("one row per storage node required")

    @property
    def length(self) -> int:
        return self.x.shape[1]

    def row(self, node: int) -> int:
        return self.nodes.index(int(node))

    def node_slice(self, node: int, t: int):
        """(x, lower, upper) for one node from clock step ``t`` to the plan end."""
        k = self.row(node)
        off = t - self.start
        if off < 0 or off >= self.length:
            raise IndexError(f"step {t} outside plan [{self.start}, {self.start + self.length})")
        return self.x[k, off:], self.lower[k, off:], self.upper[k, off:]

    def sandwich_violation(self) -> float:
        return float(max(np.max(self.lower - self.x, initial=0.0),
                         np.max(self.x - self.upper, initial=0.0)))

    def to_dict(self) -> dict:
        return {"issued_at": int(self.issued_at), "start": int(self.start),
                "nodes": [{"node": n, "x": self.x[k].tolist(), "lower": self.lower[k].tolist(),
                           "upper": self.upper[k].tolist()} for k, n in enumerate(self.nodes)]}

    @classmethod
    def from_dict(cls, doc: dict) -> "GlobalPlan":
        rows = doc["nodes"]
        if not rows:
            empty = np.zeros((0, 0))
            return cls([], empty, empty, empty, doc["issued_at"], doc.get("start"))
        return cls([r["node"] for r in rows], [r["x"] for r in rows], [r["lower"] for r in rows],
                   [r["upper"] for r in rows], doc["issued_at"], doc.get("start"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "GlobalPlan":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class GlobalSolve:
    profiles: np.ndarray    # (k, H) storage-node net load, kW
    charge: np.ndarray      # (k, H) end-of-step charge, kWh
    slack_kw: np.ndarray    # (H,) import at the substation, kW
    w: np.ndarray           # (n_buses, H)
    objective: float
    penalty: float
    gap: float
    iterations: int
    solution: object = field(default=None, repr=False)


def _check(sol, what, context):
    if sol.optimal:
        return
    if max(sol.primal_residual, sol.dual_residual) <= ACCEPT_RESIDUAL:
        log.warning("%s: accepted inexact solve (rp=%.2e rd=%.2e)", what,
                    sol.primal_residual, sol.dual_residual)
        return
    raise SolverFailure(f"{what}: solver status {sol.status} (rp={sol.primal_residual:.2e}, "
                        f"rd={sol.dual_residual:.2e})", context)


def solve_global(net: RadialNetwork, storage: dict, scenario, reactive, q_init, cfg: GCConfig,
                 start_step: int = 0, scenario_id=None, warm=None) -> GlobalSolve:
    """Multi-period relaxed OPF for one net-load scenario.

    ``storage`` maps bus id to :class:`~dercoord.storage.BatterySpec`;
    ``scenario``/``reactive`` are (n_buses, H) real/reactive net load in kW
    (consumption positive); ``q_init`` holds one charge per storage bus (kWh).
    ``warm`` is the ``solution`` of an earlier solve with the same network,
    storage set and horizon.
    """
    nb = net.n_buses
    scenario = np.asarray(scenario, dtype=float)
    reactive = np.asarray(reactive, dtype=float)
    H = scenario.shape[1]
    if scenario.shape != (nb, H) or reactive.shape != (nb, H):
        raise ShapeMismatch(f"scenario must be ({nb}, H)")
    base = net.base_power_kva
    nodes = sorted(storage)
    specs = [storage[j] for j in nodes]
    b = ProgramBuilder()
    p = b.add_variables((nb, H))
    q = b.add_variables((nb, H))
    fixed = [i for i in range(1, nb) if i not in storage]
    for i in fixed:
        b.set_bounds(p[i], -scenario[i] / base, -scenario[i] / base)
    for i in range(1, nb):
        b.set_bounds(q[i], -reactive[i] / base, -reactive[i] / base)
    sblock = None
    if nodes:
        sblock = build_storage_constraints(b, specs, H, q_init, cfg.dt, scale=base)
        for k, j in enumerate(nodes):
            # P_j + u_j = -d_j  (injection is minus net load)
            b.add_rows(np.stack([p[j], sblock.u[k]], 1), [1.0, 1.0], -scenario[j] / base)
    block = build_flow_constraints(b, net, H, p, q)
    pen = build_voltage_penalty(b, block, cfg.lam, cfg.v_tol_plus, cfg.v_tol_minus)
    prices = cfg.tariff.prices(np.arange(start_step, start_step + H), cfg.dt)
    b.add_linear_cost(p[0], prices * cfg.dt)
    prog = b.build()
    sol = solve(prog, cfg.settings, raise_infeasible=False, warm=warm)
    _check(sol, f"global solve (scenario {scenario_id})", {"scenario": scenario_id})
    x = sol.x
    if nodes:
        u_kw = x[sblock.u] * base
        profiles = scenario[nodes] + u_kw
        charge = x[sblock.q] * base
    else:
        profiles = np.zeros((0, H))
        charge = np.zeros((0, H))
    vals = WValues.from_solution(block, x)
    return GlobalSolve(profiles, charge, x[p[0]] * base, vals.w, sol.objective, pen.value(x),
                       relaxation_gap(net, vals), sol.iterations, sol)


def average_profiles(profiles) -> np.ndarray:
    """Elementwise mean over scenarios of equally shaped profile arrays."""
    profiles = [np.asarray(a, dtype=float) for a in profiles]
    if not profiles:
        raise ShapeMismatch("no profiles to average")
    shape = profiles[0].shape
    for a in profiles[1:]:
        if a.shape != shape:
            raise ShapeMismatch(f"profile shape {a.shape} differs from {shape}")
    return np.mean(np.stack(profiles), axis=0)


def solve_bounds(net: RadialNetwork, requests, fixed_kw, reactive, cfg: GCConfig,
                 caps=None) -> np.ndarray:
    """Load bounds for a batch of (node, step, direction) requests.

    ``fixed_kw``/``reactive`` are (n_buses, H) real/reactive net loads that
    every node other than the requested one is pinned to.  Each request is an
    independent single-step program (objective ``-+ x_j`` in per unit plus the
    voltage penalty at that step, plus ``LOSS_WEIGHT`` times the network
    losses to keep the relaxation exact); all of them are stacked as the columns of
    one program, which leaves them uncoupled.  ``direction`` is ``"min"`` or
    ``"max"``.  Returns the optimal ``x_j`` per request in kW.

    ``caps`` is an optional (N, 2) array of kW limits on ``x_j`` per request;
    :func:`run_gc_cycle` uses it to stop the search at the edge of what the
    node's battery could ever realize.
    """
    requests = list(requests)
    if not requests:
        return np.zeros(0)
    nb = net.n_buses
    base = net.base_power_kva
    fixed_kw = np.asarray(fixed_kw, dtype=float)
    reactive = np.asarray(reactive, dtype=float)
    N = len(requests)
    nodes = np.array([r[0] for r in requests], dtype=int)
    steps = np.array([r[1] for r in requests], dtype=int)
    sign = np.array([{"min": -1.0, "max": 1.0}[r[2]] for r in requests])
    P = -fixed_kw[:, steps] / base
    Q = -reactive[:, steps] / base
    b = ProgramBuilder()
    p = b.add_variables((nb, N))
    q = b.add_variables((nb, N))
    lo, hi = P.copy(), P.copy()
    lo[0], hi[0] = -np.inf, np.inf
    if caps is None:
        lo[nodes, np.arange(N)] = -np.inf
        hi[nodes, np.arange(N)] = np.inf
    else:
        caps = np.asarray(caps, dtype=float).reshape(N, 2)
        # x in [cap_lo, cap_hi]  <=>  P in [-cap_hi, -cap_lo] / base
        lo[nodes, np.arange(N)] = -caps[:, 1] / base
        hi[nodes, np.arange(N)] = -caps[:, 0] / base
    b.set_bounds(p.reshape(-1), lo.reshape(-1), hi.reshape(-1))
    qlo = Q.copy()
    qhi = Q.copy()
    qlo[0], qhi[0] = -np.inf, np.inf
    b.set_bounds(q.reshape(-1), qlo.reshape(-1), qhi.reshape(-1))
    block = build_flow_constraints(b, net, N, p, q)
    build_voltage_penalty(b, block, cfg.lam, cfg.v_tol_plus, cfg.v_tol_minus)
    # maximizing x_j = -P_j is minimizing P_j
    b.add_linear_cost(p[nodes, np.arange(N)], sign)
    # total losses sum_i P_i, priced above the unit gain of the bound objective:
    # otherwise the relaxation can burn injected power as fictitious losses
    # and report an export bound far beyond the voltage limit
    b.add_linear_cost(p, LOSS_WEIGHT)
    prog = b.build()
    sol = solve(prog, cfg.settings, raise_infeasible=False)
    _check(sol, "bounds solve", {"requests": requests[:3]})
    return -sol.x[p[nodes, np.arange(N)]] * base


# ---------------------------------------------------------------------------
# one GC cycle


@dataclass
class CycleInputs:
    """Everything a GC cycle consumes; built by the simulator from delayed data."""

    point: np.ndarray        # (n_buses, H) real net-load forecast, kW
    reactive: np.ndarray     # (n_buses, H) reactive forecast, kW
    residual_mean: np.ndarray
    residual_std: np.ndarray
    q_init: np.ndarray       # shadow charges of storage nodes, kWh
    start_step: int
    issued_at: int


def _scenario_task(args):
    net, storage, scen, reactive, q_init, cfg, start, g = args
    return solve_global(net, storage, scen, reactive, q_init, cfg, start, scenario_id=g)


def _bounds_task(args):
    """Solve a chunk of bounds requests; retry one by one if the batch fails.

    Returns ``(values, n_failed)``; a request that still fails falls back to
    its cap (the bound is then inactive for the local controller).
    """
    net, reqs, fixed, reactive, cfg, caps = args
    try:
        return solve_bounds(net, reqs, fixed, reactive, cfg, caps), 0
    except SolverFailure:
        log.warning("batched bounds solve failed; retrying %d requests singly", len(reqs))
    out = np.empty(len(reqs))
    failed = 0
    for k, r in enumerate(reqs):
        try:
            out[k] = solve_bounds(net, [r], fixed, reactive, cfg, caps[k:k + 1])[0]
        except SolverFailure:
            failed += 1
            out[k] = caps[k, 0] if r[2] == "min" else caps[k, 1]
            log.warning("bounds request %s failed; using its cap", r)
    return out, failed


_CACHE: dict = {}
_CACHE_MAX = 64


def _cycle_key(net, storage, inp, cfg, seed) -> str:
    h = hashlib.sha256()
    h.update(repr((net, sorted(storage.items()), cfg.delta_gc, cfg.delta_f, cfg.n_scenarios, cfg.lam,
                   cfg.v_tol_minus, cfg.v_tol_plus, cfg.tariff, cfg.dt, cfg.settings, seed,
                   inp.start_step, inp.issued_at)).encode())
    for a in (inp.point, inp.reactive, inp.residual_mean, inp.residual_std, inp.q_init):
        h.update(np.ascontiguousarray(a, dtype=float).tobytes())
    return h.hexdigest()


def clear_cache():
    _CACHE.clear()


def run_gc_cycle(net: RadialNetwork, storage: dict, inp: CycleInputs, cfg: GCConfig, seed=0,
                 use_cache: bool = True):
    """Scenarios, per-scenario OPF, averaging and bounds; returns ``(plan, shadow_charge)``.

    ``shadow_charge`` is the averaged planned charge at the end of the first
    ``delta_gc`` steps, the GC's own estimate of the state at its next cycle.
    Identical inputs return a cached result (the computation is deterministic).
    """
    key = _cycle_key(net, storage, inp, cfg, seed) if use_cache else None
    if key is not None and key in _CACHE:
        plan, shadow = _CACHE[key]
        return GlobalPlan.from_dict(plan.to_dict()), shadow.copy()
    nodes = sorted(storage)
    H = inp.point.shape[1]
    rng = np.random.default_rng(seed)
    # only real net load is uncertain; scenarios perturb the point forecast
    fan = generate_scenarios(inp.point, ResidualStats(inp.residual_mean, inp.residual_std),
                             cfg.n_scenarios, rng=rng)
    tasks = [(net, storage, fan.scenarios[g], inp.reactive, inp.q_init, cfg, inp.start_step, g)
             for g in range(cfg.n_scenarios)]
    results = _map(_scenario_task, tasks, cfg.workers)
    x = average_profiles([r.profiles for r in results])
    charge = average_profiles([r.charge for r in results])
    fixed = inp.point.copy()
    fixed[nodes] = x
    k = len(nodes)
    # search range: anything beyond what the battery could realize under any
    # plausible forecast error is irrelevant to the local controller
    reach = np.array([storage[j].u_max - storage[j].u_min for j in nodes]).reshape(k, 1)
    span = reach + 4.0 * np.asarray(inp.residual_std, dtype=float)[nodes] + 1.0
    reqs = [(j, t, d) for d in ("min", "max") for j in nodes for t in range(H)]
    cap_arr = np.stack([np.concatenate([x - span, x - span]).reshape(-1),
                        np.concatenate([x + span, x + span]).reshape(-1)], 1)
    idx = _chunks(list(range(len(reqs))), max(cfg.workers, -(-len(reqs) // BOUNDS_CHUNK)))
    tasks = [(net, [reqs[i] for i in c], fixed, inp.reactive, cfg, cap_arr[c]) for c in idx]
    parts = _map(_bounds_task, tasks, cfg.workers)
    vals = np.concatenate([pv for pv, _ in parts]) if parts else np.zeros(0)
    n_failed = sum(f for _, f in parts)
    lower = vals[: k * H].reshape(k, H)
    upper = vals[k * H:].reshape(k, H)
    leak = float(max(np.max(lower - x, initial=0.0), np.max(x - upper, initial=0.0)))
    x = np.clip(x, lower, upper)
    diag = {"max_gap": max(r.gap for r in results),
            "mean_iterations": float(np.mean([r.iterations for r in results])),
            "sandwich_leak_kw": leak,
            "bounds_failed": n_failed,
            "bounds_capped": float(np.mean(np.isclose(vals, cap_arr[:, 0]) | np.isclose(vals, cap_arr[:, 1])))
            if vals.size else 0.0,
            "mean_penalty": float(np.mean([r.penalty for r in results]))}
    plan = GlobalPlan(nodes, x, lower, upper, inp.issued_at, inp.start_step, diag)
    shadow = charge[:, cfg.delta_gc - 1].copy() if k else np.zeros(0)
    if key is not None:
        if len(_CACHE) >= _CACHE_MAX:
            _CACHE.pop(next(iter(_CACHE)))
        _CACHE[key] = (GlobalPlan.from_dict(plan.to_dict()), shadow.copy())
    return plan, shadow


def _chunks(seq, n):
    n = max(1, min(n, len(seq)))
    size = -(-len(seq) // n) if seq else 0
    return [seq[i:i + size] for i in range(0, len(seq), size)] if seq else []


def _map(fn, tasks, workers):
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, tasks))
