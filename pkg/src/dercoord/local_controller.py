"""Local controller: one storage node's receding-horizon problem.

Each step the controller refreshes its own net-load forecast, draws scenarios
and solves

    min  sum_g sum_t  p_t z^g_t dt + gamma |z^g_t - x_t|
    s.t. x-_t <= z^g_t <= x+_t,   z^g_t = d^g_t + u_t,
         q_t = eta q_{t-1} + u_t dt,  battery boxes,

with one rate sequence ``u`` shared by all scenarios.  Only ``u`` at the first
step is executed.  The problem is a linear program (``z`` is eliminated and
``|.|`` split into two nonnegative parts) and is handed to HiGHS.

Units are kW, kWh and $; ``gamma`` is in $ per kW of deviation per step and is
not normalized by the scenario count.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .forecast import SeasonalForecaster, generate_scenarios
from .storage import BatterySpec
from .tariff import TouTariff

log = logging.getLogger(__name__)


class StalePlan(RuntimeError):
    pass


class SolverFailure(RuntimeError):
    pass


@dataclass
class LCConfig:
    spec: BatterySpec
    gamma: float = 100.0
    n_scenarios: int = 10
    delta_f: int = 48
    dt: float = 1.0
    forecaster: object = field(default_factory=SeasonalForecaster)

    def __post_init__(self):
        if not (np.isfinite(self.gamma) and self.gamma >= 0):
            raise ValueError("gamma must be finite and >= 0")
        if self.n_scenarios < 1:
            raise ValueError("n_scenarios must be >= 1")


@dataclass
class LCDecision:
    u_now: float
    planned_u: np.ndarray
    planned_q: np.ndarray
    cost_term: float
    deviation_term: float
    fallback: str | None = None

    @property
    def diagnostics(self) -> dict:
        return {"cost_term": self.cost_term, "deviation_term": self.deviation_term,
                "fallback": self.fallback}


def _rate_box(x_lo, x_hi, scen, spec):
    """Per-step bounds on ``u`` from the z-box over all scenarios and the battery limits.

    Where a step's box cannot be met (the uncontrollable load alone violates
    it, or the scenarios disagree), ``u`` is pinned to the nearest point of
    the battery's rate range.
    """
    lo = np.max(x_lo[None] - scen, axis=0)
    hi = np.min(x_hi[None] - scen, axis=0)
    lo_c = np.clip(lo, spec.u_min, spec.u_max)
    hi_c = np.clip(hi, spec.u_min, spec.u_max)
    bad = lo_c > hi_c
    mid = np.clip(0.5 * (lo + hi), spec.u_min, spec.u_max)
    lo_c = np.where(bad, mid, lo_c)
    hi_c = np.where(bad, mid, hi_c)
    return lo_c, hi_c, int(np.count_nonzero(bad | (lo > spec.u_max) | (hi < spec.u_min)))


def _lp(x, scen, prices, q_now, spec, gamma, dt, u_lo, u_hi, soft=None):
    """Assemble and solve the LP; ``soft`` is a violation weight for a softened rate box."""
    G, H = scen.shape
    # variable layout: u (H), q (H), e+ (G H), e- (G H)[, s+ (H), s- (H)]
    n = 2 * H + 2 * G * H + (2 * H if soft is not None else 0)
    c = np.zeros(n)
    c[:H] = G * prices * dt
    c[2 * H:2 * H + 2 * G * H] = gamma
    lb = np.zeros(n)
    ub = np.full(n, np.inf)
    lb[H:2 * H], ub[H:2 * H] = spec.q_min, spec.q_max
    if soft is None:
        lb[:H], ub[:H] = u_lo, u_hi
    else:
        lb[:H], ub[:H] = spec.u_min, spec.u_max
        c[2 * H + 2 * G * H:] = soft
    # battery recurrence
    t = np.arange(H)
    rows = [t, t, t[1:]]
    cols = [H + t, t, H + t[1:] - 1]
    vals = [np.ones(H), -dt * np.ones(H), -spec.leakage * np.ones(H - 1)]
    b = np.zeros(H)
    b[0] = spec.leakage * q_now
    # u_t - e+_gt + e-_gt = x_t - d_gt
    gt = np.arange(G * H)
    r2 = H + gt
    rows += [r2, r2, r2]
    cols += [np.tile(t, G), 2 * H + gt, 2 * H + G * H + gt]
    vals += [np.ones(G * H), -np.ones(G * H), np.ones(G * H)]
    b = np.concatenate([b, (x[None] - scen).reshape(-1)])
    A_eq = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(H + G * H, n))
    A_ub = b_ub = None
    if soft is not None:
        # u - s+ <= u_hi ; -u - s- <= -u_lo
        s0 = 2 * H + 2 * G * H
        A_ub = sp.vstack([sp.hstack([sp.eye(H), sp.csr_matrix((H, s0 - H)), -sp.eye(H), sp.csr_matrix((H, H))]),
                          sp.hstack([-sp.eye(H), sp.csr_matrix((H, s0 - H)), sp.csr_matrix((H, H)), -sp.eye(H)])]).tocsr()
        b_ub = np.concatenate([u_hi, -u_lo])
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b, bounds=np.stack([lb, ub], 1),
                  method="highs")
    return res


def solve_local(x, x_lo, x_hi, scenarios, q_now: float, prices, cfg: LCConfig) -> LCDecision:
    """Solve the local problem over the remaining plan window.

    ``x``/``x_lo``/``x_hi`` are the node's plan slice (kW), ``scenarios`` is
    (G, H) local net-load scenarios, ``prices`` $/kWh per step.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    x_lo = np.asarray(x_lo, dtype=float).reshape(-1)
    x_hi = np.asarray(x_hi, dtype=float).reshape(-1)
    scen = np.atleast_2d(np.asarray(scenarios, dtype=float))
    prices = np.asarray(prices, dtype=float).reshape(-1)
    H = x.size
    if H < 1 or scen.shape[1] != H or x_lo.size != H or x_hi.size != H or prices.size != H:
        raise ValueError("plan slice, scenarios and prices must share one horizon >= 1")
    spec, dt, gamma = cfg.spec, cfg.dt, cfg.gamma
    u_lo, u_hi, n_bad = _rate_box(x_lo, x_hi, scen, spec)
    fallback = "box clamped" if n_bad else None
    res = _lp(x, scen, prices, q_now, spec, gamma, dt, u_lo, u_hi)
    if res.status == 2:
        # the plan bounds cannot be met with the battery's energy; follow them as
        # closely as possible instead
        log.warning("local problem infeasible under plan bounds; minimizing bound violation")
        soft = 1e3 * (np.max(prices) * scen.shape[0] * dt + gamma * scen.shape[0] + 1.0)
        res = _lp(x, scen, prices, q_now, spec, gamma, dt, u_lo, u_hi, soft=soft)
        fallback = "soft bounds"
    if res.status != 0:
        log.error("local problem failed (%s); holding the battery idle", res.message)
        u = np.zeros(H)
        q = np.empty(H)
        prev = q_now
        for k in range(H):
            prev = spec.leakage * prev
            q[k] = prev
        return LCDecision(0.0, u, q, float("nan"), float("nan"), "idle")
    u = res.x[:H]
    q = res.x[H:2 * H]
    z = scen + u[None]
    cost = float(np.sum(prices[None] * z) * dt)
    dev = float(gamma * np.sum(np.abs(z - x[None])))
    u0 = float(np.clip(u[0], spec.u_min, spec.u_max))
    return LCDecision(u0, u, q, cost, dev, fallback)


def lc_step(history, plan, node: int, t: int, q_now: float, tariff: TouTariff, cfg: LCConfig,
            rng=None, start_hour: float = 0.0) -> LCDecision:
    """One receding-horizon step at clock ``t`` for storage ``node``.

    ``history`` is this node's own uncontrollable net load up to (not
    including) step ``t``; ``plan`` is the latest :class:`GlobalPlan`.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    try:
        x, lo, hi = plan.node_slice(node, t)
    except IndexError as err:
        raise StalePlan(str(err)) from err
    H = x.size
    hist = np.atleast_2d(np.asarray(history, dtype=float))
    fc = cfg.forecaster
    point = fc.point(hist, H, rng=rng, nodes=[node])
    stats = fc.residual_stats(hist, H, rng=rng)
    fan = generate_scenarios(point, stats, cfg.n_scenarios, rng=rng)
    prices = tariff.prices(np.arange(t, t + H), cfg.dt, start_hour)
    return solve_local(x, lo, hi, fan.scenarios[:, 0, :], q_now, prices, cfg)


class DecisionLog:
    """Per-step decision rows, written as CSV."""

    header = ["step", "node", "u_kw", "q_kwh", "z_kw", "x_kw", "cost_term", "deviation_term", "fallback"]

    def __init__(self):
        self.rows = []

    def add(self, step, node, decision: LCDecision, q_after, z, x):
        self.rows.append([step, node, decision.u_now, q_after, z, x, decision.cost_term,
                          decision.deviation_term, decision.fallback or ""])

    def write(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(self.header)
            wr.writerows(self.rows)
