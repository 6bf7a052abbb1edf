"""Battery dynamics and their constraint blocks.

Two plant models are provided: the lossless-with-leakage model
``q' = eta * q + u * dt`` used by all controllers, and a split
charge/discharge model with one-way efficiency ``mu``.  The plant never clips:
a step that would leave ``[q_min, q_max]`` raises :class:`BoundsViolation`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conic import ProgramBuilder

# absolute slack when checking the plant against its bounds (kWh / kW)
BOUNDS_TOL = 1e-6


class BoundsViolation(RuntimeError):
    pass


@dataclass(frozen=True)
class BatterySpec:
    q_max: float
    u_max: float
    u_min: float
    q_min: float = 0.0
    leakage: float = 1.0
    efficiency: float = 1.0

    def __post_init__(self):
        if not self.q_max > 0:
            raise ValueError("q_max must be positive")
        if not 0 <= self.q_min <= self.q_max:
            raise ValueError("need 0 <= q_min <= q_max")
        if not (self.u_min < 0 < self.u_max):
            raise ValueError("need u_min < 0 < u_max")
        if not 0 <= self.leakage <= 1:
            raise ValueError("leakage coefficient must lie in [0, 1]")
        if not 0 < self.efficiency <= 1:
            raise ValueError("efficiency must lie in (0, 1]")

    @classmethod
    def four_hour(cls, q_max: float, **kw) -> "BatterySpec":
        """Battery whose rate limits are ``q_max / 4`` per hour in both directions."""
        rate = q_max / 4.0
        return cls(q_max=q_max, u_max=rate, u_min=-rate, **kw)


@dataclass(frozen=True)
class BatteryState:
    q: float
    owner: int = -1


def step_simple(state: BatteryState, u: float, dt: float, spec: BatterySpec,
                tol: float = BOUNDS_TOL) -> BatteryState:
    if u > spec.u_max + tol or u < spec.u_min - tol:
        raise BoundsViolation(f"bus {state.owner}: rate {u:.6g} kW outside [{spec.u_min}, {spec.u_max}]")
    q = spec.leakage * state.q + u * dt
    _check_charge(q, spec, state.owner, tol)
    return BatteryState(q, state.owner)


def step_split(state: BatteryState, u_charge: float, u_discharge: float, dt: float,
               spec: BatterySpec, tol: float = BOUNDS_TOL) -> BatteryState:
    """Step with separate charge/discharge rates (both >= 0, at most one nonzero)."""
    if u_charge < 0 or u_discharge < 0:
        raise ValueError("charge and discharge rates must be nonnegative")
    if u_charge > 0 and u_discharge > 0:
        raise ValueError("cannot charge and discharge in the same step")
    if u_charge > spec.u_max + tol or -u_discharge < spec.u_min - tol:
        raise BoundsViolation(f"bus {state.owner}: rate outside limits")
    mu = spec.efficiency
    q = spec.leakage * state.q + mu * u_charge * dt - u_discharge / mu * dt
    _check_charge(q, spec, state.owner, tol)
    return BatteryState(q, state.owner)


def _check_charge(q, spec, owner, tol):
    if q > spec.q_max + tol or q < spec.q_min - tol:
        raise BoundsViolation(f"bus {owner}: charge {q:.6g} kWh outside [{spec.q_min}, {spec.q_max}]")


def replay(q0: float, u, dt: float, spec: BatterySpec) -> np.ndarray:
    """Charge trajectory ``q_1..q_T`` implied by a rate sequence (no bound checks)."""
    u = np.asarray(u, dtype=float)
    q = np.empty(u.size)
    prev = q0
    for t, ut in enumerate(u):
        prev = spec.leakage * prev + ut * dt
        q[t] = prev
    return q


@dataclass
class StorageBlock:
    u: np.ndarray       # (n_batteries, T) rate variables
    q: np.ndarray       # (n_batteries, T) end-of-step charge variables
    rows: np.ndarray    # (n_batteries, T) recurrence rows
    scale: float


def build_storage_constraints(builder: ProgramBuilder, specs, horizon: int, q_init,
                              dt: float = 1.0, scale: float = 1.0) -> StorageBlock:
    """Recurrence ``q_t = eta q_{t-1} + u_t dt`` plus rate and charge boxes.

    Quantities inside the program are divided by ``scale`` (e.g. the network
    base power) so rates and charges live on the same footing as per-unit
    injections.
    """
    specs = list(specs)
    T = int(horizon)
    if T < 1:
        raise ValueError("horizon must be >= 1")
    nb = len(specs)
    q_init = np.asarray(q_init, dtype=float).reshape(-1)
    if q_init.size != nb:
        raise ValueError("one initial charge per battery required")
    lo_u = np.array([[sp.u_min / scale] * T for sp in specs]).reshape(nb, T)
    hi_u = np.array([[sp.u_max / scale] * T for sp in specs]).reshape(nb, T)
    lo_q = np.array([[sp.q_min / scale] * T for sp in specs]).reshape(nb, T)
    hi_q = np.array([[sp.q_max / scale] * T for sp in specs]).reshape(nb, T)
    u = builder.add_variables((nb, T), lower=lo_u, upper=hi_u)
    q = builder.add_variables((nb, T), lower=lo_q, upper=hi_q)
    rows = np.zeros((nb, T), dtype=int)
    for k, spec in enumerate(specs):
        eta = spec.leakage
        # q_1 - u_1 dt = eta q_0
        r0 = builder.add_rows(np.array([[q[k, 0], u[k, 0]]]), [1.0, -dt], [eta * q_init[k] / scale])
        rows[k, 0] = r0[0]
        if T > 1:
            cols = np.stack([q[k, 1:], q[k, :-1], u[k, 1:]], 1)
            rows[k, 1:] = builder.add_rows(cols, [1.0, -eta, -dt], np.zeros(T - 1))
    return StorageBlock(u, q, rows, float(scale))
