"""Time-of-use tariff, the squared voltage deviation metric and profit accounting."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, fields

import numpy as np


class RateLimited(UserWarning):
    """A battery cannot complete a full daily cycle within the tariff windows."""


@dataclass(frozen=True)
class TouTariff:
    peak_price: float = 0.28
    offpeak_price: float = 0.20
    peak_start: float = 14.0
    peak_end: float = 21.0

    def __post_init__(self):
        if self.peak_price < self.offpeak_price:
            raise ValueError("peak price below off-peak price")
        if not (0 <= self.peak_start < self.peak_end <= 24):
            raise ValueError("peak window must satisfy 0 <= start < end <= 24")

    @property
    def spread(self) -> float:
        return self.peak_price - self.offpeak_price

    @property
    def peak_hours(self) -> float:
        return self.peak_end - self.peak_start

    def is_peak(self, hour) -> np.ndarray:
        h = np.mod(np.asarray(hour, dtype=float), 24.0)
        return (h >= self.peak_start) & (h < self.peak_end)

    def prices(self, steps, dt: float = 1.0, start_hour: float = 0.0) -> np.ndarray:
        """Price ($/kWh) for each step index, step 0 starting at ``start_hour``."""
        hours = start_hour + np.asarray(steps, dtype=float) * dt
        return np.where(self.is_peak(hours), self.peak_price, self.offpeak_price)


def price_at(t, tariff: TouTariff, dt: float = 1.0, start_hour: float = 0.0):
    """Price of step ``t``; the peak window is closed on the left, open on the right."""
    p = tariff.prices(np.atleast_1d(t), dt, start_hour)
    return float(p[0]) if np.ndim(t) == 0 else p


def sq_voltage_deviation(voltages, v_low: float = 0.95, v_high: float = 1.05) -> float:
    """Sum over samples of ``(max(v - v_high, 0) + max(v_low - v, 0))^2``."""
    v = np.abs(np.asarray(voltages))
    dev = np.maximum(v - v_high, 0.0) + np.maximum(v_low - v, 0.0)
    return float(np.sum(dev * dev))


def arbitrage_profit(u, tariff: TouTariff, dt: float = 1.0, start_step: int = 0,
                     start_hour: float = 0.0, q_start=None, q_end=None) -> float:
    """Storage arbitrage profit ``sum_i sum_t p_t * (-u_it) * dt``.

    ``u`` is (batteries x steps) or a single series, in kW.  When ``q_start``
    and ``q_end`` are given, the net drawdown of stored energy is charged at
    the off-peak price, so energy already in the battery at the start of the
    window does not count as profit.
    """
    u = np.atleast_2d(np.asarray(u, dtype=float))
    if u.size == 0:
        return 0.0
    p = tariff.prices(np.arange(start_step, start_step + u.shape[1]), dt, start_hour)
    profit = float(np.sum(p * -u) * dt)
    if q_start is not None and q_end is not None:
        drawdown = float(np.sum(np.asarray(q_start, dtype=float) - np.asarray(q_end, dtype=float)))
        profit -= tariff.offpeak_price * drawdown
    return profit


def max_arbitrage_oracle(specs, tariff: TouTariff, days: float, charge_hours: float | None = None) -> float:
    """Ceiling on arbitrage profit for lossless batteries under a two-tier tariff.

    One full cycle per day earns ``q_max * spread``.  When a battery's rates
    cannot move ``q_max`` within the charge window (default: all off-peak
    hours) or the peak window, the rate-limited throughput is used instead
    and :class:`RateLimited` is warned.
    """
    if charge_hours is None:
        charge_hours = 24.0 - tariff.peak_hours
    total = 0.0
    for sp in specs:
        throughput = min(sp.q_max - sp.q_min, sp.u_max * charge_hours, -sp.u_min * tariff.peak_hours)
        if throughput < sp.q_max - sp.q_min - 1e-12:
            warnings.warn(RateLimited(f"battery rate limits allow {throughput:.4g} of "
                                      f"{sp.q_max - sp.q_min:.4g} kWh per day"), stacklevel=2)
        total += throughput * tariff.spread * days
    return float(total)


@dataclass
class SimMetrics:
    sq_volt_dev: float = 0.0
    arbitrage_profit: float = 0.0
    energy_cost: float = 0.0
    violation_count: int = 0
    steps: int = 0
    profile_deviation: float = 0.0   # sum |realized - planned| net load at storage nodes, kW

    def merge(self, other: "SimMetrics") -> "SimMetrics":
        return SimMetrics(**{f.name: getattr(self, f.name) + getattr(other, f.name)
                             for f in fields(self)})

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}
