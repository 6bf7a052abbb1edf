import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dercoord.storage import BatterySpec
from dercoord.tariff import (RateLimited, SimMetrics, TouTariff, arbitrage_profit, max_arbitrage_oracle,
                             price_at, sq_voltage_deviation)

TOU = TouTariff()


def test_prices():
    assert price_at(15, TOU) == 0.28
    assert price_at(10, TOU) == 0.20
    assert price_at(14, TOU) == 0.28        # window start is inclusive
    assert price_at(21, TOU) == 0.20        # window end is exclusive
    assert price_at(24 + 15, TOU) == 0.28
    assert price_at(1, TOU, start_hour=14.0) == 0.28


def test_tariff_validation():
    with pytest.raises(ValueError):
        TouTariff(0.1, 0.2)
    with pytest.raises(ValueError):
        TouTariff(peak_start=22, peak_end=21)


def test_sq_voltage_deviation():
    assert sq_voltage_deviation(np.ones((5, 3))) == 0.0
    assert sq_voltage_deviation([1.10]) == pytest.approx(0.0025)
    assert sq_voltage_deviation([0.90, 1.10]) == pytest.approx(0.005)


@given(st.lists(st.floats(0.5, 1.5), min_size=1, max_size=30))
def test_sq_voltage_deviation_matches_loop(v):
    ref = 0.0
    for x in v:
        if x > 1.05:
            ref += (x - 1.05) ** 2
        elif x < 0.95:
            ref += (0.95 - x) ** 2
    assert sq_voltage_deviation(v) == pytest.approx(ref, rel=1e-12, abs=1e-15)


def test_arbitrage_profit_examples():
    assert arbitrage_profit(np.zeros((2, 24)), TOU) == 0.0
    u = np.zeros(24)
    u[10] = 10.0       # charge at 0.20
    u[15] = -10.0      # discharge at 0.28
    assert arbitrage_profit(u, TOU) == pytest.approx(0.80)
    u = np.zeros(24)
    u[2], u[5] = 10.0, -10.0
    assert arbitrage_profit(u, TOU) <= 0.0


def test_inventory_adjustment():
    u = np.zeros(24)
    u[15] = -10.0       # sell 10 kWh that were already stored
    assert arbitrage_profit(u, TOU, q_start=[10.0], q_end=[0.0]) == pytest.approx(0.80)


def test_oracle_examples():
    assert max_arbitrage_oracle([BatterySpec.four_hour(10.0)], TOU, 30) == pytest.approx(24.0)
    assert max_arbitrage_oracle([], TOU, 30) == 0.0
    slow = BatterySpec(q_max=14.0, u_max=1.0, u_min=-1.0)
    with pytest.warns(RateLimited):
        limited = max_arbitrage_oracle([slow], TOU, 1)
    assert limited == pytest.approx(0.5 * 14.0 * 0.08)


def test_profit_below_ceiling():
    r = np.random.default_rng(0)
    spec = BatterySpec.four_hour(10.0)
    ceiling = max_arbitrage_oracle([spec], TOU, 3)
    for _ in range(50):
        u = np.zeros(72)
        q = 5.0
        for t in range(72):
            lo, hi = max(spec.u_min, -q), min(spec.u_max, spec.q_max - q)
            u[t] = r.uniform(lo, hi)
            q += u[t]
        p = arbitrage_profit(u, TOU, q_start=[5.0], q_end=[q])
        assert p <= ceiling + 1e-9


def test_metrics_merge():
    a = SimMetrics(1.0, 2.0, 3.0, 1, 10)
    b = SimMetrics(0.5, -1.0, 1.0, 2, 5)
    m = a.merge(b)
    assert m.sq_volt_dev == 1.5 and m.arbitrage_profit == 1.0 and m.violation_count == 3 and m.steps == 15
    assert set(m.as_dict()) >= {"sq_volt_dev", "arbitrage_profit", "energy_cost", "violation_count"}
