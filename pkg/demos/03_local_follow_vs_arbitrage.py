"""The local controller between following the plan and chasing prices.

A single battery sees a flat plan profile and a time-of-use tariff.  With a
small gamma it arbitrages inside the plan bounds; with a large one it sticks
to the profile.

Run: python demos/03_local_follow_vs_arbitrage.py
"""
# %%
import numpy as np

from dercoord.local_controller import LCConfig, solve_local
from dercoord.storage import BatterySpec
from dercoord.tariff import TouTariff

spec = BatterySpec.four_hour(200.0)
tariff = TouTariff()
H = 24
d = 40 + 15 * np.sin(2 * np.pi * (np.arange(H) - 14) / 24)       # uncontrollable load
x = d.copy()                                                    # plan: battery idle
lo, hi = x - 40.0, x + 40.0                                     # plan bounds
rng = np.random.default_rng(0)
scenarios = d[None] + rng.normal(0, 3, (10, H))
prices = tariff.prices(np.arange(H))

# %%
print("gamma    cost $   |z-x| kWh   charge schedule (kW, every 3 h)")
for gamma in (0.0, 0.01, 0.1, 1.0, 100.0):
    dec = solve_local(x, lo, hi, scenarios, 100.0, prices, LCConfig(spec, gamma=gamma))
    z = scenarios + dec.planned_u[None]
    dev = np.abs(z - x[None]).sum() / len(scenarios)
    print(f"{gamma:6g} {dec.cost_term / len(scenarios):9.2f} {dev:10.1f}   "
          + " ".join(f"{u:5.0f}" for u in dec.planned_u[::3]))
