"""Sweep the profile-following weight and aggregate over seeds.

The same table comes out of
    dercoord sweep cfg.json --axes '{"gamma": [0, 1, 10, 100, 1000000]}'

Run: python demos/05_gamma_sweep.py   (a few minutes)
"""
# %%
import functools

from dercoord.config import RunConfig, sweep_cell
from dercoord.sim import sweep

base = RunConfig(days=2.0, global_scenarios=12, seeds=[0, 1]).to_dict()
cells = [{"gamma": g} for g in (0.0, 1.0, 10.0, 100.0, 1e6)]
rows = sweep(cells, base["seeds"], functools.partial(sweep_cell, base))

# %%
print("gamma      deviation kWh   profit $    sq dev")
for r in rows:
    m = r.mean
    print(f"{r.cell['gamma']:9g} {m['profile_deviation']:12.0f} {m['arbitrage_profit']:10.2f}"
          f" {m['sq_volt_dev']:10.2e}")
