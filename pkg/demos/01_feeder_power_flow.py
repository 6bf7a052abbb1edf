"""Power flow on the shipped 6-bus feeder, exact and relaxed.

Run: python demos/01_feeder_power_flow.py
"""
# %%
import numpy as np

from dercoord.network import load_fixture
from dercoord.opf import relaxation_gap, solve_ac_oracle, solve_socp_flow

net = load_fixture("bus6")
print(f"{net.n_buses} buses, base {net.base_power_kva:.0f} kVA, peak loads (kW): {net.peak_loads_kw[1:]}")

# %% Peak evening load: injections are minus the net load, in per unit
load = net.peak_loads_kw + 1j * net.peak_loads_kw * net.reactive_ratios
evening = -load[1:] / net.base_power_kva
pf = solve_ac_oracle(net, evening)
print("evening |v| (Newton):     ", np.round(pf.magnitudes, 4))
print(f"slack import {pf.slack_power.real * net.base_power_kva:.1f} kW"
      f" for {net.peak_loads_kw.sum():.0f} kW of load")

# %% Midday with rooftop solar: three buses export, the voltage climbs
noon = 0.3 * load.copy()
noon[[2, 4, 5]] -= np.array([450.0, 400.0, 420.0])
pf_noon = solve_ac_oracle(net, -noon[1:] / net.base_power_kva)
print("midday |v| (Newton):      ", np.round(pf_noon.magnitudes, 4))

# %% The relaxation used by the global controller reproduces both profiles
for name, inj in (("evening", evening), ("midday", -noon[1:] / net.base_power_kva)):
    res = solve_socp_flow(net, inj)
    print(f"{name:8s} sqrt(w) (relaxed): {np.round(np.sqrt(res.values.w), 4)}"
          f"  gap {relaxation_gap(net, res.values):.1e}")
