"""One global-controller cycle: scenarios, averaged plan and per-node bounds.

Run: python demos/02_global_plan.py   (about half a minute)
"""
# %%
import numpy as np

from dercoord.global_controller import CycleInputs, GCConfig, run_gc_cycle
from dercoord.network import load_fixture
from dercoord.sim import DeploymentPlan, generate_truth

net = load_fixture("bus6")
truth = generate_truth(net, DeploymentPlan(solar_penetration=0.6, storage_penetration=0.4, seed=0), 5, seed=0)
storage = truth.ders.battery_specs()
for j, spec in storage.items():
    print(f"bus {j}: {spec.q_max:.0f} kWh, +-{spec.u_max:.0f} kW")

# %% Pretend the forecast is yesterday's net load repeated; 10% residual spread
cfg = GCConfig(n_scenarios=6)
H = cfg.horizon
past = truth.net_load[:, 48:72]
point = np.tile(past, (1, H // 24 + 1))[:, :H]
point[0] = 0.0
reactive = np.tile(truth.reactive[:, 48:72], (1, H // 24 + 1))[:, :H]
inp = CycleInputs(point, reactive, np.zeros_like(point), 0.1 * np.abs(point),
                  np.array([0.5 * storage[j].q_max for j in sorted(storage)]), start_step=96, issued_at=96)
plan, shadow = run_gc_cycle(net, storage, inp, cfg, seed=1)

# %% The plan: storage-node net load, and how far each node may stray from it
hours = np.arange(24)
for k, j in enumerate(plan.nodes):
    print(f"\nbus {j}   hour:  " + " ".join(f"{h:6d}" for h in hours[::3]))
    print("  forecast load  " + " ".join(f"{v:6.0f}" for v in point[j, :24:3]))
    print("  plan x         " + " ".join(f"{v:6.0f}" for v in plan.x[k, :24:3]))
    print("  lower          " + " ".join(f"{v:6.0f}" for v in plan.lower[k, :24:3]))
    print("  upper          " + " ".join(f"{v:6.0f}" for v in plan.upper[k, :24:3]))
print("\nexpected charge at the next cycle (kWh):", np.round(shadow, 1))
print("diagnostics:", {k: round(v, 4) for k, v in plan.diagnostics.items()})
