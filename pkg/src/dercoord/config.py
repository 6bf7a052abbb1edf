"""Run configuration: a flat JSON document whose keys are the RunConfig fields.

Every field has a default, so ``{}`` is a valid config.  The echo written next
to each run's outputs spells out every field and reproduces the run exactly.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .global_controller import GCConfig
from .network import RadialNetwork, fixture_path, load_network
from .sim import CONTROLLERS, DeploymentPlan, SimConfig, generate_truth, run_simulation
from .tariff import TouTariff, max_arbitrage_oracle


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    network: str = "bus6"             # path to a network JSON, or a shipped fixture name
    days: float = 3.0                 # evaluation days after the warmup
    warmup_hours: int = 96
    dt_hours: float = 1.0             # local controller / plant step
    delta_gc: int = 24                # global cadence and data delay, steps
    delta_f: int = 48                 # forecast horizon past the next global cycle, steps
    lam: float = 1000.0
    v_tol: list = field(default_factory=lambda: [0.955, 1.045])
    gamma: float = 100.0
    global_scenarios: int = 24
    local_scenarios: int = 10
    peak_price: float = 0.28
    offpeak_price: float = 0.20
    peak_window: list = field(default_factory=lambda: [14.0, 21.0])
    solar_penetration: float = 0.6
    storage_penetration: float = 0.4
    der_node_fraction: float = 0.6
    storage_hours: float = 4.0
    initial_soc: float = 0.5
    controller: str = "two_layer"
    sigma: float | None = None        # artificial forecaster error; None = seasonal forecaster
    seeds: list = field(default_factory=lambda: [0])
    out: str = "out"
    workers: int = 0                  # 0 = available cores

    def __post_init__(self):
        if self.controller not in CONTROLLERS:
            raise ConfigError(f"controller must be one of {CONTROLLERS}, got {self.controller!r}")
        if self.dt_hours != 1.0:
            raise ConfigError("only hourly steps (dt_hours = 1) are supported")
        if self.days <= 0:
            raise ConfigError("days must be positive")
        if len(self.v_tol) != 2 or len(self.peak_window) != 2:
            raise ConfigError("v_tol and peak_window take two numbers each")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if not (math.isfinite(self.gamma) and self.gamma >= 0):
            raise ConfigError("gamma must be finite and >= 0")
        if self.global_scenarios < 1 or self.local_scenarios < 1:
            raise ConfigError("scenario counts must be >= 1")
        if self.sigma is not None and self.sigma < 0:
            raise ConfigError("sigma must be >= 0")
        try:
            self.tariff()
            self.deployment(0)
            self.gc_config()
            self.sim_config()
        except ConfigError:
            raise
        except ValueError as err:
            raise ConfigError(str(err)) from err

    # -- conversion ---------------------------------------------------------

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config fields: {', '.join(unknown)}")
        try:
            return cls(**doc)
        except TypeError as err:
            raise ConfigError(str(err)) from err

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"{p}: invalid JSON ({err})") from err
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "RunConfig":
        doc = self.to_dict()
        doc.update(changes)
        return RunConfig.from_dict(doc)

    def echo(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def digest(self) -> str:
        """Hash of everything that affects results (seeds, output and workers excluded)."""
        doc = {k: v for k, v in self.to_dict().items() if k not in ("seeds", "out", "workers")}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]

    @property
    def n_workers(self) -> int:
        return self.workers if self.workers > 0 else (os.cpu_count() or 1)

    def network_path(self) -> Path:
        p = Path(self.network)
        if p.suffix == ".json" or p.exists():
            return p
        return fixture_path(self.network)

    def load_network(self) -> RadialNetwork:
        p = self.network_path()
        if not p.is_file():
            raise ConfigError(f"network file not found: {p}")
        return load_network(p)

    def tariff(self) -> TouTariff:
        return TouTariff(self.peak_price, self.offpeak_price, *map(float, self.peak_window))

    def deployment(self, seed: int) -> DeploymentPlan:
        return DeploymentPlan(self.solar_penetration, self.storage_penetration,
                              self.der_node_fraction, int(seed), self.storage_hours)

    def gc_config(self, workers: int = 1) -> GCConfig:
        return GCConfig(delta_gc=self.delta_gc, delta_f=self.delta_f, n_scenarios=self.global_scenarios,
                        lam=self.lam, v_tol_minus=float(self.v_tol[0]), v_tol_plus=float(self.v_tol[1]),
                        tariff=self.tariff(), dt=self.dt_hours, workers=workers)

    def sim_config(self) -> SimConfig:
        return SimConfig(controller=self.controller, gamma=self.gamma, lc_scenarios=self.local_scenarios,
                         warmup=self.warmup_hours, sigma=self.sigma, storage_hours=self.storage_hours,
                         initial_soc=self.initial_soc)


METRIC_FIELDS = ["config_hash", "controller", "seed", "sq_volt_dev", "arbitrage_profit", "max_profit",
                 "violation_count", "energy_cost", "profile_deviation", "fallbacks", "truth_hash"]


def run_one(cfg: RunConfig, seed: int, out_dir=None, workers: int = 1):
    """Generate the truth for ``seed`` and simulate; returns (metrics row, SimResult, truth)."""
    net = cfg.load_network()
    total_days = cfg.warmup_hours / 24.0 + cfg.days
    truth = generate_truth(net, cfg.deployment(seed), total_days, seed=seed)
    res = run_simulation(net, truth, cfg.gc_config(workers), cfg.sim_config(), seed=seed, out_dir=out_dir)
    specs = truth.ders.battery_specs(cfg.storage_hours).values() if truth.ders else []
    m = res.metrics
    row = {"config_hash": cfg.digest(), "controller": cfg.controller, "seed": int(seed),
           "sq_volt_dev": m.sq_volt_dev, "arbitrage_profit": m.arbitrage_profit,
           "max_profit": max_arbitrage_oracle(list(specs), cfg.tariff(), cfg.days),
           "violation_count": m.violation_count, "energy_cost": m.energy_cost,
           "profile_deviation": m.profile_deviation, "fallbacks": res.fallbacks,
           "truth_hash": res.truth_digest}
    return row, res, truth


def sweep_cell(base: dict, cell: dict, seed: int) -> dict:
    """Sweep worker: ``base`` config document with the axis values of ``cell`` applied.

    Bind ``base`` with :func:`functools.partial` to get a picklable
    ``run_cell`` for :func:`dercoord.sim.sweep`.
    """
    cfg = RunConfig.from_dict({**base, **cell})
    row, _, _ = run_one(cfg, seed)
    return {k: float(v) for k, v in row.items() if k not in ("config_hash", "controller", "seed", "truth_hash")}
