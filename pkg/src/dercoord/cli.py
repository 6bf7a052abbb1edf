"""Batch entry point.

    dercoord run <config.json> [--seed N] [--workers N] [--out DIR]
    dercoord sweep <config.json> --axes '{"gamma": [0, 10, 100]}' [...]
    dercoord validate <network.json | fixture name>

Failures print one JSON object ``{"error": ..., "message": ...}`` on stderr
and exit with a code from :data:`EXIT_CODES`.
"""
from __future__ import annotations

import argparse
import csv
import functools
import itertools
import json
import logging
import sys
import warnings
from pathlib import Path

from .config import METRIC_FIELDS, ConfigError, RunConfig, run_one, sweep_cell
from .network import ParseError, TopologyError, fixture_path, load_network
from .opf import NoConvergence, solve_ac_oracle
from .sim import sweep, write_sweep_table

EXIT_CODES = {"ConfigError": 2, "ParseError": 3, "TopologyError": 3, "NoConvergence": 4, "Failure": 5}

log = logging.getLogger("dercoord")


def _fail(err: Exception) -> int:
    kind = type(err).__name__
    code = EXIT_CODES.get(kind, EXIT_CODES["Failure"])
    print(json.dumps({"error": kind, "message": str(err), "exit_code": code}), file=sys.stderr)
    return code


def _apply_flags(cfg: RunConfig, args) -> RunConfig:
    changes = {}
    if args.seed is not None:
        changes["seeds"] = [args.seed]
    if args.workers is not None:
        changes["workers"] = args.workers
    if args.out is not None:
        changes["out"] = args.out
    return cfg.replace(**changes) if changes else cfg


def _write_metrics(rows, path):
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        wr.writeheader()
        for r in rows:
            wr.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def cmd_run(args) -> int:
    cfg = _apply_flags(RunConfig.load(args.config), args)
    cfg.load_network()      # fail before writing anything
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.echo(out / "config_echo.json")
    rows = []
    for seed in cfg.seeds:
        sub = out / f"seed_{seed}"
        row, res, truth = run_one(cfg, seed, out_dir=sub, workers=cfg.n_workers)
        res.write_run_log(sub / "run_log.csv", truth, cfg.tariff(), cfg.dt_hours)
        rows.append(row)
        print(f"seed {seed}: sq_volt_dev={row['sq_volt_dev']:.6g} profit={row['arbitrage_profit']:.2f}"
              f" (max {row['max_profit']:.2f}) violations={row['violation_count']}")
    _write_metrics(rows, out / "metrics.csv")
    print(f"wrote {out / 'metrics.csv'}")
    return 0


def parse_axes(spec: str) -> list:
    """Axes as a JSON object of field -> list of values; cells are the cartesian product."""
    try:
        axes = json.loads(spec)
    except json.JSONDecodeError as err:
        raise ConfigError(f"--axes is not valid JSON: {err}") from err
    if not isinstance(axes, dict) or not axes:
        raise ConfigError("--axes must be a nonempty JSON object of field -> list of values")
    known = set(RunConfig.__dataclass_fields__)
    for k, v in axes.items():
        if k not in known:
            raise ConfigError(f"unknown sweep axis: {k}")
        if not isinstance(v, list) or not v:
            raise ConfigError(f"axis {k} needs a nonempty list of values")
    names = list(axes)
    return [dict(zip(names, combo)) for combo in itertools.product(*(axes[n] for n in names))]


def cmd_sweep(args) -> int:
    cfg = _apply_flags(RunConfig.load(args.config), args)
    cells = parse_axes(args.axes)
    for c in cells:
        cfg.replace(**c).load_network()     # validate every cell before running any
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.echo(out / "config_echo.json")
    (out / "axes.json").write_text(json.dumps(json.loads(args.axes), indent=2) + "\n")
    rows = sweep(cells, cfg.seeds, functools.partial(sweep_cell, cfg.to_dict()), workers=cfg.n_workers)
    write_sweep_table(rows, out / "sweep.csv")
    failed = sum(len(r.errors) for r in rows)
    print(f"wrote {out / 'sweep.csv'} ({len(rows)} cells, {failed} failed runs)")
    return 0 if failed == 0 else EXIT_CODES["Failure"]


def cmd_validate(args) -> int:
    p = Path(args.network)
    if not p.exists() and p.suffix != ".json":
        p = fixture_path(args.network)
    if not p.is_file():
        raise ConfigError(f"network file not found: {p}")
    net = load_network(p)
    inj = -(net.peak_loads_kw + 1j * net.peak_loads_kw * net.reactive_ratios) / net.base_power_kva
    pf = solve_ac_oracle(net, inj[1:])
    v = pf.magnitudes
    print(f"OK {net.n_buses} buses, {len(net.edges)} edges; peak-load voltage "
          f"min {v.min():.4f} pu (bus {int(v.argmin())}) max {v.max():.4f} pu")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dercoord", description="Two-layer DER coordination simulator")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    def common(p):
        p.add_argument("config")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--out")

    common(sub.add_parser("run", help="simulate one config"))
    sp = sub.add_parser("sweep", help="simulate a grid of configs")
    common(sp)
    sp.add_argument("--axes", required=True, help='JSON object, e.g. \'{"gamma": [0, 100]}\'')
    vp = sub.add_parser("validate", help="check a network and solve it at peak load")
    vp.add_argument("network")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not args.verbose:
        warnings.simplefilter("ignore")
    handler = {"run": cmd_run, "sweep": cmd_sweep, "validate": cmd_validate}[args.cmd]
    try:
        return handler(args)
    except (ConfigError, ParseError, TopologyError, NoConvergence) as err:
        return _fail(err)
    except Exception as err:  # any other failure still gets a structured message
        log.debug("unhandled failure", exc_info=True)
        return _fail(err)


if __name__ == "__main__":
    sys.exit(main())
