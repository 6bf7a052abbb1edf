"""Radial distribution network model in per-unit.

A network is a tree of buses rooted at the slack bus (id 0).  Line data is
kept per edge as a complex series admittance; no dense bus admittance matrix
is stored, although :func:`admittance_matrix` builds a sparse one on demand
for the AC power-flow solver.

Network files are JSON documents::

    {
      "base_kv": 12.47,
      "base_kva": 1000.0,
      "buses": [{"id": 0, "kind": "slack", "peak_kw": 0.0, "pf": 1.0}, ...],
      "edges": [{"from": 0, "to": 1, "r_pu": 0.01, "x_pu": 0.02}, ...]
    }

Unknown fields are rejected.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import scipy.sparse as sp

BUS_KINDS = ("slack", "load", "der")

_TOP_FIELDS = {"base_kv", "base_kva", "buses", "edges"}
_BUS_FIELDS = {"id", "kind", "peak_kw", "pf"}
_EDGE_FIELDS = {"from", "to", "r_pu", "x_pu"}


class ParseError(ValueError):
    """Malformed network document."""


class TopologyError(ValueError):
    """Network is not a tree rooted at a single slack bus."""


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    peak_load_kw: float = 0.0
    power_factor: float = 1.0
    has_storage: bool = False
    has_solar: bool = False

    def __post_init__(self):
        if self.kind not in BUS_KINDS:
            raise ValueError(f"bus {self.id}: unknown kind {self.kind!r}")
        if not (0.0 < self.power_factor <= 1.0):
            raise ValueError(f"bus {self.id}: power factor {self.power_factor} outside (0, 1]")
        if self.peak_load_kw < 0 or not np.isfinite(self.peak_load_kw):
            raise ValueError(f"bus {self.id}: peak load must be finite and >= 0")
        if self.kind == "der" and self.peak_load_kw <= 0:
            raise ValueError(f"bus {self.id}: DER buses need a nonzero load")

    @property
    def reactive_ratio(self) -> float:
        """Reactive-to-real demand ratio tan(acos(pf))."""
        pf = self.power_factor
        return float(np.sqrt(1.0 - pf * pf) / pf)


@dataclass(frozen=True)
class Edge:
    from_bus: int
    to_bus: int
    r_pu: float
    x_pu: float

    def __post_init__(self):
        if self.r_pu < 0 or not np.isfinite(self.r_pu) or not np.isfinite(self.x_pu):
            raise ValueError(f"edge {self.from_bus}-{self.to_bus}: bad impedance")
        if self.r_pu == 0 and self.x_pu == 0:
            raise ValueError(f"edge {self.from_bus}-{self.to_bus}: zero impedance")

    @property
    def admittance(self) -> complex:
        return 1.0 / complex(self.r_pu, self.x_pu)


@dataclass(frozen=True)
class RadialNetwork:
    """Immutable radial feeder.  Bus ids are dense ``0..N`` with bus 0 the slack."""

    buses: tuple[Bus, ...]
    edges: tuple[Edge, ...]
    base_voltage_kv: float
    base_power_kva: float
    name: str = ""
    _adjacency: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "edges", tuple(self.edges))
        if not (self.base_voltage_kv > 0 and np.isfinite(self.base_voltage_kv)):
            raise ValueError("base_kv must be positive")
        if not (self.base_power_kva > 0 and np.isfinite(self.base_power_kva)):
            raise ValueError("base_kva must be positive")
        _check_topology(self.buses, self.edges)
        adj: dict[int, list[tuple[int, complex]]] = {b.id: [] for b in self.buses}
        for e in self.edges:
            y = e.admittance
            adj[e.from_bus].append((e.to_bus, y))
            adj[e.to_bus].append((e.from_bus, y))
        object.__setattr__(self, "_adjacency", adj)

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def load_buses(self) -> list[int]:
        """Ids of buses with nonzero peak load."""
        return [b.id for b in self.buses if b.peak_load_kw > 0]

    @property
    def peak_loads_kw(self) -> np.ndarray:
        return np.array([b.peak_load_kw for b in self.buses])

    @property
    def reactive_ratios(self) -> np.ndarray:
        return np.array([b.reactive_ratio for b in self.buses])

    def to_per_unit(self, kw):
        return np.asarray(kw, dtype=float) / self.base_power_kva

    def to_physical(self, pu):
        return np.asarray(pu, dtype=float) * self.base_power_kva

    def with_ders(self, storage_buses=(), solar_buses=()) -> "RadialNetwork":
        """Copy with ``has_storage``/``has_solar`` flags set on the given buses."""
        storage, solar = set(storage_buses), set(solar_buses)
        buses = []
        for b in self.buses:
            kind = b.kind
            if b.id in storage or b.id in solar:
                kind = "der"
            elif kind == "der":
                kind = "load"
            buses.append(Bus(b.id, kind, b.peak_load_kw, b.power_factor,
                             b.id in storage, b.id in solar))
        return RadialNetwork(tuple(buses), self.edges, self.base_voltage_kv,
                             self.base_power_kva, self.name)


def _check_topology(buses, edges):
    n = len(buses)
    if n == 0:
        raise TopologyError("network has no buses")
    ids = [b.id for b in buses]
    if ids != list(range(n)):
        raise TopologyError("bus ids must be dense 0..N in order")
    slack = [b.id for b in buses if b.kind == "slack"]
    if slack != [0]:
        raise TopologyError(f"exactly one slack bus with id 0 required, found {slack}")
    if len(edges) != n - 1:
        raise TopologyError(f"{n} buses need {n - 1} edges for a tree, got {len(edges)}")
    adj = {i: [] for i in range(n)}
    for e in edges:
        for end in (e.from_bus, e.to_bus):
            if end not in adj:
                raise TopologyError(f"edge references unknown bus {end}")
        if e.from_bus == e.to_bus:
            raise TopologyError(f"self loop at bus {e.from_bus}")
        adj[e.from_bus].append(e.to_bus)
        adj[e.to_bus].append(e.from_bus)
    seen = bfs_order(adj, 0)
    if len(seen) != n:
        missing = sorted(set(range(n)) - set(seen))
        # n-1 edges and not connected implies a cycle somewhere
        raise TopologyError(f"network not radial: buses {missing} unreachable from slack (cycle or island)")


def bfs_order(adj, root=0):
    seen = [root]
    mark = {root}
    queue = deque([root])
    while queue:
        i = queue.popleft()
        for j in adj[i]:
            j = j[0] if isinstance(j, tuple) else j
            if j not in mark:
                mark.add(j)
                seen.append(j)
                queue.append(j)
    return seen


def neighbors(net: RadialNetwork, i: int) -> list[tuple[int, complex]]:
    """Adjacent buses of ``i`` with the connecting edge admittances."""
    if not 0 <= i < net.n_buses:
        raise IndexError(f"bus {i} out of range 0..{net.n_buses - 1}")
    return list(net._adjacency[i])


def parents(net: RadialNetwork) -> np.ndarray:
    """Parent bus of every bus in the tree rooted at the slack (-1 for the slack)."""
    par = np.full(net.n_buses, -1, dtype=int)
    for i in bfs_order(net._adjacency, 0):
        for j, _ in net._adjacency[i]:
            if j != 0 and par[j] == -1:
                par[j] = i
    return par


def admittance_matrix(net: RadialNetwork) -> sp.csr_matrix:
    """Sparse bus admittance matrix built from the series admittances."""
    n = net.n_buses
    rows, cols, vals = [], [], []
    for e in net.edges:
        y = e.admittance
        f, t = e.from_bus, e.to_bus
        rows += [f, t, f, t]
        cols += [f, t, t, f]
        vals += [y, y, -y, -y]
    return sp.csr_matrix((np.array(vals, dtype=complex), (rows, cols)), shape=(n, n))


def network_from_dict(doc: dict, name: str = "") -> RadialNetwork:
    if not isinstance(doc, dict):
        raise ParseError("network document must be a mapping")
    unknown = set(doc) - _TOP_FIELDS
    if unknown:
        raise ParseError(f"unknown fields {sorted(unknown)}")
    missing = _TOP_FIELDS - set(doc)
    if missing:
        raise ParseError(f"missing fields {sorted(missing)}")
    try:
        buses = []
        for rec in sorted(doc["buses"], key=lambda r: r["id"]):
            extra = set(rec) - _BUS_FIELDS
            if extra:
                raise ParseError(f"bus {rec.get('id')}: unknown fields {sorted(extra)}")
            kind = rec["kind"]
            buses.append(Bus(int(rec["id"]), kind, float(rec.get("peak_kw", 0.0)),
                             float(rec.get("pf", 1.0)), has_storage=kind == "der",
                             has_solar=kind == "der"))
        edges = []
        for rec in doc["edges"]:
            extra = set(rec) - _EDGE_FIELDS
            if extra:
                raise ParseError(f"edge {rec}: unknown fields {sorted(extra)}")
            edges.append(Edge(int(rec["from"]), int(rec["to"]), float(rec["r_pu"]),
                              float(rec["x_pu"])))
    except (KeyError, TypeError) as exc:
        raise ParseError(f"malformed network record: {exc!r}") from exc
    return RadialNetwork(tuple(buses), tuple(edges), float(doc["base_kv"]),
                         float(doc["base_kva"]), name)


def network_to_dict(net: RadialNetwork) -> dict:
    return {
        "base_kv": net.base_voltage_kv,
        "base_kva": net.base_power_kva,
        "buses": [{"id": b.id, "kind": b.kind, "peak_kw": b.peak_load_kw,
                   "pf": b.power_factor} for b in net.buses],
        "edges": [{"from": e.from_bus, "to": e.to_bus, "r_pu": e.r_pu,
                   "x_pu": e.x_pu} for e in net.edges],
    }


def load_network(path) -> RadialNetwork:
    """Read and validate a network file."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return network_from_dict(doc, name=path.stem)


def save_network(net: RadialNetwork, path) -> None:
    Path(path).write_text(json.dumps(network_to_dict(net), indent=2) + "\n")


def fixture_path(name: str) -> Path:
    """Path of a shipped test feeder (``bus2``, ``bus3``, ``bus6``, ``bus12``)."""
    return Path(str(resources.files("dercoord") / "fixtures" / f"{name}.json"))


def load_fixture(name: str) -> RadialNetwork:
    return load_network(fixture_path(name))
