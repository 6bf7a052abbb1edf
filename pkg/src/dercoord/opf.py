"""Relaxed AC power flow blocks and the exact AC power-flow oracle.

Conventions
-----------
* ``s_i`` is the complex power *injected* at bus ``i`` (generation minus
  consumption), per unit.  Loads therefore enter as negative injections and
  the slack injection ``s_0`` is the power imported from the upstream grid.
* ``W = v v^H``.  Per bus we keep ``w_ii = |v_i|^2``; per edge ``(f, t)`` we
  keep ``c + j s = W_ft = v_f conj(v_t)``.
* Power balance: ``s_i = sum_j (W_ii - W_ij) conj(y_ij)``.
* The 2x2 PSD condition per edge, ``|W_ft|^2 <= W_ff W_tt``, is the cone.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .conic import DimensionError, ProgramBuilder, SolverSettings, solve
from .network import RadialNetwork, admittance_matrix

W_MIN = 0.25
W_MAX = 4.0


class NoConvergence(RuntimeError):
    pass


@dataclass
class WBlock:
    """Variable indices of the relaxed voltage matrix over a horizon."""

    w: np.ndarray          # (n_buses, T)
    c: np.ndarray          # (n_edges, T) real part of W_ft
    s: np.ndarray          # (n_edges, T) imaginary part of W_ft
    p_inj: np.ndarray      # (n_buses, T) real injection handles
    q_inj: np.ndarray      # (n_buses, T) reactive injection handles
    balance_rows: np.ndarray  # (2 * n_buses, T)
    cones: list

    @property
    def horizon(self) -> int:
        return self.w.shape[1]


@dataclass
class WValues:
    """Numerical values of a :class:`WBlock` (one or more steps)."""

    w: np.ndarray
    c: np.ndarray
    s: np.ndarray

    @classmethod
    def from_solution(cls, block: WBlock, x) -> "WValues":
        x = np.asarray(x)
        return cls(x[block.w], x[block.c], x[block.s])


@dataclass
class PenaltyBlock:
    over: np.ndarray
    under: np.ndarray
    band: np.ndarray
    buses: np.ndarray
    weight: float
    v_tol_plus: float
    v_tol_minus: float

    def value(self, x) -> float:
        """Penalty ``lambda * sum(over^2 + under^2)`` at a solution vector."""
        if self.over.size == 0:
            return 0.0
        x = np.asarray(x)
        return float(self.weight * (np.sum(x[self.over] ** 2) + np.sum(x[self.under] ** 2)))


@dataclass
class PowerFlowSolution:
    voltages: np.ndarray
    injections: np.ndarray
    slack_power: complex
    iterations: int = 0
    residual: float = 0.0

    @property
    def magnitudes(self) -> np.ndarray:
        return np.abs(self.voltages)


def build_flow_constraints(builder: ProgramBuilder, net: RadialNetwork, horizon: int,
                           p_inj=None, q_inj=None, w_bounds=(W_MIN, W_MAX)) -> WBlock:
    """Add the relaxed power-flow model for ``horizon`` steps to ``builder``.

    ``p_inj``/``q_inj`` are ``(n_buses, horizon)`` index arrays of existing
    injection variables; free variables are created when omitted.  The slack
    bus has ``w_00 = 1``.  Every bus shares one ``w_ii`` variable per step,
    which makes the consistency of ``w_ii`` across neighbouring edge blocks
    hold by construction.
    """
    nb, ne, T = net.n_buses, len(net.edges), int(horizon)
    if T < 1:
        raise DimensionError("horizon must be at least one step")
    for name, h in (("p_inj", p_inj), ("q_inj", q_inj)):
        if h is not None and np.shape(h) != (nb, T):
            raise DimensionError(f"{name} has shape {np.shape(h)}, expected {(nb, T)}")
    if p_inj is None:
        p_inj = builder.add_variables((nb, T))
    if q_inj is None:
        q_inj = builder.add_variables((nb, T))
    w = builder.add_variables((nb, T), lower=w_bounds[0], upper=w_bounds[1])
    builder.set_bounds(w[0], 1.0, 1.0)
    c = builder.add_variables((ne, T), lower=-w_bounds[1], upper=w_bounds[1])
    s = builder.add_variables((ne, T), lower=-w_bounds[1], upper=w_bounds[1])

    inc: list[list[tuple[int, float, float, float]]] = [[] for _ in range(nb)]
    for k, e in enumerate(net.edges):
        y = e.admittance
        inc[e.from_bus].append((k, y.real, y.imag, 1.0))
        inc[e.to_bus].append((k, y.real, y.imag, -1.0))

    rows = np.zeros((2 * nb, T), dtype=int)
    for i in range(nb):
        ks = np.array([a[0] for a in inc[i]], dtype=int)
        g = np.array([a[1] for a in inc[i]])
        b = np.array([a[2] for a in inc[i]])
        sgn = np.array([a[3] for a in inc[i]])
        # P_i - sum_j [g (W_ii - c) - b * sgn * s] = 0
        cols_p = np.column_stack([p_inj[i], w[i]] + [c[k] for k in ks] + [s[k] for k in ks])
        vals_p = np.concatenate([[1.0, -g.sum()], g, b * sgn])
        rows[i] = builder.add_rows(cols_p, vals_p, np.zeros(T))
        # Q_i - sum_j [-b (W_ii - c) - g * sgn * s] = 0
        cols_q = np.column_stack([q_inj[i], w[i]] + [c[k] for k in ks] + [s[k] for k in ks])
        vals_q = np.concatenate([[1.0, b.sum()], -b, g * sgn])
        rows[nb + i] = builder.add_rows(cols_q, vals_q, np.zeros(T))

    first_cone = len(builder.cones)
    for k, e in enumerate(net.edges):
        add_psd2_cone(builder, w[e.from_bus], w[e.to_bus], c[k], s[k], _edge_cone_scale(net, e))
    cones = list(range(first_cone, len(builder.cones)))
    return WBlock(w, c, s, p_inj, q_inj, rows, cones)


def _edge_cone_scale(net: RadialNetwork, edge) -> float:
    """Balancing factor ~ 2 / |v_f - v_t| at a typical operating point."""
    total = max(net.to_per_unit(net.peak_loads_kw).sum(), 0.05)
    drop = abs(complex(edge.r_pu, edge.x_pu)) * total
    return float(np.clip(2.0 / max(drop, 1e-4), 1.0, 1e4))


def add_psd2_cone(builder: ProgramBuilder, wf, wt, c, s, scale: float = 1.0):
    """Encode ``c^2 + s^2 <= wf * wt`` for index arrays over steps.

    Uses the equivalent rotated form
    ``(wf - wt)^2 + 4 s^2 <= (wf + wt - 2c) (wf + wt + 2c)``; the first factor
    is ``|v_f - v_t|^2`` at a rank-one point and is small, so the factors are
    balanced by ``scale`` (``u -> scale * u``, ``v -> v / scale``), which keeps
    the cone residual meaningful relative to the voltage drop.  Members are
    ``((wf - wt)/2, s, (K u - v/K)/4)`` with head ``(K u + v/K)/4``.
    """
    wf, wt, c, s = (np.asarray(a, dtype=int).reshape(-1) for a in (wf, wt, c, s))
    T = wf.size
    K = float(scale)
    d = builder.add_variables(T)
    h = builder.add_variables(T)
    m = builder.add_variables(T, lower=0.0)
    builder.add_rows(np.stack([d, wf, wt], 1), [1.0, -0.5, 0.5], np.zeros(T))
    # u = wf + wt - 2c, v = wf + wt + 2c
    a, b = K / 4.0, 1.0 / (4.0 * K)
    builder.add_rows(np.stack([h, wf, wt, c], 1), [1.0, -(a - b), -(a - b), 2 * (a + b)], np.zeros(T))
    builder.add_rows(np.stack([m, wf, wt, c], 1), [1.0, -(a + b), -(a + b), 2 * (a - b)], np.zeros(T))
    for i in range(T):
        builder.cones.append(np.array([d[i], s[i], h[i], m[i]]))


def build_voltage_penalty(builder: ProgramBuilder, block: WBlock, weight: float,
                          v_tol_plus: float = 1.045, v_tol_minus: float = 0.955,
                          buses=None, steps=None) -> PenaltyBlock:
    """Hinge-squared penalty on squared voltages outside ``[v_tol_minus^2, v_tol_plus^2]``.

    Each (bus, step) gets ``w = V-^2 + band + over - under`` with
    ``0 <= band <= V+^2 - V-^2`` and ``over, under >= 0``; the cost is
    ``weight * (over^2 + under^2)``, so at an optimum with ``weight > 0``
    ``over = max(w - V+^2, 0)`` and ``under = max(V-^2 - w, 0)``.
    A zero weight adds nothing.
    """
    if not v_tol_minus < v_tol_plus:
        raise ValueError(f"inverted voltage band [{v_tol_minus}, {v_tol_plus}]")
    if weight < 0:
        raise ValueError("penalty weight must be nonnegative")
    nb = block.w.shape[0]
    if buses is None:
        buses = np.arange(1, nb)  # w_00 is pinned to 1, always inside the band
    buses = np.asarray(buses, dtype=int)
    w = block.w[buses]
    if steps is not None:
        w = w[:, steps]
    empty = np.zeros((0,), dtype=int)
    if weight == 0 or w.size == 0:
        return PenaltyBlock(empty, empty, empty, buses, 0.0, v_tol_plus, v_tol_minus)
    width = v_tol_plus ** 2 - v_tol_minus ** 2
    over = builder.add_variables(w.shape, lower=0.0)
    under = builder.add_variables(w.shape, lower=0.0)
    band = builder.add_variables(w.shape, lower=0.0, upper=width)
    cols = np.stack([w.reshape(-1), over.reshape(-1), under.reshape(-1), band.reshape(-1)], 1)
    builder.add_rows(cols, [1.0, -1.0, 1.0, -1.0], np.full(w.size, v_tol_minus ** 2))
    builder.add_quadratic_cost(over, 2.0 * weight)
    builder.add_quadratic_cost(under, 2.0 * weight)
    return PenaltyBlock(over, under, band, buses, float(weight), v_tol_plus, v_tol_minus)


def squared_voltage_penalty(w, weight, v_tol_plus=1.045, v_tol_minus=0.955) -> float:
    """Direct evaluation of ``weight * sum (hinge of w outside the squared band)^2``."""
    w = np.asarray(w, dtype=float)
    dev = np.maximum(w - v_tol_plus ** 2, 0.0) + np.maximum(v_tol_minus ** 2 - w, 0.0)
    return float(weight * np.sum(dev ** 2))


# ---------------------------------------------------------------------------
# exact AC power flow


def solve_ac_oracle(net: RadialNetwork, injections, tol: float = 1e-10,
                    max_iter: int = 50) -> PowerFlowSolution:
    """Newton-Raphson solution of the AC power-flow equations.

    ``injections`` holds the complex injection (pu) of every non-slack bus,
    either length ``N`` or ``N + 1`` (the slack entry is ignored).  The slack
    is held at ``1∠0``.  Raises :class:`NoConvergence` after ``max_iter``
    iterations.
    """
    nb = net.n_buses
    s = np.asarray(injections, dtype=complex).reshape(-1)
    if s.size == nb - 1:
        s = np.concatenate([[0.0], s])
    if s.size != nb:
        raise DimensionError(f"expected {nb - 1} or {nb} injections, got {s.size}")
    if not np.all(np.isfinite(s)):
        raise ValueError("injections must be finite")
    Y = admittance_matrix(net).tocsc()
    pq = np.arange(1, nb)
    V = np.ones(nb, dtype=complex)
    npq = pq.size
    res = np.inf
    for it in range(max_iter + 1):
        mis = V * np.conj(Y @ V) - s
        F = np.concatenate([mis[pq].real, mis[pq].imag])
        res = np.max(np.abs(F), initial=0.0)
        if not np.isfinite(res):
            break
        if res <= tol:
            S = V * np.conj(Y @ V)
            return PowerFlowSolution(V, S, complex(S[0]), it, float(res))
        if it == max_iter:
            break
        dS_dVa, dS_dVm = _dS_dV(Y, V)
        J11 = dS_dVa[pq][:, pq].real
        J12 = dS_dVm[pq][:, pq].real
        J21 = dS_dVa[pq][:, pq].imag
        J22 = dS_dVm[pq][:, pq].imag
        J = sp.bmat([[J11, J12], [J21, J22]], format="csc")
        try:
            dx = spla.spsolve(J, -F)
        except RuntimeError as exc:
            raise NoConvergence(f"singular Jacobian at iteration {it}") from exc
        if not np.all(np.isfinite(dx)):
            break
        Va = np.angle(V)
        Vm = np.abs(V)
        Va[pq] += dx[:npq]
        Vm[pq] += dx[npq:]
        if np.any(Vm <= 0):
            break
        V = Vm * np.exp(1j * Va)
    raise NoConvergence(f"AC power flow did not converge in {max_iter} iterations (mismatch {res:.3e})")


def _dS_dV(Y, V):
    Ibus = Y @ V
    diagV = sp.diags(V)
    diagI = sp.diags(Ibus)
    diagVn = sp.diags(V / np.abs(V))
    dS_dVm = diagV @ np.conj(Y @ diagVn) + np.conj(diagI) @ diagVn
    dS_dVa = 1j * diagV @ np.conj(diagI - Y @ diagV)
    return sp.csr_matrix(dS_dVa), sp.csr_matrix(dS_dVm)


def power_flow_residual(net: RadialNetwork, voltages, injections) -> np.ndarray:
    """Per-bus mismatch ``|v_i conj((Y v)_i) - s_i|`` (slack entry zeroed)."""
    Y = admittance_matrix(net)
    V = np.asarray(voltages, dtype=complex)
    s = np.asarray(injections, dtype=complex)
    if s.size == net.n_buses - 1:
        s = np.concatenate([[0.0], s])
    r = np.abs(V * np.conj(Y @ V) - s)
    r[0] = 0.0
    return r


def rank_one_w(net: RadialNetwork, voltages) -> WValues:
    """The exact ``W = v v^H`` entries for a voltage vector (one step)."""
    V = np.asarray(voltages, dtype=complex)
    ef = np.array([e.from_bus for e in net.edges], dtype=int)
    et = np.array([e.to_bus for e in net.edges], dtype=int)
    Wft = V[ef] * np.conj(V[et])
    return WValues(np.abs(V) ** 2, Wft.real, Wft.imag)


def relaxation_gap(net: RadialNetwork, values: WValues) -> float:
    """Largest ``1 - |w_ij|^2 / (w_ii w_jj)`` over edges (and steps); 0 means rank one."""
    ef = np.array([e.from_bus for e in net.edges], dtype=int)
    et = np.array([e.to_bus for e in net.edges], dtype=int)
    w = np.asarray(values.w, dtype=float)
    c = np.asarray(values.c, dtype=float)
    s = np.asarray(values.s, dtype=float)
    gap = 1.0 - (c ** 2 + s ** 2) / (w[ef] * w[et])
    return float(np.max(gap, initial=0.0))


@dataclass
class SocpFlowResult:
    values: WValues
    slack_power: complex
    objective: float
    solution: object


def solve_socp_flow(net: RadialNetwork, injections, settings: SolverSettings | None = None,
                    weight: float = 0.0, v_tol_plus: float = 1.045, v_tol_minus: float = 0.955,
                    slack_price: float = 1.0) -> SocpFlowResult:
    """Relaxed power flow for fixed non-slack injections (one step).

    Minimizes ``slack_price * Re(s_0)`` (i.e. network losses) plus the
    optional voltage penalty.
    """
    nb = net.n_buses
    sinj = np.asarray(injections, dtype=complex).reshape(-1)
    if sinj.size == nb - 1:
        sinj = np.concatenate([[0.0], sinj])
    b = ProgramBuilder()
    p = b.add_variables((nb, 1))
    q = b.add_variables((nb, 1))
    b.set_bounds(p[1:, 0], sinj[1:].real, sinj[1:].real)
    b.set_bounds(q[1:, 0], sinj[1:].imag, sinj[1:].imag)
    block = build_flow_constraints(b, net, 1, p, q)
    pen = build_voltage_penalty(b, block, weight, v_tol_plus, v_tol_minus)
    b.add_linear_cost(p[0, 0], slack_price)
    prog = b.build()
    sol = solve(prog, settings)
    vals = WValues(sol.x[block.w[:, 0]], sol.x[block.c[:, 0]], sol.x[block.s[:, 0]])
    s0 = complex(sol.x[p[0, 0]], sol.x[q[0, 0]])
    del pen
    return SocpFlowResult(vals, s0, sol.objective, sol)


def dump_voltages_csv(path, voltages, start_step: int = 0) -> None:
    """Write per-bus voltage magnitudes, one row per (step, bus)."""
    v = np.abs(np.asarray(voltages))
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["step", "bus", "v_pu"])
        for t in range(v.shape[0]):
            for i in range(v.shape[1]):
                wr.writerow([start_step + t, i, f"{v[t, i]:.10f}"])
