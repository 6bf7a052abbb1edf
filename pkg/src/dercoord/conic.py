"""Operator-splitting solver for convex QPs with second-order-cone constraints.

Problem class::

    minimize    1/2 x' diag(p) x + c' x
    subject to  A x = b
                lo <= x <= hi
                ||x[k_1..k_{m-1}]||_2 <= x[k_m]     for every cone (k_1..k_m)

The solver is an ADMM on the splitting ``z = [A; I; S] x`` with ``z`` in the
product set ``{b} x [lo, hi] x K`` (``S`` selects the cone members), in the
style of OSQP: a fixed quasi-definite linear system per iteration, projection
onto the product set, over-relaxation and adaptive step size.  Ruiz equilibration is available
(``scaling_iters``) but off by default: on the power-flow programs built here
it slows convergence.  Every reported residual is measured on the original
data.

Rotated cones ``|w|^2 <= u v`` are handled by the caller through
``||(2 Re w, 2 Im w, u - v)|| <= u + v``; see :meth:`ProgramBuilder.add_rotated_cone`.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITERS = "max_iters"


class Infeasible(RuntimeError):
    """Raised when the solver certifies (or strongly suspects) primal infeasibility."""

    def __init__(self, msg, solution=None):
        super().__init__(msg)
        self.solution = solution


class DimensionError(ValueError):
    pass


@dataclass
class SolverSettings:
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    max_iters: int = 200_000
    alpha: float = 1.6
    rho: float = 0.1
    sigma: float = 1e-6
    adaptive_rho: bool = True
    adaptive_rho_interval: int = 50
    adaptive_rho_tolerance: float = 5.0
    check_interval: int = 10
    scaling_iters: int = 0
    stall_window: int = 1000
    stall_rel_change: float = 1e-12
    stall_min_residual: float = 1e-3
    eps_infeasible: float = 1e-7


@dataclass
class ConicProgram:
    n_vars: int
    quadratic_diag: np.ndarray
    linear_cost: np.ndarray
    eq_matrix: sp.csr_matrix
    eq_rhs: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    soc_cones: list = field(default_factory=list)
    objective_offset: float = 0.0

    def __post_init__(self):
        n = int(self.n_vars)
        self.quadratic_diag = np.asarray(self.quadratic_diag, dtype=float).reshape(-1)
        self.linear_cost = np.asarray(self.linear_cost, dtype=float).reshape(-1)
        self.lower = np.asarray(self.lower, dtype=float).reshape(-1)
        self.upper = np.asarray(self.upper, dtype=float).reshape(-1)
        self.eq_rhs = np.asarray(self.eq_rhs, dtype=float).reshape(-1)
        self.eq_matrix = sp.csr_matrix(self.eq_matrix, dtype=float)
        for name in ("quadratic_diag", "linear_cost", "lower", "upper"):
            if getattr(self, name).shape != (n,):
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected ({n},)")
        if self.eq_matrix.shape != (self.eq_rhs.size, n):
            raise DimensionError(f"eq_matrix shape {self.eq_matrix.shape} vs rhs {self.eq_rhs.size}, n {n}")
        if np.any(self.quadratic_diag < 0):
            raise ValueError("quadratic_diag must be nonnegative")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound above upper bound")
        self.soc_cones = [np.asarray(c, dtype=int) for c in self.soc_cones]
        used = np.zeros(n, dtype=bool)
        for c in self.soc_cones:
            if c.size < 2:
                raise DimensionError("a cone needs at least two members")
            if np.any(c < 0) or np.any(c >= n):
                raise DimensionError("cone index out of range")
            if self.lower[c[-1]] < 0:
                raise ValueError(f"cone head {c[-1]} must have a nonnegative lower bound")
            if np.any(used[c]):
                raise ValueError("a variable may belong to at most one cone")
            used[c] = True

    @property
    def n_eq(self) -> int:
        return self.eq_rhs.size

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ (self.quadratic_diag * x) + self.linear_cost @ x + self.objective_offset)

    def violations(self, x) -> dict:
        """Largest equality, bound and cone violations of a point."""
        x = np.asarray(x, dtype=float)
        eq = np.max(np.abs(self.eq_matrix @ x - self.eq_rhs), initial=0.0)
        box = np.max(np.maximum(self.lower - x, 0.0), initial=0.0)
        box = max(box, np.max(np.maximum(x - self.upper, 0.0), initial=0.0))
        cone = 0.0
        for c in self.soc_cones:
            cone = max(cone, np.linalg.norm(x[c[:-1]]) - x[c[-1]])
        return {"eq": float(eq), "box": float(box), "cone": float(cone)}

    def without_constraints(self, eq_rows=(), bound_vars=(), cones=()) -> "ConicProgram":
        """Copy with the given equality rows, variable bounds and cones dropped."""
        keep = np.setdiff1d(np.arange(self.n_eq), np.asarray(eq_rows, dtype=int))
        lo, hi = self.lower.copy(), self.upper.copy()
        idx = np.asarray(bound_vars, dtype=int)
        lo[idx], hi[idx] = -np.inf, np.inf
        drop = set(int(k) for k in cones)
        kept_cones = [c for k, c in enumerate(self.soc_cones) if k not in drop]
        for c in kept_cones:
            lo[c[-1]] = max(lo[c[-1]], 0.0)
        return ConicProgram(self.n_vars, self.quadratic_diag.copy(), self.linear_cost.copy(),
                            self.eq_matrix[keep], self.eq_rhs[keep], lo, hi, kept_cones,
                            self.objective_offset)


@dataclass
class ConicSolution:
    x: np.ndarray
    objective: float
    status: str
    primal_residual: float
    dual_residual: float
    iterations: int
    y_eq: np.ndarray = None
    rho: float = float("nan")
    # internal iterate (x, z, y) for warm-starting a program of identical shape
    state: tuple = field(default=None, repr=False)

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


class ProgramBuilder:
    """Incremental assembly of a :class:`ConicProgram`.

    Variables are allocated in blocks and referred to by integer index arrays;
    equality rows are accumulated as sparse triplets.
    """

    def __init__(self):
        self._lo: list[np.ndarray] = []
        self._hi: list[np.ndarray] = []
        self.n = 0
        self._rows: list[np.ndarray] = []
        self._cols: list[np.ndarray] = []
        self._vals: list[np.ndarray] = []
        self._rhs: list[np.ndarray] = []
        self.m = 0
        self.cones: list[np.ndarray] = []
        self._quad: dict[int, float] = {}
        self._lin_idx: list[np.ndarray] = []
        self._lin_val: list[np.ndarray] = []
        self.offset = 0.0

    def add_variables(self, shape, lower=-np.inf, upper=np.inf) -> np.ndarray:
        size = int(np.prod(shape))
        idx = np.arange(self.n, self.n + size).reshape(shape)
        self._lo.append(np.broadcast_to(np.asarray(lower, dtype=float), shape).reshape(-1).copy())
        self._hi.append(np.broadcast_to(np.asarray(upper, dtype=float), shape).reshape(-1).copy())
        self.n += size
        return idx

    def set_bounds(self, idx, lower=None, upper=None):
        lo, hi = self._bounds_view()
        idx = np.asarray(idx).reshape(-1)
        if lower is not None:
            lo[idx] = np.broadcast_to(lower, idx.shape)
        if upper is not None:
            hi[idx] = np.broadcast_to(upper, idx.shape)

    def _bounds_view(self):
        if len(self._lo) != 1:
            lo = np.concatenate(self._lo) if self._lo else np.zeros(0)
            hi = np.concatenate(self._hi) if self._hi else np.zeros(0)
            self._lo, self._hi = [lo], [hi]
        return self._lo[0], self._hi[0]

    def add_rows(self, cols, vals, rhs) -> np.ndarray:
        """Add equality rows ``sum_k vals[r, k] * x[cols[r, k]] = rhs[r]``.

        ``cols``/``vals`` are 2-D arrays (rows x terms) or lists of 1-D arrays
        for rows of varying width.
        """
        rhs = np.atleast_1d(np.asarray(rhs, dtype=float))
        if isinstance(cols, list):
            lens = [len(c) for c in cols]
            r = np.repeat(np.arange(len(cols)), lens)
            c = np.concatenate([np.asarray(a, dtype=int) for a in cols]) if cols else np.zeros(0, int)
            v = np.concatenate([np.asarray(a, dtype=float) for a in vals]) if vals else np.zeros(0)
            nrows = len(cols)
        else:
            cols = np.atleast_2d(np.asarray(cols, dtype=int))
            vals = np.broadcast_to(np.asarray(vals, dtype=float), cols.shape)
            nrows = cols.shape[0]
            r = np.repeat(np.arange(nrows), cols.shape[1])
            c, v = cols.reshape(-1), vals.reshape(-1)
        if rhs.size == 1 and nrows != 1:
            rhs = np.full(nrows, rhs[0])
        if rhs.size != nrows:
            raise DimensionError(f"{nrows} rows but {rhs.size} right-hand sides")
        self._rows.append(r + self.m)
        self._cols.append(c)
        self._vals.append(v)
        self._rhs.append(rhs)
        out = np.arange(self.m, self.m + nrows)
        self.m += nrows
        return out

    def add_cone(self, idx):
        idx = np.asarray(idx, dtype=int).reshape(-1)
        lo, _ = self._bounds_view()
        lo[idx[-1]] = max(lo[idx[-1]], 0.0)
        self.cones.append(idx)

    def add_rotated_cone(self, w_re, w_im, u, v):
        """Encode ``w_re^2 + w_im^2 <= u * v`` (u, v >= 0) for index arrays of equal length.

        Adds auxiliaries ``h = (u - v) / 2`` and ``m = (u + v) / 2`` and the
        standard cone ``||(w_re, w_im, h)|| <= m``.
        """
        w_re, w_im, u, v = (np.asarray(a, dtype=int).reshape(-1) for a in (w_re, w_im, u, v))
        k = w_re.size
        h = self.add_variables(k)
        m = self.add_variables(k, lower=0.0)
        self.add_rows(np.stack([h, u, v], 1), [1.0, -0.5, 0.5], np.zeros(k))
        self.add_rows(np.stack([m, u, v], 1), [1.0, -0.5, -0.5], np.zeros(k))
        for a, b, c, d in zip(w_re, w_im, h, m):
            self.cones.append(np.array([a, b, c, d]))
        return h, m

    def add_linear_cost(self, idx, coef):
        idx = np.asarray(idx, dtype=int).reshape(-1)
        self._lin_idx.append(idx)
        self._lin_val.append(np.broadcast_to(np.asarray(coef, dtype=float), idx.shape).reshape(-1).copy())

    def add_quadratic_cost(self, idx, weight):
        """Add ``weight/2 * x^2`` per index (the ConicProgram's diagonal convention)."""
        idx = np.asarray(idx, dtype=int).reshape(-1)
        w = np.broadcast_to(np.asarray(weight, dtype=float), idx.shape).reshape(-1)
        for i, wi in zip(idx.tolist(), w.tolist()):
            self._quad[i] = self._quad.get(i, 0.0) + wi

    def build(self) -> ConicProgram:
        lo, hi = self._bounds_view()
        quad = np.zeros(self.n)
        if self._quad:
            k = np.fromiter(self._quad.keys(), dtype=int)
            quad[k] = np.fromiter(self._quad.values(), dtype=float)
        lin = np.zeros(self.n)
        for i, v in zip(self._lin_idx, self._lin_val):
            np.add.at(lin, i, v)
        if self._rows:
            A = sp.csr_matrix((np.concatenate(self._vals),
                               (np.concatenate(self._rows), np.concatenate(self._cols))),
                              shape=(self.m, self.n))
            b = np.concatenate(self._rhs)
        else:
            A, b = sp.csr_matrix((0, self.n)), np.zeros(0)
        A.sum_duplicates()
        return ConicProgram(self.n, quad, lin, A, b, lo.copy(), hi.copy(), list(self.cones),
                            self.offset)


# --------------------------------------------------------------------------
# projections


def project_soc(v: np.ndarray, t: np.ndarray):
    """Project rows ``(v_k, t_k)`` onto ``{||v|| <= t}``; ``v`` is (k, m-1)."""
    nv = np.sqrt(np.einsum("ij,ij->i", v, v))
    out_v = v.copy()
    out_t = t.copy()
    below = nv <= -t
    out_v[below] = 0.0
    out_t[below] = 0.0
    mid = (nv > np.abs(t)) & ~below
    if np.any(mid):
        a = 0.5 * (nv[mid] + t[mid])
        out_v[mid] = v[mid] * (a / nv[mid])[:, None]
        out_t[mid] = a
    return out_v, out_t


class _ConeGroups:
    """Cones grouped by size so projections vectorize."""

    def __init__(self, cones):
        self.groups = []
        offset = 0
        by_size: dict[int, list[int]] = {}
        for k, c in enumerate(cones):
            by_size.setdefault(c.size, []).append(k)
        starts = np.cumsum([0] + [c.size for c in cones])
        for size in sorted(by_size):
            ks = by_size[size]
            pos = np.stack([np.arange(starts[k], starts[k] + size) for k in ks])
            self.groups.append(pos)
        self.size = int(starts[-1])
        del offset

    def project(self, z):
        out = z.copy()
        for pos in self.groups:
            blk = z[pos]
            v, t = project_soc(blk[:, :-1], blk[:, -1])
            out[pos[:, :-1]] = v
            out[pos[:, -1]] = t
        return out

    def in_polar(self, y, tol):
        """True when ``y`` lies (within tol) in the polar cone ``-K``."""
        for pos in self.groups:
            blk = y[pos]
            if np.any(np.linalg.norm(blk[:, :-1], axis=1) + blk[:, -1] > tol):
                return False
        return True


# --------------------------------------------------------------------------
# solver


def _ruiz(P_diag, A_eq, n_iter):
    """Equilibration vectors (D over columns, E over equality rows)."""
    n = P_diag.size
    D = np.ones(n)
    E = np.ones(A_eq.shape[0])
    if n_iter <= 0:
        return D, E
    A = A_eq.tocsc(copy=True)
    P = P_diag.copy()
    for _ in range(n_iter):
        col_norm = np.maximum(np.abs(P), _col_inf(A))
        # identity rows of the box/cone block contribute 1 in every column
        col_norm = np.maximum(col_norm, 1.0)
        d = 1.0 / np.sqrt(np.clip(col_norm, 1e-4, 1e4))
        row_norm = _row_inf(A)
        e = 1.0 / np.sqrt(np.clip(np.where(row_norm > 0, row_norm, 1.0), 1e-4, 1e4))
        A = sp.diags(e) @ A @ sp.diags(d)
        P = P * d * d
        D *= d
        E *= e
    return D, E


def _col_inf(A):
    A = A.tocsc()
    if A.nnz == 0:
        return np.zeros(A.shape[1])
    out = np.zeros(A.shape[1])
    absd = np.abs(A.data)
    nz = np.diff(A.indptr) > 0
    out[nz] = np.maximum.reduceat(absd, A.indptr[:-1][nz])
    return out


def _row_inf(A):
    return _col_inf(A.T.tocsc())


class _Workspace:
    def __init__(self, prog: ConicProgram, settings: SolverSettings):
        self.prog = prog
        self.s = settings
        n = prog.n_vars
        A = prog.eq_matrix.tocsr()
        D, E = _ruiz(prog.quadratic_diag, A, settings.scaling_iters)
        # cone members share one column scale so the cone survives scaling
        for c in prog.soc_cones:
            D[c] = np.exp(np.mean(np.log(D[c])))
        self.D, self.E = D, E
        Ps = prog.quadratic_diag * D * D
        qs = prog.linear_cost * D
        cost_norm = max(np.max(np.abs(Ps), initial=0.0), np.max(np.abs(qs), initial=0.0))
        self.c = 1.0 / cost_norm if cost_norm > 0 else 1.0
        self.c = float(np.clip(self.c, 1e-6, 1e6))
        self.has_cost = cost_norm > 0
        self.P = self.c * Ps
        self.q = self.c * qs
        self.A = (sp.diags(E) @ A @ sp.diags(D)).tocsr()
        self.AT = self.A.T.tocsr()
        self.b = E * prog.eq_rhs
        self.lo = prog.lower / D
        self.hi = prog.upper / D
        self.m_eq = A.shape[0]
        self.cone_idx = (np.concatenate(prog.soc_cones) if prog.soc_cones
                         else np.zeros(0, dtype=int))
        self.cones = _ConeGroups(prog.soc_cones)
        self.n = n
        # box rows only where a bound is finite
        self.box_idx = np.flatnonzero(np.isfinite(self.lo) | np.isfinite(self.hi))
        self.m_box = self.box_idx.size
        self.m_cone = self.cone_idx.size
        self.m = self.m_eq + self.m_box + self.m_cone
        self.eq_mask = np.zeros(self.m, dtype=bool)
        self.eq_mask[: self.m_eq] = True
        fixed = np.zeros(self.m, dtype=bool)
        box_fixed = self.lo[self.box_idx] == self.hi[self.box_idx]
        fixed[self.m_eq:self.m_eq + self.m_box] = box_fixed
        self.fixed = self.eq_mask | fixed
        sel = lambda idx: sp.csr_matrix((np.ones(idx.size), (np.arange(idx.size), idx)),
                                        shape=(idx.size, n))
        self.Af = sp.vstack([self.A, sel(self.box_idx), sel(self.cone_idx)]).tocsr()
        self.AfT = self.Af.T.tocsr()
        self.row_scale = np.concatenate([E, 1.0 / D[self.box_idx], 1.0 / D[self.cone_idx]])
        self.rho = settings.rho
        self._set_rho_vec()
        self._factor()

    def _set_rho_vec(self):
        self.rho_vec = np.full(self.m, self.rho)
        self.rho_vec[self.fixed] = 1e3 * self.rho
        self.rho_inv = 1.0 / self.rho_vec

    def _factor(self):
        diag = self.P + self.s.sigma
        K = (self.AfT @ sp.diags(self.rho_vec) @ self.Af) + sp.diags(diag)
        self.K_solve = spla.splu(sp.csc_matrix(K), permc_spec="MMD_AT_PLUS_A").solve

    def Ax(self, x):
        return self.Af @ x

    def ATy(self, y):
        return self.AfT @ y

    def project(self, z):
        out = np.empty_like(z)
        out[: self.m_eq] = self.b
        sl = slice(self.m_eq, self.m_eq + self.m_box)
        out[sl] = np.clip(z[sl], self.lo[self.box_idx], self.hi[self.box_idx])
        if self.m_cone:
            out[self.m_eq + self.m_box:] = self.cones.project(z[self.m_eq + self.m_box:])
        return out

    # residuals on the original (unscaled) data ---------------------------
    def unscale(self, x, z, y):
        r = self.Ax(x) - z
        rp = np.max(np.abs(r / self.row_scale), initial=0.0)
        grad = self.P * x + self.q + self.ATy(y)
        rd = np.max(np.abs(grad / self.D), initial=0.0) / self.c
        return self.D * x, rp, rd

    def residual_norms(self, x, z, y):
        """Pieces of the relative tolerances (original units)."""
        D, row_scale = self.D, self.row_scale
        ax = np.max(np.abs(self.Ax(x) / row_scale), initial=0.0)
        zz = np.max(np.abs(z / row_scale), initial=0.0)
        px = np.max(np.abs(self.P * x / D), initial=0.0) / self.c
        aty = np.max(np.abs(self.ATy(y) / D), initial=0.0) / self.c
        qq = np.max(np.abs(self.q / D), initial=0.0) / self.c
        return max(ax, zz), max(px, aty, qq)

    def infeasibility_certificate(self, dy):
        s = self.s
        norm = np.max(np.abs(dy), initial=0.0)
        if norm < 1e-30:
            return False
        D, E = self.D, self.E
        aty = self.ATy(dy)
        if np.max(np.abs(aty / D), initial=0.0) > s.eps_infeasible * norm:
            return False
        # support function of {b} x [lo, hi] x K must be negative
        sl = slice(self.m_eq, self.m_eq + self.m_box)
        dyb = dy[sl]
        lo, hi = self.lo[self.box_idx], self.hi[self.box_idx]
        if np.any((dyb > s.eps_infeasible * norm) & ~np.isfinite(hi)):
            return False
        if np.any((dyb < -s.eps_infeasible * norm) & ~np.isfinite(lo)):
            return False
        support = self.b @ dy[: self.m_eq]
        support += np.sum(np.where(dyb > 0, np.where(np.isfinite(hi), hi, 0.0) * dyb, 0.0))
        support += np.sum(np.where(dyb < 0, np.where(np.isfinite(lo), lo, 0.0) * dyb, 0.0))
        if self.m_cone and not self.cones.in_polar(dy[self.m_eq + self.m_box:], s.eps_infeasible * norm):
            return False
        return support < -s.eps_infeasible * norm


def solve(prog: ConicProgram, settings: SolverSettings | None = None, x0=None,
          raise_infeasible: bool = True, warm: ConicSolution | None = None) -> ConicSolution:
    """Solve a :class:`ConicProgram`.

    Returns a :class:`ConicSolution`; ``status`` is ``"optimal"`` when both the
    primal residual (largest equality, bound or cone-copy mismatch) and the
    dual residual (stationarity, per unit of the largest cost coefficient)
    fall below ``eps_abs + eps_rel * scale``.  Runs that hit ``max_iters``
    return the last iterate with status ``"max_iters"``.  Infeasible programs
    raise :class:`Infeasible` unless ``raise_infeasible`` is false.

    ``warm`` is a previous solution of a program with the same structure
    (sizes, cones and cost scale); its primal/dual iterate and step size seed
    this solve.
    """
    s = settings or SolverSettings()
    ws = _Workspace(prog, s)
    n, m = ws.n, ws.m
    if warm is not None and warm.state is not None and warm.state[0].size == n \
            and warm.state[2].size == m:
        x, z, y = (a.copy() for a in warm.state[:3])
        z = ws.project(z)
        if np.isfinite(warm.rho) and warm.rho != ws.rho:
            ws.rho = warm.rho
            ws._set_rho_vec()
            ws._factor()
    else:
        if x0 is not None:
            x = np.asarray(x0, dtype=float) / ws.D
        else:
            x = np.zeros(n)
        z = ws.project(ws.Ax(x))
        y = np.zeros(m)
    alpha = s.alpha
    status = MAX_ITERS
    rp = rd = np.inf
    hist_rp = []
    k = 0
    y_prev = y.copy()
    for k in range(1, s.max_iters + 1):
        rhs = s.sigma * x - ws.q + ws.ATy(ws.rho_vec * z - y)
        xt = ws.K_solve(rhs)
        zt = ws.Ax(xt)
        x = alpha * xt + (1 - alpha) * x
        zr = alpha * zt + (1 - alpha) * z
        z_new = ws.project(zr + ws.rho_inv * y)
        y_prev = y
        y = y + ws.rho_vec * (zr - z_new)
        z = z_new

        if k % s.check_interval == 0 or k == s.max_iters:
            _, rp_abs, rd_abs = ws.unscale(x, z, y)
            p_scale, d_scale = ws.residual_norms(x, z, y)
            # r <= eps_abs + eps_rel * scale  <=>  r / (1 + ratio * scale) <= eps_abs
            ratio = s.eps_rel / s.eps_abs
            rp = rp_abs / (1.0 + ratio * p_scale)
            rd = rd_abs / (1.0 + ratio * d_scale)
            if rp <= s.eps_abs and rd <= s.eps_abs:
                status = OPTIMAL
                break
            if ws.infeasibility_certificate(y - y_prev):
                status = INFEASIBLE
                break
            hist_rp.append(rp)
            w = s.stall_window // s.check_interval
            if len(hist_rp) > w and rp > s.stall_min_residual:
                old = hist_rp[-w - 1]
                if abs(old - rp) <= s.stall_rel_change * max(old, 1e-300):
                    status = INFEASIBLE
                    break
            if s.adaptive_rho and k % s.adaptive_rho_interval == 0:
                _adapt_rho(ws, x, z, y)
    xo = ws.D * x
    y_eq = ws.E * y[: ws.m_eq] / ws.c
    sol = ConicSolution(xo, prog.objective(xo), status, float(rp), float(rd), k, y_eq, ws.rho,
                        (x, z, y))
    if status == INFEASIBLE and raise_infeasible:
        raise Infeasible(f"program infeasible after {k} iterations (primal residual {rp:.3e})", sol)
    if status == MAX_ITERS:
        log.warning("conic solve hit max_iters=%d (rp=%.2e rd=%.2e)", s.max_iters, rp, rd)
    return sol


def _adapt_rho(ws: _Workspace, x, z, y):
    s = ws.s
    Ax = ws.Ax(x)
    rp = np.max(np.abs(Ax - z), initial=0.0)
    rd = np.max(np.abs(ws.P * x + ws.q + ws.ATy(y)), initial=0.0)
    p_norm = max(np.max(np.abs(Ax), initial=0.0), np.max(np.abs(z), initial=0.0), 1e-10)
    d_norm = max(np.max(np.abs(ws.P * x), initial=0.0), np.max(np.abs(ws.ATy(y)), initial=0.0),
                 np.max(np.abs(ws.q), initial=0.0), 1e-10)
    if not ws.has_cost:
        # pure feasibility problem: y alone sets the dual scale, keep it at unit size
        d_norm = max(d_norm, 1.0)
    ratio = (rp / p_norm) / max(rd / d_norm, 1e-30)
    new_rho = float(np.clip(ws.rho * np.sqrt(ratio), 1e-6, 1e6))
    if new_rho > ws.rho * s.adaptive_rho_tolerance or new_rho < ws.rho / s.adaptive_rho_tolerance:
        ws.rho = new_rho
        ws._set_rho_vec()
        ws._factor()


def block_diag_programs(progs) -> tuple[ConicProgram, list[slice]]:
    """Stack independent programs into one; returns it with each part's variable slice."""
    progs = list(progs)
    if not progs:
        raise ValueError("no programs to stack")
    slices, cones, off = [], [], 0
    for p in progs:
        slices.append(slice(off, off + p.n_vars))
        cones.extend(c + off for c in p.soc_cones)
        off += p.n_vars
    cat = lambda name: np.concatenate([getattr(p, name) for p in progs])
    A = sp.block_diag([p.eq_matrix for p in progs], format="csr")
    return (ConicProgram(off, cat("quadratic_diag"), cat("linear_cost"), A, cat("eq_rhs"),
                         cat("lower"), cat("upper"), cones,
                         float(sum(p.objective_offset for p in progs))), slices)


def dump_program(prog: ConicProgram, path) -> None:
    """Write dimensions, sparsity and cone structure of a program for offline inspection."""
    info = {
        "n_vars": prog.n_vars,
        "n_eq": prog.n_eq,
        "eq_nnz": int(prog.eq_matrix.nnz),
        "n_quadratic": int(np.count_nonzero(prog.quadratic_diag)),
        "n_linear": int(np.count_nonzero(prog.linear_cost)),
        "n_lower_finite": int(np.isfinite(prog.lower).sum()),
        "n_upper_finite": int(np.isfinite(prog.upper).sum()),
        "n_fixed": int(np.sum(prog.lower == prog.upper)),
        "cone_sizes": {str(k): int(v) for k, v in
                       zip(*np.unique([c.size for c in prog.soc_cones], return_counts=True))},
        "cones": [c.tolist() for c in prog.soc_cones],
    }
    Path(path).write_text(json.dumps(info, indent=1) + "\n")
