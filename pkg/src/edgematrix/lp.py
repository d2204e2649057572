"""Exact solver for dispatch linear programs.

Standard form: maximize c.y subject to A.y <= b, 0 <= y <= u. The solver
is a bounded-variable primal simplex over a dense tableau with an
explicit basis inverse. Pivoting uses Dantzig's rule with a deterministic
switch to Bland's rule after a stall budget, so every run of the same
input bits produces the same solution bits and cycling cannot occur.

`enumerate_optimum` is the independent oracle: it exhaustively enumerates
basic feasible points of the box-constrained polytope. It shares no code
path with the simplex.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations, product

import numpy as np

PIVOT_TOL = 1e-10
OPT_TOL = 1e-9
FEAS_TOL = 1e-9


class LpError(ValueError):
    pass


class DimensionMismatch(LpError):
    pass


class Unbounded(LpError):
    """Cannot occur for dispatch instances (all variables bounded)."""


@dataclass
class LinearProgram:
    """max c.y  s.t.  A.y <= b,  0 <= y <= u.

    Rows are stored sparsely as (index array, value array) pairs; an
    upper bound of 0 marks a forbidden variable.
    """

    objective_c: np.ndarray
    rows: list[tuple[np.ndarray, np.ndarray]]
    rhs_b: np.ndarray
    upper_bounds_u: np.ndarray

    def __post_init__(self):
        self.objective_c = np.asarray(self.objective_c, dtype=float)
        self.rhs_b = np.asarray(self.rhs_b, dtype=float)
        self.upper_bounds_u = np.asarray(self.upper_bounds_u, dtype=float)
        n = len(self.objective_c)
        if len(self.upper_bounds_u) != n:
            raise DimensionMismatch("objective and bounds lengths differ")
        if len(self.rows) != len(self.rhs_b):
            raise DimensionMismatch("row count and rhs length differ")
        if not np.all(np.isfinite(self.rhs_b)):
            raise LpError("rhs must be finite")
        if np.any(self.upper_bounds_u < 0) or not np.all(np.isfinite(self.upper_bounds_u)):
            raise LpError("bounds must be finite and >= 0")
        for idx, _ in self.rows:
            if len(idx) and (np.min(idx) < 0 or np.max(idx) >= n):
                raise DimensionMismatch("row index out of range")

    @property
    def n_vars(self) -> int:
        return len(self.objective_c)

    def dense_matrix(self) -> np.ndarray:
        A = np.zeros((len(self.rows), self.n_vars))
        for r, (idx, vals) in enumerate(self.rows):
            A[r, idx] = vals
        return A

    def dump(self) -> str:
        """Plain-text fixed format for offline debugging."""
        lines = [f"vars {self.n_vars} rows {len(self.rows)}",
                 "c " + " ".join(f"{v:.17g}" for v in self.objective_c),
                 "u " + " ".join(f"{v:.17g}" for v in self.upper_bounds_u)]
        for (idx, vals), b in zip(self.rows, self.rhs_b):
            terms = " ".join(f"{j}:{v:.17g}" for j, v in zip(idx, vals))
            lines.append(f"row {terms} <= {b:.17g}")
        return "\n".join(lines) + "\n"


@dataclass
class LpSolution:
    y_star: np.ndarray
    objective_value: float
    status: str  # "Optimal" | "Infeasible"
    row_duals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    reduced_costs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    iterations: int = 0


def _simplex(c: np.ndarray, A: np.ndarray, b: np.ndarray, u: np.ndarray):
    """Core bounded-variable simplex on dense data. Returns
    (y, duals, reduced, iterations) or None when infeasible."""
    m, n = A.shape
    n_art = int(np.sum(b < 0))
    ntot = n + m + n_art
    A_full = np.zeros((m, ntot))
    A_full[:, :n] = A
    A_full[:, n:n + m] = np.eye(m)
    ub = np.full(ntot, np.inf)
    ub[:n] = u
    # artificials carry -1 in their (negative-rhs) row so they start basic at -b_i > 0
    art_rows = np.nonzero(b < 0)[0]
    for k, r in enumerate(art_rows):
        A_full[r, n + m + k] = -1.0
    basis = np.array([n + m + list(art_rows).index(r) if b[r] < 0 else n + r
                      for r in range(m)], dtype=int)
    # status: 0 = nonbasic at lower, 1 = nonbasic at upper, 2 = basic
    status = np.zeros(ntot, dtype=np.int8)
    status[basis] = 2
    Binv = np.eye(m)
    for k, r in enumerate(art_rows):
        Binv[r, r] = -1.0
    x_B = Binv @ b

    iters = 0

    def refresh():
        nonlocal Binv, x_B
        Binv = np.linalg.inv(A_full[:, basis])
        upper = np.nonzero(status == 1)[0]
        rhs = b - A_full[:, upper] @ ub[upper] if len(upper) else b.copy()
        x_B = Binv @ rhs

    def run_phase(cost: np.ndarray, allowed: np.ndarray, bland_after: int) -> None:
        nonlocal iters, Binv, x_B
        while True:
            if iters and iters % 200 == 0:
                refresh()
            pi = cost[basis] @ Binv
            d = cost - pi @ A_full
            can_enter = allowed & (
                ((status == 0) & (d > OPT_TOL) & (ub > 0)) |
                ((status == 1) & (d < -OPT_TOL)))
            cand = np.nonzero(can_enter)[0]
            if len(cand) == 0:
                return
            if iters < bland_after:
                e = int(cand[np.argmax(np.abs(d[cand]))])
            else:
                e = int(cand[0])  # Bland: smallest index, guarantees termination
            from_lower = status[e] == 0
            sigma = 1.0 if from_lower else -1.0
            col = Binv @ A_full[:, e]
            denom = sigma * col
            limits = np.full(m, np.inf)
            pos = denom > PIVOT_TOL
            limits[pos] = x_B[pos] / denom[pos]
            neg = denom < -PIVOT_TOL
            ub_basis = ub[basis]
            finite_up = neg & np.isfinite(ub_basis)
            limits[finite_up] = (ub_basis[finite_up] - x_B[finite_up]) / (-denom[finite_up])
            limits = np.maximum(limits, 0.0)
            span = ub[e]
            if len(limits):
                order = np.lexsort((basis, limits))
                r = int(order[0])
                t_basic = limits[r]
            else:
                r, t_basic = -1, np.inf
            if span < t_basic:
                # bound flip: entering variable crosses to its other bound
                x_B -= denom * span
                status[e] = 1 - status[e]
                iters += 1
                continue
            if not np.isfinite(t_basic):
                raise Unbounded("unbounded direction in a supposedly box-bounded program")
            t = t_basic
            x_B = x_B - denom * t
            leave = basis[r]
            status[leave] = 0 if denom[r] > 0 else 1
            enter_val = (0.0 if from_lower else ub[e]) + sigma * t
            basis[r] = e
            status[e] = 2
            x_B[r] = enter_val
            row_r = Binv[r] / col[r]
            Binv = Binv - np.outer(col, row_r)
            Binv[r] = row_r
            iters += 1

    allowed = np.ones(ntot, dtype=bool)
    if n_art:
        cost1 = np.zeros(ntot)
        cost1[n + m:] = -1.0
        run_phase(cost1, allowed, bland_after=10 * (m + n))
        refresh()
        infeas = -float(cost1[basis] @ x_B)
        if infeas > 1e-7:
            return None
        ub[n + m:] = 0.0  # pin artificials at zero for phase 2
    allowed = np.zeros(ntot, dtype=bool)
    allowed[:n + m] = True
    cost2 = np.zeros(ntot)
    cost2[:n] = c
    run_phase(cost2, allowed, bland_after=iters + 20 * (m + n))
    refresh()
    y = np.zeros(ntot)
    y[status == 1] = ub[status == 1]
    y[basis] = x_B
    pi = cost2[basis] @ Binv
    d = cost2 - pi @ A_full
    return y[:n], pi, d[:n], iters


def solve_lp(lp: LinearProgram) -> LpSolution:
    """Solve to provable optimality; deterministic for fixed input bits."""
    n = lp.n_vars
    u = lp.upper_bounds_u
    keep = np.nonzero(u > 0)[0]
    A = lp.dense_matrix()
    A_k = A[:, keep]
    # rows that touch no free variable reduce to 0 <= b
    live_rows = np.nonzero(np.any(A_k != 0.0, axis=1))[0] if len(keep) else np.array([], dtype=int)
    dead_rows = [r for r in range(len(lp.rows)) if r not in set(live_rows.tolist())]
    if any(lp.rhs_b[r] < -FEAS_TOL for r in dead_rows):
        return LpSolution(y_star=np.zeros(n), objective_value=0.0, status="Infeasible")
    if len(keep) == 0:
        return LpSolution(y_star=np.zeros(n), objective_value=0.0, status="Optimal",
                          row_duals=np.zeros(len(lp.rows)), reduced_costs=lp.objective_c.copy())
    res = _simplex(lp.objective_c[keep], A_k[live_rows], lp.rhs_b[live_rows], u[keep])
    if res is None:
        return LpSolution(y_star=np.zeros(n), objective_value=0.0, status="Infeasible")
    y_k, pi_k, d_k, iters = res
    y = np.zeros(n)
    y[keep] = np.clip(y_k, 0.0, u[keep])
    duals = np.zeros(len(lp.rows))
    duals[live_rows] = pi_k
    reduced = lp.objective_c - duals @ A
    return LpSolution(y_star=y, objective_value=float(lp.objective_c @ y),
                      status="Optimal", row_duals=duals, reduced_costs=reduced,
                      iterations=iters)


def duality_gap_check(lp: LinearProgram, sol: LpSolution) -> float:
    """Max of primal-feasibility and complementary-slackness residuals."""
    if sol.status != "Optimal":
        raise LpError("duality check requires an Optimal solution")
    y = sol.y_star
    u = lp.upper_bounds_u
    A = lp.dense_matrix()
    slack = lp.rhs_b - A @ y
    primal = 0.0
    if len(slack):
        primal = max(primal, float(np.max(-slack)))
    primal = max(primal, float(np.max(-y)) if len(y) else 0.0,
                 float(np.max(y - u)) if len(y) else 0.0)
    pi = sol.row_duals
    d = sol.reduced_costs
    dual_feas = float(np.max(-pi)) if len(pi) else 0.0
    cs = 0.0
    if len(pi):
        cs = max(cs, float(np.max(np.abs(pi * slack))))
    if len(d):
        cs = max(cs, float(np.max(np.abs(np.maximum(d, 0.0) * (u - y)))))
        cs = max(cs, float(np.max(np.abs(np.minimum(d, 0.0) * y))))
    return max(primal, dual_feas, cs, 0.0)


def enumerate_optimum(lp: LinearProgram, tol: float = 1e-9):
    """Exhaustive vertex enumeration oracle for small instances.

    Every vertex of {A y <= b, 0 <= y <= u} has k rows active and the
    remaining n - k variables at a bound; we enumerate all such systems.
    Returns (best objective, argmax vertex) or None when infeasible.
    """
    n = lp.n_vars
    A = lp.dense_matrix()
    b = lp.rhs_b
    u = lp.upper_bounds_u
    c = lp.objective_c
    m = len(b)
    best_val, best_y = None, None

    def consider(Y: np.ndarray) -> None:
        nonlocal best_val, best_y
        # Y: candidate points as columns
        ok = np.all(Y >= -tol, axis=0) & np.all(Y <= u[:, None] + tol, axis=0)
        if m:
            ok &= np.all(A @ Y <= b[:, None] + tol, axis=0)
        if not np.any(ok):
            return
        vals = c @ Y[:, ok]
        j = int(np.argmax(vals))
        if best_val is None or vals[j] > best_val:
            best_val = float(vals[j])
            best_y = Y[:, ok][:, j].copy()

    var_idx = np.arange(n)
    for k in range(0, min(m, n) + 1):
        for J in combinations(range(m), k):
            AJ = A[list(J), :] if k else np.zeros((0, n))
            bJ = b[list(J)] if k else np.zeros(0)
            for F in combinations(range(n), k):
                Fl = list(F)
                Bl = [j for j in var_idx if j not in F]
                if k:
                    sub = AJ[:, Fl]
                    if abs(np.linalg.det(sub)) < 1e-12:
                        continue
                nb = len(Bl)
                # all 2^nb assignments of the non-active variables to their bounds
                assigns = np.array(list(product(*[(0.0, u[j]) for j in Bl]))).T \
                    if nb else np.zeros((0, 1))
                ncols = assigns.shape[1] if nb else 1
                Y = np.zeros((n, ncols))
                if nb:
                    Y[Bl, :] = assigns
                if k:
                    rhs = bJ[:, None] - (AJ[:, Bl] @ assigns if nb else 0.0)
                    try:
                        Y[Fl, :] = np.linalg.solve(sub, rhs)
                    except np.linalg.LinAlgError:
                        continue
                consider(Y)
    if best_val is None:
        return None
    return best_val, best_y
