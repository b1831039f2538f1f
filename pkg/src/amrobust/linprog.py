"""Dense revised-simplex LP solver with exact dual multipliers.

Scope is deliberately small: the desk-scale programs in this package have at
most a few thousand variables, so a dense double-precision simplex with
Bland's anti-cycling rule is robust and keeps the dependency surface at
numpy.  The solver reports Lagrange multipliers per labelled row, which the
superhedging code reads off as trading strategies and band positions.

Variable bounds come in exactly two shapes: nonnegative (the default) and
free.  Anything fancier must be modelled with explicit rows.

Dual sign convention: for a max problem, duals satisfy value = sum(dual *
rhs), with dual >= 0 on "le" rows and dual <= 0 on "ge" rows; for a min
problem the signs flip.  Equality rows are unrestricted.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np

from .errors import LPNumericalError

FEAS_TOL = 1e-9
PIVOT_TOL = 1e-10
PRIMAL_CERT_TOL = 1e-9
DUAL_CERT_TOL = 1e-8
GAP_RTOL = 1e-8


@dataclass
class _Row:
    cols: np.ndarray
    vals: np.ndarray
    op: str          # "eq" | "le" | "ge"
    rhs: float
    label: Hashable


class LinearProgram:
    """A labelled LP: optimize c.x subject to labelled rows and sign bounds."""

    def __init__(self, n_vars: int, sense: str = "max"):
        if sense not in ("max", "min"):
            raise ValueError("sense must be 'max' or 'min'")
        self.n_vars = int(n_vars)
        self.sense = sense
        self.c = np.zeros(self.n_vars)
        self.rows: list[_Row] = []
        self.free = np.zeros(self.n_vars, dtype=bool)
        self._labels: set = set()

    def set_objective(self, cols, vals) -> None:
        cols = np.asarray(cols, dtype=int)
        self.c[cols] = np.asarray(vals, dtype=float)

    def set_free(self, cols) -> None:
        """Mark variables as sign-unrestricted (default is x >= 0)."""
        self.free[np.asarray(cols, dtype=int)] = True

    def add_row(self, cols, vals, op: str, rhs: float, label: Hashable = None) -> None:
        if op not in ("eq", "le", "ge"):
            raise ValueError(f"unknown row op {op!r}")
        cols = np.asarray(cols, dtype=int)
        vals = np.asarray(vals, dtype=float)
        if cols.shape != vals.shape:
            raise ValueError("cols and vals must align")
        if cols.size and (cols.min() < 0 or cols.max() >= self.n_vars):
            raise ValueError("column index out of range")
        if label is None:
            label = ("row", len(self.rows))
        if label in self._labels:
            raise ValueError(f"duplicate row label {label!r}")
        self._labels.add(label)
        self.rows.append(_Row(cols, vals, op, float(rhs), label))

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    def dense(self) -> tuple[np.ndarray, np.ndarray, list[str]]:
        A = np.zeros((len(self.rows), self.n_vars))
        b = np.empty(len(self.rows))
        ops = []
        for i, r in enumerate(self.rows):
            np.add.at(A[i], r.cols, r.vals)
            b[i] = r.rhs
            ops.append(r.op)
        return A, b, ops


@dataclass
class LPSolution:
    status: str                      # "optimal" | "infeasible" | "unbounded"
    value: float
    x: np.ndarray
    duals: dict
    row_duals: np.ndarray
    iterations: int
    basis: tuple[int, ...] = ()      # opaque warm-start token
    primal_residual: float = 0.0
    dual_residual: float = 0.0
    gap: float = 0.0

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


def _standard_form(lp: LinearProgram):
    """Rewrite as min ct.z with At z = bt, z >= 0, bt >= 0.

    Free variables split into a positive and a negative part; inequality
    rows gain a signed slack column; rows with negative right-hand side are
    negated (row_sign tracks the flip so duals can be mapped back).
    """
    A, b, ops = lp.dense()
    m, n = A.shape
    obj_sign = -1.0 if lp.sense == "max" else 1.0
    c = obj_sign * lp.c

    cols: list[np.ndarray] = []
    ct: list[float] = []
    pos = np.empty(n, dtype=int)
    neg = np.full(n, -1, dtype=int)
    for j in range(n):
        pos[j] = len(cols)
        cols.append(A[:, j])
        ct.append(c[j])
        if lp.free[j]:
            neg[j] = len(cols)
            cols.append(-A[:, j])
            ct.append(-c[j])
    for i in range(m):
        if ops[i] != "eq":
            e = np.zeros(m)
            e[i] = 1.0 if ops[i] == "le" else -1.0
            cols.append(e)
            ct.append(0.0)
    At = np.column_stack(cols) if cols else np.zeros((m, 0))
    bt = b.astype(float).copy()
    row_sign = np.ones(m)
    flip = bt < 0
    At[flip] *= -1.0
    bt[flip] *= -1.0
    row_sign[flip] = -1.0
    return At, bt, np.asarray(ct), pos, neg, row_sign


def _simplex(At, bt, ct, basis, *, max_iter):
    """Primal simplex from a feasible basis.

    Pivot selection is Dantzig entering with a largest-pivot tie-break on
    the ratio test, which keeps the working basis well conditioned on the
    heavily degenerate lattice programs; after a long run of degenerate
    iterations it switches to Bland's rule, whose termination guarantee
    needs no assumptions.  Returns (status, basis, xB, y, iterations);
    status is "optimal" or "unbounded".
    """
    m, n = At.shape
    basis = list(basis)
    in_basis = np.zeros(n, dtype=bool)
    in_basis[basis] = True
    it = 0
    stalled = 0
    last_obj = np.inf
    while True:
        B = At[:, basis]
        try:
            xB = np.linalg.solve(B, bt) if m else np.zeros(0)
            y = np.linalg.solve(B.T, ct[basis]) if m else np.zeros(0)
        except np.linalg.LinAlgError:
            raise LPNumericalError("singular working basis")
        obj = float(ct[basis] @ xB) if m else 0.0
        if obj < last_obj - 1e-12:
            last_obj = obj
            stalled = 0
        else:
            stalled += 1
        bland = stalled > 4 * (m + 16)
        reduced = ct - y @ At
        entering = -1
        if bland:
            for j in range(n):
                if not in_basis[j] and reduced[j] < -FEAS_TOL:
                    entering = j
                    break
        else:
            open_cols = ~in_basis & (reduced < -FEAS_TOL)
            if open_cols.any():
                cand = np.where(open_cols)[0]
                entering = int(cand[np.argmin(reduced[cand])])
        if entering < 0:
            return "optimal", basis, xB, y, it
        d = np.linalg.solve(B, At[:, entering]) if m else np.zeros(0)
        mask = d > PIVOT_TOL
        if not mask.any():
            return "unbounded", basis, xB, y, it
        ratios = np.full(m, np.inf)
        ratios[mask] = np.maximum(xB[mask], 0.0) / d[mask]
        leave_i = -1
        if bland:
            theta = ratios.min()
            leave_var = -1
            for i in range(m):
                if mask[i] and ratios[i] <= theta + 1e-15:
                    if leave_i < 0 or basis[i] < leave_var:
                        leave_var = basis[i]
                        leave_i = i
        else:
            # Harris two-pass: allow a FEAS_TOL bound slip to reach the
            # largest pivot, which is what keeps the basis invertible on
            # degenerate lattice programs
            theta_max = np.min((np.maximum(xB[mask], 0.0) + FEAS_TOL)
                               / d[mask])
            best = 0.0
            for i in range(m):
                if mask[i] and ratios[i] <= theta_max and d[i] > best:
                    best = d[i]
                    leave_i = i
        in_basis[basis[leave_i]] = False
        in_basis[entering] = True
        basis[leave_i] = entering
        it += 1
        if it > max_iter:
            raise LPNumericalError("simplex iteration limit exceeded")


def _independent_rows(A, b, *, tol=1e-9, rhs_tol=1e-7):
    """A maximal independent row set of A, as increasing indices.

    Returns None when a dependent row is inconsistent with the rows kept,
    which certifies infeasibility.  Lattice programs arrive with many
    structurally dependent rows (one per atom and coordinate), and
    feeding those to phase one as artificials is what used to drive the
    working basis singular; eliminating them up front keeps every later
    basis well conditioned.  Selection is modified Gram-Schmidt with
    reorthogonalization, which judges dependence much more reliably than
    row elimination on these matrices.
    """
    m, n = A.shape
    if m == 0:
        return []
    norms = np.linalg.norm(A, axis=1)
    keep: list[int] = []
    Q = np.empty((0, n))
    for i in range(m):
        if norms[i] <= 1e-14:
            continue
        v = A[i] / norms[i]
        for _ in range(2):
            if keep:
                v = v - (Q @ v) @ Q
        r = np.linalg.norm(v)
        if r > tol:
            Q = np.vstack([Q, v / r])
            keep.append(i)
    kept = set(keep)
    drop = [i for i in range(m) if i not in kept]
    if drop:
        coef, *_ = np.linalg.lstsq(A[keep].T, A[drop].T, rcond=None)
        resid = b[drop] - coef.T @ b[keep]
        scale = 1.0 + float(np.abs(b).max(initial=0.0))
        if np.abs(resid).max(initial=0.0) > rhs_tol * scale:
            return None
    return keep


def _phase_one(At, bt, max_iter):
    """Find a feasible basis; returns (basis, keep_rows) with redundant rows
    removed, or None when the program is infeasible."""
    m, n = At.shape
    A1 = np.hstack([At, np.eye(m)])
    c1 = np.concatenate([np.zeros(n), np.ones(m)])
    basis = list(range(n, n + m))
    status, basis, xB, _, _ = _simplex(A1, bt, c1, basis, max_iter=max_iter)
    if status != "optimal":
        raise LPNumericalError("phase 1 did not terminate cleanly")
    if c1[basis] @ xB > 1e-7 * (1.0 + bt.max(initial=0.0)):
        return None
    drop: list[int] = []
    for i in range(m):
        if basis[i] < n:
            continue
        # a zero-level artificial: pivot it out or mark its row redundant
        tableau_row = np.linalg.solve(A1[:, basis], At)[i]
        pivot = -1
        for j in range(n):
            if j not in basis and abs(tableau_row[j]) > 1e-8:
                pivot = j
                break
        if pivot >= 0:
            basis[i] = pivot
        else:
            drop.append(i)
    keep = [i for i in range(m) if i not in drop]
    return [basis[i] for i in keep], keep


def solve_lp(lp: LinearProgram, warm_basis: Sequence[int] | None = None) -> LPSolution:
    """Solve the program; the result is certified before being returned.

    Optimal solutions must pass a primal-residual check (1e-9, row-scaled),
    a dual-feasibility check (1e-8, objective-scaled) and a relative
    duality-gap check (1e-8); a failure raises LPNumericalError rather than
    returning a silently wrong answer.  ``warm_basis`` is the basis token of
    a previous solution of a program with identical rows and bounds; only
    the objective may differ.
    """
    At, bt, ct, pos, neg, row_sign = _standard_form(lp)
    m, n = At.shape
    max_iter = 2000 + 200 * (m + n)

    # row equilibration: tolerances below are per-row and should mean the
    # same thing for a band row scaled in variance units as for a mass row
    row_scale = np.maximum(np.abs(At).max(axis=1, initial=0.0), 1e-12)
    At = At / row_scale[:, None]
    bt = bt / row_scale

    indep = _independent_rows(At, bt)
    if indep is None:
        return LPSolution("infeasible", np.nan, np.zeros(lp.n_vars), {},
                          np.zeros(lp.n_rows), 0)
    At_r, bt_r = At[indep], bt[indep]
    k = len(indep)

    if k == n:
        # square full-rank system: the rows pin every variable, so the
        # program is a pure feasibility check on the unique solution and
        # pivoting (which grinds through k degenerate artificial
        # exchanges) is both pointless and numerically hazardous
        try:
            z0 = np.linalg.solve(At_r, bt_r)
            z0 += np.linalg.solve(At_r, bt_r - At_r @ z0)
            y_sq = np.linalg.solve(At_r.T, ct)
            y_sq += np.linalg.solve(At_r.T, ct - At_r.T @ y_sq)
        except np.linalg.LinAlgError:
            raise LPNumericalError("degenerate square system")
        if z0.min() < -FEAS_TOL:
            return LPSolution("infeasible", np.nan, np.zeros(lp.n_vars), {},
                              np.zeros(lp.n_rows), 0)
        basis, keep = list(range(n)), list(range(k))
        status, xB, y_k, it2 = "optimal", z0, y_sq, 0
    else:
        basis = None
        keep = list(range(k))
        if warm_basis is not None:
            cand = [int(j) for j in warm_basis]
            if len(cand) == k and len(set(cand)) == k and all(0 <= j < n for j in cand):
                try:
                    xB = np.linalg.solve(At_r[:, cand], bt_r)
                    if k == 0 or xB.min() >= -FEAS_TOL:
                        basis = cand
                except np.linalg.LinAlgError:
                    basis = None

        if basis is None:
            found = _phase_one(At_r, bt_r, max_iter)
            if found is None:
                return LPSolution("infeasible", np.nan, np.zeros(lp.n_vars),
                                  {}, np.zeros(lp.n_rows), 0)
            basis, keep = found

        status, basis, xB, y_k, it2 = _simplex(
            At_r[keep], bt_r[keep], ct, basis, max_iter=max_iter)
    if status == "unbounded":
        return LPSolution("unbounded", np.nan, np.zeros(lp.n_vars), {},
                          np.zeros(lp.n_rows), it2)

    z = np.zeros(n)
    z[np.asarray(basis, dtype=int)] = xB
    x = z[pos].copy()
    has_neg = neg >= 0
    x[has_neg] -= z[neg[has_neg]]

    # duals over the original rows; rows dropped as redundant price at zero
    y_full = np.zeros(m)
    y_full[np.asarray(indep, dtype=int)[keep]] = y_k
    y_full /= row_scale
    y_full *= row_sign
    sense_sign = -1.0 if lp.sense == "max" else 1.0
    row_duals = sense_sign * y_full

    value = float(lp.c @ x)
    A, b, ops = lp.dense()

    resid = A @ x - b if m else np.zeros(0)
    pr = 0.0
    for i, op in enumerate(ops):
        scale = 1.0 + abs(b[i])
        if op == "eq":
            pr = max(pr, abs(resid[i]) / scale)
        elif op == "le":
            pr = max(pr, max(resid[i], 0.0) / scale)
        else:
            pr = max(pr, max(-resid[i], 0.0) / scale)
    if (~lp.free).any():
        pr = max(pr, float(np.max(np.maximum(-x[~lp.free], 0.0), initial=0.0)))

    dual_value = float(row_duals @ b) if m else 0.0
    gap = abs(value - dual_value) / (1.0 + abs(value))

    ryA = row_duals @ A if m else np.zeros(lp.n_vars)
    rc = (ryA - lp.c) if lp.sense == "max" else (lp.c - ryA)
    obj_scale = 1.0 + float(np.max(np.abs(lp.c), initial=0.0))
    dr = 0.0
    for j in range(lp.n_vars):
        dr = max(dr, abs(rc[j]) if lp.free[j] else max(-rc[j], 0.0))
    for i, op in enumerate(ops):
        s = row_duals[i] if lp.sense == "max" else -row_duals[i]
        if op == "le":
            dr = max(dr, max(-s, 0.0))
        elif op == "ge":
            dr = max(dr, max(s, 0.0))
    dr /= obj_scale

    if pr > PRIMAL_CERT_TOL or dr > DUAL_CERT_TOL or gap > GAP_RTOL:
        raise LPNumericalError(
            f"solution failed certification: primal {pr:.2e} dual {dr:.2e} gap {gap:.2e}")

    duals = {lp.rows[i].label: float(row_duals[i]) for i in range(lp.n_rows)}
    return LPSolution("optimal", value, x, duals, row_duals, it2,
                      basis=tuple(int(j) for j in basis),
                      primal_residual=pr, dual_residual=dr, gap=gap)
