"""Pricing programs for early-exercise claims under volatility uncertainty.

Six values of the same claim appear, in a fixed order:

* base superhedge: cheapest initial capital such that dynamic trading
  (restartable at the exercise date), static option positions and
  variance-band positions dominate the payoff at every exercise date on
  every chargeable scenario;
* joint superhedge: the same program on the joint lattice, where option
  values are extra traded coordinates and the static leg disappears;
* lifted value: backward induction on the joint lattice;
* enlarged value: the exercise-date-times-scenario linear program on the
  same joint lattice (these two agree);
* calibrated randomized value: the enlarged program on the base lattice
  with calibration rows (randomized exercise, static information);
* static-information value: best pure exercise rule against the worst
  admissible measure, by enumeration.

Each value dominates the next, and the gap between the lifted and static
values prices the information carried by quoted options that a static
position cannot use.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import CapExceededError, InfeasibleError, LPNumericalError
from .lattice import EnlargedIndex, FiltrationAtom, JointLattice, Lattice
from .linprog import LinearProgram, LPSolution, solve_lp
from .measures import (EnlargedMeasure, ModelClass, PathMeasure,
                       StaticOptionSet, VolatilityBand, epsilon_modify)
from .stopping import DEFAULT_RULE_CAP, StoppingRule, enumerate_rules, is_adapted

CHARGEABLE_TOL = 1e-12
CHAIN_TOL = 1e-7
DPP_TIE_TOL = 1e-12


# ---------------------------------------------------------------------------
# payoffs
# ---------------------------------------------------------------------------

class AmericanPayoff:
    """An adapted payoff table, one value per (date, path).

    ``exercise_dates`` restricts when the holder may exercise (date
    indices, must include the terminal date); None allows every date.
    """

    def __init__(self, lattice: Lattice, table, *,
                 exercise_dates: Sequence[int] | None = None):
        self.lattice = lattice
        arr = np.asarray(table, dtype=float)
        if arr.shape != (lattice.n_dates, lattice.n_paths):
            raise ValueError("payoff table must be (n_dates, n_paths)")
        if not is_adapted(lattice, arr, tol=0.0):
            from .errors import NonAdaptedError
            raise NonAdaptedError("payoff table must be adapted")
        self.table = arr
        T = lattice.terminal_index
        if exercise_dates is None:
            self.exercise_dates = tuple(range(lattice.n_dates))
        else:
            ed = tuple(sorted(set(int(u) for u in exercise_dates)))
            if not ed or ed[0] < 0 or ed[-1] > T:
                raise ValueError("exercise dates out of range")
            if T not in ed:
                raise ValueError("exercise dates must include the terminal date")
            self.exercise_dates = ed

    @property
    def lower_bound(self) -> float:
        return float(min(self.table[u].min() for u in self.exercise_dates))

    @classmethod
    def from_function(cls, lattice: Lattice,
                      fn: Callable[[float, np.ndarray], float], *,
                      exercise_dates: Sequence[int] | None = None) -> "AmericanPayoff":
        """Tabulate fn(date, state) over the lattice."""
        table = np.empty((lattice.n_dates, lattice.n_paths))
        for t, date in enumerate(lattice.grid.dates):
            for p in range(lattice.n_paths):
                table[t, p] = fn(date, lattice.path_values[p, t])
        return cls(lattice, table, exercise_dates=exercise_dates)

    @classmethod
    def european(cls, lattice: Lattice, terminal_values) -> "AmericanPayoff":
        """A terminal claim as an exercise-anytime payoff.

        Every pre-terminal value sits strictly below the terminal minimum,
        so early exercise is never optimal and never binds a superhedge.
        """
        f = np.asarray(terminal_values, dtype=float)
        if f.shape != (lattice.n_paths,):
            raise ValueError("one terminal value per path")
        sentinel = float(f.min()) - 1.0
        table = np.full((lattice.n_dates, lattice.n_paths), sentinel)
        table[-1] = f
        return cls(lattice, table)


def lift_payoff(joint: JointLattice, payoff: AmericanPayoff) -> AmericanPayoff:
    """Transport a base payoff to the joint lattice.

    Base exercise dates shift by one; the pre date pays the date-0 value
    and is exercisable whenever date 0 is (the state has not moved yet, so
    this adds no value, only uniformity).
    """
    if payoff.lattice is not joint.base and \
            payoff.lattice.n_paths != joint.base.n_paths:
        raise ValueError("payoff does not live on the joint lattice's base")
    jl = joint.lattice
    table = np.empty((jl.n_dates, jl.n_paths))
    table[0] = payoff.table[0, joint.base_path_id]
    for jt in range(1, jl.n_dates):
        table[jt] = payoff.table[jt - 1, joint.base_path_id]
    dates = tuple(u + 1 for u in payoff.exercise_dates)
    if 0 in payoff.exercise_dates:
        dates = (0,) + dates
    return AmericanPayoff(jl, table, exercise_dates=dates)


def band_for_joint(joint: JointLattice, base_band: VolatilityBand) -> VolatilityBand:
    """Read a base-atom volatility band through the joint lattice.

    The state coordinates keep their base bounds; the option-value
    coordinates are unconstrained, and so is the pre-date step.
    """
    jl = joint.lattice
    d, m = joint.x_dim, joint.m
    by_atom = {}
    free = (np.zeros(m), np.full(m, np.inf))
    for jt in range(1, jl.n_dates - 1):
        seen = set()
        for jp in range(jl.n_paths):
            node = int(jl.path_nodes[jp, jt])
            if node in seen:
                continue
            seen.add(node)
            b = joint.base_date(jt)
            base_node = joint.base_node_for(jt, jp)
            lo, hi = base_band.bounds(b, base_node)
            by_atom[(jt, node)] = (np.concatenate([lo, free[0]]),
                                   np.concatenate([hi, free[1]]))
    return VolatilityBand(d + m, by_atom=by_atom)


# ---------------------------------------------------------------------------
# admissible-measure rows (shared by several programs)
# ---------------------------------------------------------------------------

def _add_base_rows(lp: LinearProgram, model: ModelClass, *,
                   include_calibration: bool = True) -> None:
    """Mass, martingale, band and calibration rows for one weight per path."""
    lat = model.lattice
    n = lat.n_paths
    lp.add_row(range(n), np.ones(n), "eq", 1.0, label=("mass",))
    for t in range(lat.n_dates - 1):
        for atom in lat.atoms(t):
            ids = list(atom.path_ids)
            dx = lat.increments[ids, t]
            for k in range(lat.dim):
                lp.add_row(ids, dx[:, k], "eq", 0.0,
                           label=("mart", t, atom.node_id, k))
            if not model.band.is_constrained(t, atom.node_id):
                continue
            lo, hi = model.band.bounds(t, atom.node_id)
            for k in range(lat.dim):
                if lo[k] > 0:
                    lp.add_row(ids, dx[:, k] ** 2 - lo[k], "ge", 0.0,
                               label=("band_lo", t, atom.node_id, k))
                if np.isfinite(hi[k]):
                    lp.add_row(ids, hi[k] - dx[:, k] ** 2, "ge", 0.0,
                               label=("band_hi", t, atom.node_id, k))
    if include_calibration and model.options is not None:
        for i in range(model.options.n_options):
            lp.add_row(range(n), model.options.matrix[i], "eq", 0.0,
                       label=("calib", i))


@dataclass
class ChargeableSupport:
    """Which scenarios any admissible calibrated measure can charge."""

    chargeable: np.ndarray          # bool per path
    max_weight: np.ndarray          # best achievable weight per path
    tol: float = CHARGEABLE_TOL

    @property
    def path_ids(self) -> np.ndarray:
        return np.nonzero(self.chargeable)[0]


def chargeable_support(model: ModelClass, *,
                       tol: float = CHARGEABLE_TOL) -> ChargeableSupport:
    """Maximal weight each scenario can carry in the admissible class.

    One LP per path, warm-started along the sweep.  Raises InfeasibleError
    when the admissible class itself is empty.
    """
    lat = model.lattice
    n = lat.n_paths
    lp = LinearProgram(n, sense="max")
    _add_base_rows(lp, model)
    best = np.zeros(n)
    basis = None
    for p in range(n):
        lp.c[:] = 0.0
        lp.c[p] = 1.0
        sol = solve_lp(lp, warm_basis=basis)
        if sol.status == "infeasible":
            raise InfeasibleError(
                "no admissible calibrated measure exists on this lattice")
        basis = sol.basis
        best[p] = sol.value
    return ChargeableSupport(best >= tol, best, tol)


# ---------------------------------------------------------------------------
# the enlarged primal
# ---------------------------------------------------------------------------

@dataclass
class EnlargedSolveResult:
    value: float
    measure: EnlargedMeasure
    solution: LPSolution


def primal_enlarged(model: ModelClass, payoff: AmericanPayoff, *,
                    theta_dates: Sequence[int] | None = None,
                    eps: float | None = None) -> EnlargedSolveResult:
    """Best exercise-randomizing value over admissible enlarged measures.

    Variables weight (exercise date, scenario) pairs.  Martingale rows
    condition on every exercise-status group of each atom: the scenario
    marginal must stay a martingale after exercise, so collecting the
    payoff never buys freedom to steer the remaining path.  Band rows
    follow the model's conditioning convention (per status group when
    enlarged, on the scenario marginal when pooled).  With ``eps`` the
    supremum runs over epsilon-modifications of admissible measures (a
    fraction eps of every scenario's mass is held to expiry), which
    reweights the objective linearly and keeps the feasible set
    unchanged; the returned measure is the modified one.
    """
    lat = model.lattice
    if theta_dates is None:
        theta_dates = payoff.exercise_dates
    index = EnlargedIndex(lat, theta_dates)
    n = lat.n_paths
    nv = index.n_elements
    lp = LinearProgram(nv, sense="max")
    for kt, u in enumerate(index.theta_dates):
        if u not in payoff.exercise_dates:
            raise ValueError(f"date index {u} is not exercisable for this payoff")
        lp.c[kt * n:(kt + 1) * n] = payoff.table[u]
    if eps is not None:
        if not 0 < eps < 1:
            raise ValueError("eps must lie in (0, 1)")
        terminal_row = payoff.table[index.theta_dates[-1]]
        lp.c *= 1.0 - eps
        lp.c += eps * np.tile(terminal_row, index.n_theta)

    cols_all = np.arange(nv)
    lp.add_row(cols_all, np.ones(nv), "eq", 1.0, label=("mass",))

    for t in range(lat.n_dates - 1):
        for ea in index.enlarged_atoms(t):
            cols = [index.flat(kt, p) for kt, p in ea.members]
            dx = np.array([lat.increments[p, t] for _, p in ea.members])
            for k in range(lat.dim):
                lp.add_row(cols, dx[:, k], "eq", 0.0,
                           label=("mart", t, ea.node_id, ea.status, k))
            if model.conditioning == "enlarged" and \
                    model.band.is_constrained(t, ea.node_id):
                lo, hi = model.band.bounds(t, ea.node_id)
                for k in range(lat.dim):
                    if lo[k] > 0:
                        lp.add_row(cols, dx[:, k] ** 2 - lo[k], "ge", 0.0,
                                   label=("band_lo", t, ea.node_id, ea.status, k))
                    if np.isfinite(hi[k]):
                        lp.add_row(cols, hi[k] - dx[:, k] ** 2, "ge", 0.0,
                                   label=("band_hi", t, ea.node_id, ea.status, k))

    if model.conditioning == "pooled":
        for t in range(lat.n_dates - 1):
            for atom in lat.atoms(t):
                if not model.band.is_constrained(t, atom.node_id):
                    continue
                lo, hi = model.band.bounds(t, atom.node_id)
                cols = [index.flat(kt, p) for kt in range(index.n_theta)
                        for p in atom.path_ids]
                dx = np.array([lat.increments[p, t]
                               for _ in range(index.n_theta)
                               for p in atom.path_ids])
                for k in range(lat.dim):
                    if lo[k] > 0:
                        lp.add_row(cols, dx[:, k] ** 2 - lo[k], "ge", 0.0,
                                   label=("band_lo", t, atom.node_id, k))
                    if np.isfinite(hi[k]):
                        lp.add_row(cols, hi[k] - dx[:, k] ** 2, "ge", 0.0,
                                   label=("band_hi", t, atom.node_id, k))

    if model.options is not None:
        g = model.options.matrix
        for i in range(g.shape[0]):
            vals = np.tile(g[i], index.n_theta)
            lp.add_row(cols_all, vals, "eq", 0.0, label=("calib", i))

    sol = solve_lp(lp)
    if sol.status == "infeasible":
        raise InfeasibleError("no admissible exercise measure exists")
    if sol.status != "optimal":
        raise LPNumericalError(f"enlarged primal ended with status {sol.status}")
    w = sol.x.reshape(index.n_theta, n).copy()
    # solver dust on a degenerate optimal vertex is not exercise mass
    w[w < 1e-14] = 0.0
    em = EnlargedMeasure(index, w)
    if eps is not None:
        em = epsilon_modify(em, eps)
    return EnlargedSolveResult(sol.value, em, sol)


# ---------------------------------------------------------------------------
# robust backward induction
# ---------------------------------------------------------------------------

@dataclass
class DppResult:
    value: float
    values: np.ndarray              # (n_dates, n_paths), adapted
    stop: np.ndarray                # bool (n_dates, n_paths): exercise here
    kernels: dict                   # (t, node) -> (child nodes, weights) or None
    witness: EnlargedMeasure | None
    kernel_free_atoms: tuple = ()   # atoms where no admissible kernel exists


def _kernel_lp(dx, lo, hi, values):
    """One-step best kernel over given children.

    Maximizes sum q * values over probability vectors with zero mean
    increment and banded second moment; returns (value, q) or None when no
    kernel is feasible.
    """
    k, d = dx.shape
    lp = LinearProgram(k, sense="max")
    lp.set_objective(range(k), values)
    lp.add_row(range(k), np.ones(k), "eq", 1.0, label=("prob",))
    for j in range(d):
        lp.add_row(range(k), dx[:, j], "eq", 0.0, label=("mean", j))
        if lo is not None and lo[j] > 0:
            lp.add_row(range(k), dx[:, j] ** 2 - lo[j], "ge", 0.0,
                       label=("lo", j))
        if hi is not None and np.isfinite(hi[j]):
            lp.add_row(range(k), hi[j] - dx[:, j] ** 2, "ge", 0.0,
                       label=("hi", j))
    sol = solve_lp(lp)
    if sol.status != "optimal":
        return None
    return sol.value, sol.x


def robust_dpp(model: ModelClass, payoff: AmericanPayoff, *,
               build_witness: bool = True) -> DppResult:
    """Backward induction against the worst-case one-step kernels.

    At each atom the continuation value is the best admissible one-step
    kernel applied to the next-date values (the claim holder picks the
    kernel: this is the buyer's robust value).  Exercise is compared only
    at exercisable dates.  Atoms with no admissible kernel and no exercise
    right are dead; kernels may not charge them.
    """
    lat = model.lattice
    T = lat.terminal_index
    n = lat.n_paths
    allowed = set(payoff.exercise_dates)
    V = np.full((lat.n_dates, n), np.nan)
    stop = np.zeros((lat.n_dates, n), dtype=bool)
    kernels: dict = {}
    V[T] = payoff.table[T]
    stop[T] = True

    node_value_at: dict[tuple[int, int], float] = {}
    for atom in lat.atoms(T):
        node_value_at[(T, atom.node_id)] = float(payoff.table[T, atom.path_ids[0]])

    for t in range(T - 1, -1, -1):
        for atom in lat.atoms(t):
            children = lat.node_children[atom.node_id]
            live, dx_rows, vals = [], [], []
            for c in children:
                key = (t + 1, c)
                if key in node_value_at and node_value_at[key] is not None:
                    live.append(c)
                    dx_rows.append(lat.node_value[c] - lat.node_value[atom.node_id])
                    vals.append(node_value_at[key])
            cont = None
            if live:
                lo, hi = model.band.bounds(t, atom.node_id)
                got = _kernel_lp(np.array(dx_rows), lo, hi, np.array(vals))
                if got is not None:
                    cont = got[0]
                    kernels[(t, atom.node_id)] = (tuple(live), got[1])
            if cont is None:
                kernels[(t, atom.node_id)] = None
            if t in allowed:
                z = float(payoff.table[t, atom.path_ids[0]])
                if cont is None or z >= cont - DPP_TIE_TOL:
                    node_value_at[(t, atom.node_id)] = z
                    stop[t, list(atom.path_ids)] = True
                else:
                    node_value_at[(t, atom.node_id)] = cont
            else:
                node_value_at[(t, atom.node_id)] = cont
            v = node_value_at[(t, atom.node_id)]
            V[t, list(atom.path_ids)] = np.nan if v is None else v

    roots = [(node_value_at[(0, a.node_id)], a) for a in lat.atoms(0)]
    roots = [(v, a) for v, a in roots if v is not None]
    if not roots:
        raise InfeasibleError("every initial atom is dead")
    value, start = max(roots, key=lambda pair: pair[0])

    witness = None
    if build_witness:
        witness = _dpp_witness(model, payoff, lat, start, stop, kernels)
    dead = tuple(key for key, got in kernels.items() if got is None)
    return DppResult(float(value), V, stop, kernels, witness, dead)


def _dpp_witness(model, payoff, lat, start_atom, stop, kernels) -> EnlargedMeasure:
    """Forward mass flow along the optimal kernels, exercising per ``stop``.

    Exercised mass still needs a scenario extension to expiry.  It keeps
    following the stored kernels, which keeps the extension a banded
    martingale as the admissible class requires.  Where no kernel exists
    it spreads uniformly: below such an atom the class is empty anyway,
    so the witness only certifies atoms with kernels.
    """
    index = EnlargedIndex(lat, payoff.exercise_dates)
    positions = {u: kt for kt, u in enumerate(index.theta_dates)}
    T = lat.terminal_index
    w = np.zeros((index.n_theta, lat.n_paths))

    def extend(node: int, t: int, mass: float, out: dict[int, float]):
        if t == T:
            # a terminal node belongs to exactly one stored path
            for atom in lat.atoms(T):
                if atom.node_id == node:
                    out[atom.path_ids[0]] = out.get(atom.path_ids[0], 0.0) + mass
                    return
            raise RuntimeError("unreachable terminal node")
        got = kernels.get((t, node))
        children = lat.node_children[node]
        if got is not None:
            live, q = got
            for c, qc in zip(live, q):
                if qc > 0:
                    extend(c, t + 1, mass * qc, out)
        else:
            share = mass / len(children)
            for c in children:
                extend(c, t + 1, share, out)

    frontier: dict[int, float] = {start_atom.node_id: 1.0}
    for t in range(lat.n_dates):
        nxt: dict[int, float] = {}
        for node, mass in frontier.items():
            if mass <= 0:
                continue
            some_path = next(p for p in range(lat.n_paths)
                             if lat.path_nodes[p, t] == node)
            if stop[t, some_path]:
                spread: dict[int, float] = {}
                extend(node, t, mass, spread)
                kt = positions[t]
                for p, m in spread.items():
                    w[kt, p] += m
            else:
                got = kernels.get((t, node))
                if got is None:
                    raise RuntimeError("continuing at a kernel-free atom")
                live, q = got
                for c, qc in zip(live, q):
                    if qc > 0:
                        nxt[c] = nxt.get(c, 0.0) + mass * qc
        frontier = nxt
    return EnlargedMeasure(index, w)


# ---------------------------------------------------------------------------
# static information value
# ---------------------------------------------------------------------------

@dataclass
class StaticResult:
    value: float
    rule: StoppingRule
    measure: PathMeasure
    per_rule: dict
    ascent_rounds: int = 0


def static_info_value(model: ModelClass, payoff: AmericanPayoff, *,
                      rule_cap: int = DEFAULT_RULE_CAP,
                      alternating_ascent: bool = False) -> StaticResult:
    """Best pure exercise rule against worst admissible measure.

    Enumerates every adapted rule compatible with the payoff's exercise
    dates and prices each with a warm-started measure program.  With
    ``alternating_ascent`` the winner is polished by alternating
    best-rule-for-measure and best-measure-for-rule steps (useful as a
    cross-check; enumeration is already exact).
    """
    lat = model.lattice
    n = lat.n_paths
    allowed = set(payoff.exercise_dates)
    rules = [r for r in enumerate_rules(lat, cap=rule_cap)
             if all(u in allowed for u in r.dates)]
    if not rules:
        raise InfeasibleError("no exercise rule is compatible with the payoff")

    lp = LinearProgram(n, sense="max")
    _add_base_rows(lp, model)
    best: tuple[float, StoppingRule, PathMeasure] | None = None
    per_rule: dict = {}
    basis = None
    for rule in rules:
        lp.c[:] = rule.payoff_collected(payoff.table)
        sol = solve_lp(lp, warm_basis=basis)
        if sol.status == "infeasible":
            raise InfeasibleError(
                "no admissible calibrated measure exists on this lattice")
        basis = sol.basis
        per_rule[rule.dates] = sol.value
        if best is None or sol.value > best[0] + 1e-15:
            best = (sol.value, rule, PathMeasure(lat, sol.x))

    value, rule, measure = best
    rounds = 0
    if alternating_ascent:
        for rounds in range(1, 20):
            snell = _best_rule_for_measure(lat, payoff, measure)
            if snell.dates == rule.dates:
                break
            lp.c[:] = snell.payoff_collected(payoff.table)
            sol = solve_lp(lp, warm_basis=basis)
            basis = sol.basis
            if sol.value <= value + 1e-12:
                break
            value, rule, measure = sol.value, snell, PathMeasure(lat, sol.x)
    return StaticResult(value, rule, measure, per_rule, rounds)


def _best_rule_for_measure(lat: Lattice, payoff: AmericanPayoff,
                           measure: PathMeasure) -> StoppingRule:
    """Optimal adapted exercise against a fixed measure (value recursion)."""
    T = lat.terminal_index
    allowed = set(payoff.exercise_dates)
    val: dict[tuple[int, int], float] = {}
    act: dict[tuple[int, int], bool] = {}
    for t in range(T, -1, -1):
        for atom in lat.atoms(t):
            ids = list(atom.path_ids)
            if t == T:
                val[(t, atom.node_id)] = float(payoff.table[T, ids[0]])
                act[(t, atom.node_id)] = True
                continue
            m = measure.weights[ids].sum()
            cont = 0.0
            if m > 0:
                cont = sum(measure.weights[p] *
                           val[(t + 1, int(lat.path_nodes[p, t + 1]))]
                           for p in ids) / m
            else:
                cont = np.mean([val[(t + 1, int(lat.path_nodes[p, t + 1]))]
                                for p in ids])
            if t in allowed and payoff.table[t, ids[0]] >= cont - DPP_TIE_TOL:
                val[(t, atom.node_id)] = float(payoff.table[t, ids[0]])
                act[(t, atom.node_id)] = True
            else:
                val[(t, atom.node_id)] = cont
                act[(t, atom.node_id)] = False
    dates = []
    for p in range(lat.n_paths):
        for t in range(lat.n_dates):
            if act[(t, int(lat.path_nodes[p, t]))]:
                dates.append(t)
                break
    return StoppingRule(lat, tuple(dates))


# ---------------------------------------------------------------------------
# superhedging duals
# ---------------------------------------------------------------------------

@dataclass
class HedgePlan:
    """Explicit superhedge read off a dual optimum.

    ``trading[(t, node)]`` holds the state position over the step t to
    t+1; ``restart_trading[(u, t, node)]`` replaces it from the exercise
    date on when the plan was built with strategy switching.  The variance
    legs pay (step increment squared minus the upper bound) per unit of
    ``variance_long`` and (lower bound minus increment squared) per unit
    of ``variance_short``; both are nonnegative positions whose payout is
    never positive in-band, which is what makes them admissible.
    """

    initial_capital: float
    trading: dict
    restart_trading: dict
    option_position: np.ndarray | None
    variance_long: dict
    variance_short: dict
    restart_variance_long: dict
    restart_variance_short: dict
    band_switching: bool = True

    def wealth(self, model: ModelClass, exercise_date: int, path_id: int) -> float:
        """Terminal wealth when the holder exercises at the date on the path."""
        lat = model.lattice
        T = lat.terminal_index
        total = self.initial_capital
        if self.option_position is not None and model.options is not None:
            total += float(self.option_position @
                           model.options.matrix[:, path_id])
        for t in range(T):
            node = int(lat.path_nodes[path_id, t])
            dx = lat.increments[path_id, t]
            pre = t < exercise_date
            if pre:
                q = self.trading.get((t, node))
            else:
                q = self.restart_trading.get((exercise_date, t, node))
            if pre or not self.band_switching:
                al = self.variance_long.get((t, node))
                ash = self.variance_short.get((t, node))
            else:
                al = self.restart_variance_long.get((exercise_date, t, node))
                ash = self.restart_variance_short.get((exercise_date, t, node))
            lo, hi = model.band.bounds(t, node)
            if q is not None:
                total += float(q @ dx)
            if al is not None:
                total += float(al @ (dx * dx - hi))
            if ash is not None:
                total += float(ash @ (lo - dx * dx))
        return total


@dataclass
class DualSolveResult:
    value: float
    plan: HedgePlan
    solution: LPSolution
    support: ChargeableSupport
    witness_weights: dict           # (u, path) -> shadow weight


def dual_superhedge_american(model: ModelClass, payoff: AmericanPayoff, *,
                             allow_restart: bool = True,
                             use_band_positions: bool = True,
                             support: ChargeableSupport | None = None) -> DualSolveResult:
    """Cheapest superhedge dominating the payoff at every exercise.

    The dynamic book runs until the holder exercises; a fresh book,
    chosen per exercise date, may run afterwards.  The restart legs
    transpose the post-exercise martingale and band rows of the
    randomized-exercise primal, so with them the two programs are exact
    duals.  With ``allow_restart=False`` the post-exercise book is pinned
    to zero, which never changes the value when no options are quoted
    (there is nothing left to hedge after exercise).
    ``use_band_positions=False`` removes the variance legs, leaving a
    strict pathwise hedge.  Domination rows run over chargeable
    scenarios only.
    """
    lat = model.lattice
    T = lat.terminal_index
    if support is None:
        support = chargeable_support(model)
    charge = support.path_ids
    if charge.size == 0:
        raise InfeasibleError("no scenario is chargeable")

    # variable registry
    var: dict = {}

    def new_var(key) -> int:
        if key in var:
            return var[key]
        var[key] = len(var)
        return var[key]

    x0 = new_var(("capital",))
    atoms_at: list[list[FiltrationAtom]] = [lat.atoms(t) for t in range(lat.n_dates)]
    charge_set = set(int(p) for p in charge)

    def atom_charged(atom) -> bool:
        return any(p in charge_set for p in atom.path_ids)

    for t in range(T):
        for atom in atoms_at[t]:
            if not atom_charged(atom):
                continue
            for k in range(lat.dim):
                new_var(("trade", t, atom.node_id, k))
                if use_band_positions and model.band.is_constrained(t, atom.node_id):
                    lo, hi = model.band.bounds(t, atom.node_id)
                    if np.isfinite(hi[k]):
                        new_var(("varlong", t, atom.node_id, k))
                    if lo[k] > 0:
                        new_var(("varshort", t, atom.node_id, k))
    band_switches = use_band_positions and model.conditioning == "enlarged"
    if allow_restart:
        for u in payoff.exercise_dates:
            for t in range(u, T):
                for atom in atoms_at[t]:
                    if not atom_charged(atom):
                        continue
                    for k in range(lat.dim):
                        new_var(("retrade", u, t, atom.node_id, k))
                        if band_switches and \
                                model.band.is_constrained(t, atom.node_id):
                            lo, hi = model.band.bounds(t, atom.node_id)
                            if np.isfinite(hi[k]):
                                new_var(("revarlong", u, t, atom.node_id, k))
                            if lo[k] > 0:
                                new_var(("revarshort", u, t, atom.node_id, k))
    if model.options is not None:
        for i in range(model.options.n_options):
            new_var(("option", i))

    lp = LinearProgram(len(var), sense="min")
    free_cols = [idx for key, idx in var.items()
                 if not key[0].startswith("var") and not key[0].startswith("revar")]
    lp.set_free(free_cols)
    lp.set_objective([x0], [1.0])

    for u in payoff.exercise_dates:
        for p in charge:
            p = int(p)
            cols = [x0]
            vals = [1.0]
            for t in range(T):
                node = int(lat.path_nodes[p, t])
                dx = lat.increments[p, t]
                pre = t < u
                trade_key = long_key = short_key = None
                if pre:
                    trade_key = ("trade", t, node)
                    long_key = ("varlong", t, node)
                    short_key = ("varshort", t, node)
                else:
                    if allow_restart:
                        trade_key = ("retrade", u, t, node)
                        if band_switches:
                            long_key = ("revarlong", u, t, node)
                            short_key = ("revarshort", u, t, node)
                    if not band_switches:
                        # pooled bands do not condition on exercise: the
                        # same variance book runs through expiry
                        long_key = ("varlong", t, node)
                        short_key = ("varshort", t, node)
                lo, hi = model.band.bounds(t, node)
                for k in range(lat.dim):
                    if trade_key is not None:
                        cols.append(var[trade_key + (k,)])
                        vals.append(float(dx[k]))
                    if long_key is not None and long_key + (k,) in var:
                        cols.append(var[long_key + (k,)])
                        vals.append(float(dx[k] * dx[k] - hi[k]))
                    if short_key is not None and short_key + (k,) in var:
                        cols.append(var[short_key + (k,)])
                        vals.append(float(lo[k] - dx[k] * dx[k]))
            if model.options is not None:
                for i in range(model.options.n_options):
                    cols.append(var[("option", i)])
                    vals.append(float(model.options.matrix[i, p]))
            lp.add_row(cols, vals, "ge", float(payoff.table[u, p]),
                       label=("dominate", u, p))

    sol = solve_lp(lp)
    if sol.status == "unbounded":
        raise InfeasibleError(
            "superhedge cost is unbounded below; the chargeable support "
            "admits no consistent prices")
    if sol.status != "optimal":
        raise LPNumericalError(f"dual program ended with status {sol.status}")

    trading, restart, vlong, vshort, rvlong, rvshort = {}, {}, {}, {}, {}, {}
    hpos = None
    if model.options is not None:
        hpos = np.zeros(model.options.n_options)
    for key, idx in var.items():
        kind = key[0]
        v = float(sol.x[idx])
        if kind == "capital":
            continue
        if kind == "option":
            hpos[key[1]] = v
            continue
        *mid, k = key[1:]
        mid = tuple(mid)
        target = {"trade": trading, "retrade": restart,
                  "varlong": vlong, "varshort": vshort,
                  "revarlong": rvlong, "revarshort": rvshort}[kind]
        if mid not in target:
            target[mid] = np.zeros(lat.dim)
        target[mid][k] = v
    plan = HedgePlan(float(sol.x[x0]), trading, restart, hpos,
                     vlong, vshort, rvlong, rvshort, band_switches)
    shadow = {(u, p): d for (tag, u, p), d in sol.duals.items()
              if tag == "dominate" and d > 1e-12}
    return DualSolveResult(sol.value, plan, sol, support, shadow)


def dual_superhedge_european(model: ModelClass, claim, *,
                             support: ChargeableSupport | None = None) -> DualSolveResult:
    """Cheapest fixed-strategy superhedge of a terminal claim.

    ``claim`` is either one value per path, or a full (n_dates, n_paths)
    table of exercise-dependent terminal payouts for claims written on the
    exercise date itself (these need not be adapted: they are paid at
    expiry when the exercise history is known).
    """
    lat = model.lattice
    arr = np.asarray(claim, dtype=float)
    if arr.ndim == 1:
        payoff = AmericanPayoff.european(lat, arr)
        payoff = AmericanPayoff(lat, payoff.table,
                                exercise_dates=(lat.terminal_index,))
    elif arr.shape == (lat.n_dates, lat.n_paths):
        payoff = _TableClaim(lat, arr)
    else:
        raise ValueError("claim must be per path or (n_dates, n_paths)")
    # trading stops at the collection date and nothing restarts: this is
    # the exact transpose of the enlarged measure program
    return dual_superhedge_american(model, payoff, allow_restart=False,
                                    support=support)


class _TableClaim:
    """Adapter giving a raw (possibly non-adapted) table the payoff API."""

    def __init__(self, lattice: Lattice, table: np.ndarray):
        self.lattice = lattice
        self.table = table
        self.exercise_dates = tuple(range(lattice.n_dates))

    @property
    def lower_bound(self) -> float:
        return float(self.table.min())


def verify_superhedge(plan: HedgePlan, model: ModelClass,
                      payoff, support: ChargeableSupport, *,
                      tol: float = 1e-9) -> float:
    """Worst shortfall of the plan over chargeable (exercise, scenario)
    pairs; nonpositive (within tol) certifies domination."""
    worst = -np.inf
    for u in payoff.exercise_dates:
        for p in support.path_ids:
            gap = payoff.table[u, int(p)] - plan.wealth(model, u, int(p))
            worst = max(worst, gap)
    return worst


# ---------------------------------------------------------------------------
# lifted programs and the value chain
# ---------------------------------------------------------------------------

def lifted_model(joint: JointLattice, base_band: VolatilityBand) -> ModelClass:
    return ModelClass(joint.lattice, band_for_joint(joint, base_band),
                      options=None, conditioning="enlarged")


def lifted_american_value(joint: JointLattice, model: ModelClass,
                          payoff: AmericanPayoff, *,
                          build_witness: bool = True) -> DppResult:
    """Backward induction on the joint lattice (options as coordinates)."""
    jm = lifted_model(joint, model.band)
    jp = lift_payoff(joint, payoff)
    return robust_dpp(jm, jp, build_witness=build_witness)


def enlarged_joint_value(joint: JointLattice, model: ModelClass,
                         payoff: AmericanPayoff) -> EnlargedSolveResult:
    """The enlarged program on the joint lattice (options as coordinates)."""
    jm = lifted_model(joint, model.band)
    jp = lift_payoff(joint, payoff)
    return primal_enlarged(jm, jp)


@dataclass
class ValueReport:
    """The six values of one claim, ordered from hedger to holder.

    Two pairs are tied by exact LP duality: the base superhedge transposes
    the base randomized-exercise program (american_base =
    calibrated_randomized), and the joint superhedge transposes the joint
    one (american_joint = enlarged).  A base hedge lifts to a joint hedge
    by holding the option coordinates, so the base pair sits above the
    joint pair; lift_residual measures that drop.  It vanishes when the
    option-value grid of the joint lattice is rich enough to carry the
    base optimizer, and that is the finite-resolution question the report
    exists to answer.  static_info sits at the bottom: a pure adapted rule
    under a calibrated measure is one admissible randomized measure among
    many, and randomization correlated with the scenario can collect
    strictly more, which no amount of slack in the rules recovers.
    """

    american_base: float            # superhedge with static option legs
    calibrated_randomized: float    # base randomized-exercise program
    american_joint: float           # superhedge trading option values
    lifted: float                   # joint backward induction
    enlarged: float                 # joint randomized-exercise program
    static_info: float              # pure rules x worst measure
    tol: float = CHAIN_TOL

    @property
    def static_lifted_gap(self) -> float:
        """What quoted options are worth beyond any static position."""
        return self.lifted - self.static_info

    @property
    def lift_residual(self) -> float:
        """Value the finite option-value grid fails to carry."""
        return self.american_base - self.american_joint

    @property
    def ends_coincide(self) -> bool:
        """Whether the whole chain collapses at this resolution."""
        return abs(self.lift_residual) <= self.tol

    @property
    def chain_ok(self) -> bool:
        return (abs(self.american_base - self.calibrated_randomized) <= self.tol
                and self.american_base >= self.american_joint - self.tol
                and abs(self.american_joint - self.enlarged) <= self.tol
                and abs(self.lifted - self.enlarged) <= self.tol
                and self.calibrated_randomized >= self.enlarged - self.tol
                and self.enlarged >= self.static_info - self.tol)

    def as_dict(self) -> dict:
        return {
            "american_base": self.american_base,
            "calibrated_randomized": self.calibrated_randomized,
            "american_joint": self.american_joint,
            "lifted": self.lifted,
            "enlarged": self.enlarged,
            "static_info": self.static_info,
            "static_lifted_gap": self.static_lifted_gap,
            "lift_residual": self.lift_residual,
            "ends_coincide": self.ends_coincide,
            "chain_ok": self.chain_ok,
        }


def inequality_chain(model: ModelClass, payoff: AmericanPayoff,
                     joint: JointLattice, *,
                     rule_cap: int = DEFAULT_RULE_CAP) -> ValueReport:
    """Compute all six values of the claim and report the ordering."""
    support = chargeable_support(model)
    base_dual = dual_superhedge_american(model, payoff, support=support)
    jm = lifted_model(joint, model.band)
    jp = lift_payoff(joint, payoff)
    joint_dual = dual_superhedge_american(jm, jp)
    lifted = robust_dpp(jm, jp, build_witness=False)
    enlarged = primal_enlarged(jm, jp)
    randomized = primal_enlarged(model, payoff)
    static = static_info_value(model, payoff, rule_cap=rule_cap)
    return ValueReport(base_dual.value, randomized.value, joint_dual.value,
                       lifted.value, enlarged.value, static.value)
