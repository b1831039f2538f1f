"""Exercise rules, randomized exercise, and the multiplicative split.

The central object is the split of a randomized exercise time under a
scenario weighting into (equivalent scenario measure, increasing clock):
given an enlarged measure with scenario marginal w and exercise kernel r,
the recursion below produces a martingale density whose terminal value
reweights w into a measure P, and a path-adapted increasing clock A with
A_T = 1, such that collecting an adapted payoff at the exercise date under
the enlarged measure equals integrating the payoff against the clock
increments under P.  Pure (non-randomized) rules split exactly with no
adjustment; kernels whose remaining conditional exercise mass hits zero
while the clock has room left need a small hold-to-expiry mixture first
(see :func:`extract_pair`).

All tables in this module are (n_dates, n_paths) arrays indexed by date and
stored path.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import (CapExceededError, NonAdaptedError, SurvivalHitZeroError)
from .lattice import EnlargedIndex, Lattice, count_stopping_rules
from .measures import EnlargedMeasure, PathMeasure, epsilon_modify

SURVIVAL_GUARD = 1e-14
DEFAULT_EPS_FLOOR = 1e-6
DEFAULT_RULE_CAP = 20_000


# ---------------------------------------------------------------------------
# adaptedness helpers
# ---------------------------------------------------------------------------

def is_adapted(lattice: Lattice, table, *, tol: float = 0.0) -> bool:
    """True when table[t] is constant on every atom at date t."""
    arr = np.asarray(table, dtype=float)
    if arr.shape[0] != lattice.n_dates or arr.shape[1] != lattice.n_paths:
        raise ValueError("table must be (n_dates, n_paths, ...)")
    for t in range(lattice.n_dates):
        for atom in lattice.atoms(t):
            ids = list(atom.path_ids)
            ref = arr[t, ids[0]]
            if any(np.max(np.abs(arr[t, p] - ref)) > tol for p in ids[1:]):
                return False
    return True


def optional_projection(lattice: Lattice, reference_weights, table) -> np.ndarray:
    """E[table[t] | atom at t] under the reference weights, per (t, path).

    Zero-mass atoms project to zero.
    """
    w = np.asarray(reference_weights, dtype=float)
    arr = np.asarray(table, dtype=float)
    out = np.zeros_like(arr)
    for t in range(lattice.n_dates):
        for atom in lattice.atoms(t):
            ids = list(atom.path_ids)
            m = w[ids].sum()
            if m <= 0:
                continue
            out[t, ids] = (w[ids] @ arr[t, ids]) / m
    return out


def random_adapted_table(lattice: Lattice, rng: np.random.Generator) -> np.ndarray:
    """One independent standard normal draw per filtration atom."""
    out = np.empty((lattice.n_dates, lattice.n_paths))
    for t in range(lattice.n_dates):
        for atom in lattice.atoms(t):
            out[t, list(atom.path_ids)] = rng.normal()
    return out


# ---------------------------------------------------------------------------
# pure exercise rules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StoppingRule:
    """An adapted pure exercise rule, stored as a date index per path."""

    lattice: Lattice = field(compare=False)
    dates: tuple[int, ...]

    def __post_init__(self):
        lat = self.lattice
        if len(self.dates) != lat.n_paths:
            raise ValueError("one exercise date per path")
        T = lat.terminal_index
        if any(u < 0 or u > T for u in self.dates):
            raise ValueError("exercise date out of range")
        # adapted: within an atom, exercising now is an all-or-none decision
        # among the paths still alive
        for t in range(T + 1):
            for atom in lat.atoms(t):
                alive = [p for p in atom.path_ids if self.dates[p] >= t]
                flags = {self.dates[p] == t for p in alive}
                if len(flags) > 1:
                    raise NonAdaptedError(
                        f"rule is not adapted at date index {t}, node {atom.node_id}")

    @property
    def vector(self) -> np.ndarray:
        return np.asarray(self.dates, dtype=int)

    def stop_atoms(self) -> tuple[tuple[int, int], ...]:
        """Minimal (date index, node) pairs where the rule exercises."""
        lat = self.lattice
        out = {(u, int(lat.path_nodes[p, u])) for p, u in enumerate(self.dates)}
        return tuple(sorted(out))

    def kernel(self) -> np.ndarray:
        """The degenerate exercise kernel of the rule."""
        lat = self.lattice
        r = np.zeros((lat.n_dates, lat.n_paths))
        r[self.vector, np.arange(lat.n_paths)] = 1.0
        return r

    def payoff_collected(self, payoff_table) -> np.ndarray:
        Z = np.asarray(payoff_table, dtype=float)
        return Z[self.vector, np.arange(self.lattice.n_paths)]


def enumerate_rules(lattice: Lattice, *,
                    cap: int = DEFAULT_RULE_CAP) -> list[StoppingRule]:
    """All adapted pure exercise rules, in a canonical order.

    The count grows roughly doubly exponentially in depth, so the total is
    checked against ``cap`` before any enumeration happens.
    """
    total = count_stopping_rules(lattice)
    if total > cap:
        raise CapExceededError(
            f"{total} exercise rules exceed the cap of {cap}")
    T = lattice.terminal_index
    by_node: dict[int, list[int]] = {}
    for p in range(lattice.n_paths):
        for t in range(lattice.n_dates):
            by_node.setdefault(int(lattice.path_nodes[p, t]), []).append(p)

    def subtree(node: int) -> list[dict[int, int]]:
        t = int(lattice.node_date[node])
        stop_here = {p: t for p in by_node[node]}
        if t == T:
            return [stop_here]
        out = [stop_here]
        child_rules = [subtree(c) for c in lattice.node_children[node]]
        for combo in itertools.product(*child_rules):
            merged: dict[int, int] = {}
            for part in combo:
                merged.update(part)
            out.append(merged)
        return out

    root = int(lattice.path_nodes[0, 0])
    rules = []
    for assignment in subtree(root):
        dates = tuple(assignment[p] for p in range(lattice.n_paths))
        rules.append(StoppingRule(lattice, dates))
    return rules


def rule_to_enlarged(rule: StoppingRule, base: PathMeasure,
                     theta_dates: Sequence[int] | None = None) -> EnlargedMeasure:
    """The enlarged measure that follows ``base`` and exercises per the rule."""
    lat = rule.lattice
    if base.lattice is not lat and base.lattice.n_paths != lat.n_paths:
        raise ValueError("rule and measure live on different lattices")
    index = EnlargedIndex(lat, theta_dates)
    positions = {u: k for k, u in enumerate(index.theta_dates)}
    w = np.zeros((index.n_theta, lat.n_paths))
    for p, u in enumerate(rule.dates):
        if base.weights[p] == 0.0:
            continue
        if u not in positions:
            raise ValueError(
                f"rule exercises at date index {u}, outside the enlargement grid")
        w[positions[u], p] = base.weights[p]
    return EnlargedMeasure(index, w)


def disintegrate(measure: EnlargedMeasure) -> tuple[PathMeasure, np.ndarray]:
    """Split an enlarged measure into scenario marginal and exercise kernel.

    The kernel is a full (n_dates, n_paths) table; rows off the enlargement
    grid are zero, columns off the marginal support are zero.
    """
    marginal = measure.path_marginal()
    lat = measure.lattice
    r = np.zeros((lat.n_dates, lat.n_paths))
    sup = marginal.weights > 0
    for kt, u in enumerate(measure.index.theta_dates):
        r[u, sup] = measure.weights[kt, sup] / marginal.weights[sup]
    return marginal, r


# ---------------------------------------------------------------------------
# the multiplicative split
# ---------------------------------------------------------------------------

@dataclass
class ExerciseSplit:
    """Output of the multiplicative split of a randomized exercise time.

    Tables are (n_dates, n_paths).  ``pre_survival[t]`` is the conditional
    probability of exercising at t or later given the date-t atom;
    ``post_survival[t]`` the same strictly after t (zero at the terminal
    date).  ``martingale_part`` starts at one and has terminal value
    ``density``; ``clock`` is adapted, nondecreasing, and reaches one at
    the terminal date on the marginal support.  ``measure`` is the density
    reweighting of the scenario marginal.  Off-support columns are zeroed
    (clock one).
    """

    lattice: Lattice
    kernel: np.ndarray
    projected_kernel: np.ndarray
    pre_survival: np.ndarray
    post_survival: np.ndarray
    martingale_part: np.ndarray
    survival_factor: np.ndarray
    clock: np.ndarray
    density: np.ndarray
    marginal: PathMeasure
    measure: PathMeasure
    eps_applied: float = 0.0

    def clock_increments(self) -> np.ndarray:
        """Increments of the clock with the convention clock[-1] = 0."""
        first = self.clock[:1]
        return np.vstack([first, np.diff(self.clock, axis=0)])

    def exercise_date_at_level(self, level: float) -> np.ndarray:
        """First date index where the clock reaches the level, per path."""
        if not 0.0 < level <= 1.0:
            raise ValueError("level must lie in (0, 1]")
        hit = self.clock >= level - 1e-15
        return np.argmax(hit, axis=0)

    def clock_levels(self) -> np.ndarray:
        """Sorted distinct clock values, endpoints included."""
        sup = self.marginal.weights > 0
        vals = set(np.round(self.clock[:, sup], 15).ravel().tolist())
        vals |= {0.0, 1.0}
        return np.array(sorted(vals))


def multiplicative_decompose(measure: EnlargedMeasure, *,
                             strict_survival: bool = False,
                             guard: float = SURVIVAL_GUARD) -> ExerciseSplit:
    """Split an enlarged measure into scenario measure and exercise clock.

    The recursion per date, run on the marginal support, is

        martingale_part = pre_survival / prior_factor
        factor          = prior_factor * post_survival / pre_survival

    starting from prior_factor one, with the column frozen (factor zero,
    martingale part carried forward) once the prior factor is exhausted.
    With ``strict_survival`` the degenerate case of an exhausted
    conditional exercise supply while the factor is still positive raises
    :class:`SurvivalHitZeroError` instead of freezing; mixing in a small
    hold-to-expiry fraction (:func:`~amrobust.measures.epsilon_modify`)
    removes the degeneracy, which is what the error message advises.
    """
    lat = measure.lattice
    T = lat.terminal_index
    marginal, r = disintegrate(measure)
    w = marginal.weights
    sup = w > 0

    # remaining exercise mass and its conditional projections
    G = np.flip(np.cumsum(np.flip(r, axis=0), axis=0), axis=0)
    pre = optional_projection(lat, w, G)
    pk = optional_projection(lat, w, r)
    post = pre - pk
    np.clip(post, 0.0, None, out=post)
    post[T] = 0.0

    n = lat.n_paths
    M = np.zeros((lat.n_dates, n))
    D = np.zeros((lat.n_dates, n))
    prior = np.ones(n)
    for t in range(lat.n_dates):
        for p in np.nonzero(sup)[0]:
            if prior[p] <= guard:
                D[t, p] = 0.0
                M[t, p] = M[t - 1, p] if t > 0 else 1.0
            elif pre[t, p] <= guard:
                if strict_survival and t < T:
                    raise SurvivalHitZeroError(
                        f"conditional exercise supply vanished at date index {t} "
                        f"on path {p} while the decrement factor is "
                        f"{prior[p]:.3e}; mix in a hold-to-expiry fraction "
                        "(epsilon_modify) and retry")
                M[t, p] = 0.0
                D[t, p] = 0.0
            else:
                M[t, p] = pre[t, p] / prior[p]
                D[t, p] = prior[p] * post[t, p] / pre[t, p]
        prior = D[t].copy()

    clock = 1.0 - D
    clock[:, ~sup] = 1.0
    density = M[T].copy()
    extracted = PathMeasure(lat, density * w)
    return ExerciseSplit(lat, r, pk, pre, post, M, D, clock, density,
                         marginal, extracted)


def extract_pair(measure: EnlargedMeasure, *, eps: float | None = None,
                 eps_floor: float = DEFAULT_EPS_FLOOR) -> ExerciseSplit:
    """Split a measure, mixing in hold-to-expiry mass only when forced.

    With ``eps`` given, the mixture is applied up front.  Otherwise a
    strict split is attempted first, and only a degenerate exercise supply
    triggers the ``eps_floor`` mixture; pure rules and healthy kernels
    round-trip untouched.  ``eps_applied`` on the result records what
    happened.
    """
    if eps is not None:
        modified = epsilon_modify(measure, eps)
        out = multiplicative_decompose(modified, strict_survival=True)
        out.eps_applied = float(eps)
        return out
    try:
        return multiplicative_decompose(measure, strict_survival=True)
    except SurvivalHitZeroError:
        modified = epsilon_modify(measure, eps_floor)
        out = multiplicative_decompose(modified, strict_survival=True)
        out.eps_applied = float(eps_floor)
        return out


# ---------------------------------------------------------------------------
# verification of the split
# ---------------------------------------------------------------------------

@dataclass
class ReconstructionReport:
    collected: float            # payoff collected at exercise under the measure
    integrated: float           # clock integral under the extracted measure
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.error <= self.tol


def verify_reconstruction(measure: EnlargedMeasure, split: ExerciseSplit,
                          payoff_table, *, tol: float = 1e-10,
                          allow_non_adapted: bool = False) -> ReconstructionReport:
    """Check collection at exercise against the clock integral.

    The identity is specific to adapted payoffs; a non-adapted table is
    rejected unless ``allow_non_adapted`` is set (useful to demonstrate
    the failure).
    """
    lat = measure.lattice
    Z = np.asarray(payoff_table, dtype=float)
    if Z.shape != (lat.n_dates, lat.n_paths):
        raise ValueError("payoff table must be (n_dates, n_paths)")
    if not allow_non_adapted and not is_adapted(lat, Z, tol=0.0):
        raise NonAdaptedError(
            "payoff table is not adapted; the clock integral identity "
            "only holds for adapted payoffs")
    lhs = measure.expectation_stopped(Z)
    dA = split.clock_increments()
    rhs = float(split.measure.weights @ (Z * dA).sum(axis=0))
    return ReconstructionReport(lhs, rhs, abs(lhs - rhs), tol)


@dataclass
class PreservationReport:
    martingale_ok: bool
    max_martingale_violation: float
    band_ok: bool | None
    max_band_violation: float | None
    max_stopped_increment: float     # worst |E[X_T - X at exercise]| over levels
    calibration_residuals: np.ndarray | None

    @property
    def ok(self) -> bool:
        checks = [self.martingale_ok,
                  self.max_stopped_increment <= 1e-9]
        if self.band_ok is not None:
            checks.append(self.band_ok)
        return all(checks)


def verify_martingale_preservation(measure: EnlargedMeasure, split: ExerciseSplit,
                                   model=None, *,
                                   tol: float = 1e-10) -> PreservationReport:
    """Check what the extraction preserves.

    The extracted measure inherits the one-step martingale property and,
    under enlarged conditioning, the variance band, from the enlarged
    measure.  Optional-stopping at every clock level is checked exactly.
    Static calibration is generally *not* preserved; the residuals are
    reported without being asserted.
    """
    from .measures import check_constraints, validate_martingale

    P = split.measure
    mart = validate_martingale(P, tol=tol)

    band_ok = None
    band_viol = None
    cal = None
    if model is not None:
        rep = check_constraints(P, model)
        band_ok, band_viol = rep.band_ok, rep.max_band_violation
        if model.options is not None:
            cal = model.options.residuals(P)

    lat = measure.lattice
    worst = 0.0
    levels = split.clock_levels()
    xT = lat.path_values[:, -1, :]
    for lo, hi in zip(levels[:-1], levels[1:]):
        if hi - lo <= 1e-15:
            continue
        taus = split.exercise_date_at_level(0.5 * (lo + hi))
        x_at = lat.path_values[np.arange(lat.n_paths), taus, :]
        gapv = P.weights @ (xT - x_at)
        worst = max(worst, float(np.max(np.abs(gapv), initial=0.0)))
    return PreservationReport(mart.ok, mart.max_violation, band_ok, band_viol,
                              worst, cal)
