"""Measures on scenario lattices and the constraint sets that price them.

Two kinds of measure appear.  A :class:`PathMeasure` weights the stored
scenarios of a lattice.  An :class:`EnlargedMeasure` weights (exercise
date, scenario) pairs of an :class:`~amrobust.lattice.EnlargedIndex`; its
scenario marginal is a PathMeasure.

Model uncertainty is captured by :class:`ModelClass`: a lattice, a
volatility band constraining one-step conditional variances, optionally a
set of statically tradeable options whose net payoff must price to zero,
and the conditioning convention for how the band reads on enlarged
measures.  Under "enlarged" conditioning the band constrains every
exercise-status group of each atom; under "pooled" conditioning it
constrains the scenario marginal per base atom.  The two differ as soon
as status groups carry different variances, and only the enlarged
reading reproduces backward-induction values.  The martingale property
is not a convention: every status group must be drift-free under either
reading, because the scenario marginal of an admissible enlarged measure
is itself an admissible scenario measure, exercised or not.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InfeasibleError
from .lattice import (EnlargedIndex, JointLattice, Lattice, VALUE_DECIMALS)

NEG_WEIGHT_TOL = 1e-12
MARTINGALE_TOL = 1e-10
BAND_TOL = 1e-9
CALIBRATION_TOL = 1e-9


def _clean_weights(weights, shape) -> np.ndarray:
    w = np.asarray(weights, dtype=float).reshape(shape).copy()
    if w.size and w.min() < -NEG_WEIGHT_TOL:
        raise ValueError(f"negative weight {w.min():.3e}")
    np.clip(w, 0.0, None, out=w)
    return w


# ---------------------------------------------------------------------------
# volatility bands
# ---------------------------------------------------------------------------

class VolatilityBand:
    """Per-step bounds on conditional variance of the price increments.

    ``bounds(t, node_id)`` returns (lo, hi) vectors for the increment from
    date index t to t+1 conditional on the atom at node_id.  Resolution
    order: per-atom entry, then per-date entry, then the uniform default,
    then the trivial band [0, inf).  Bounds are in per-step variance units
    on the same scale as the lattice increments.
    """

    def __init__(self, dim: int, *, default=None, by_date=None, by_atom=None):
        self.dim = int(dim)
        self._default = self._pair(default) if default is not None else None
        self._by_date = {int(t): self._pair(v) for t, v in (by_date or {}).items()}
        self._by_atom = {(int(t), int(n)): self._pair(v)
                         for (t, n), v in (by_atom or {}).items()}

    def _pair(self, value) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = value
        lo = np.broadcast_to(np.asarray(lo, dtype=float), (self.dim,)).copy()
        hi = np.broadcast_to(np.asarray(hi, dtype=float), (self.dim,)).copy()
        if np.any(lo < 0) or np.any(np.isnan(lo)) or np.any(np.isinf(lo)):
            raise ValueError("lower variance bounds must be finite and nonnegative")
        if np.any(hi < lo):
            raise ValueError("upper variance bound below lower bound")
        return lo, hi

    @classmethod
    def trivial(cls, dim: int) -> "VolatilityBand":
        return cls(dim)

    @classmethod
    def uniform(cls, dim: int, lo, hi) -> "VolatilityBand":
        return cls(dim, default=(lo, hi))

    def with_atom(self, t: int, node_id: int, lo, hi) -> "VolatilityBand":
        out = VolatilityBand(self.dim)
        out._default = self._default
        out._by_date = dict(self._by_date)
        out._by_atom = dict(self._by_atom)
        out._by_atom[(int(t), int(node_id))] = out._pair((lo, hi))
        return out

    def bounds(self, t: int, node_id: int) -> tuple[np.ndarray, np.ndarray]:
        for cand in (self._by_atom.get((t, node_id)), self._by_date.get(t),
                     self._default):
            if cand is not None:
                return cand
        return np.zeros(self.dim), np.full(self.dim, np.inf)

    def is_constrained(self, t: int, node_id: int) -> bool:
        lo, hi = self.bounds(t, node_id)
        return bool(np.any(lo > 0) or np.any(np.isfinite(hi)))

    def to_dict(self) -> dict:
        def enc(pair):
            lo, hi = pair
            return [lo.tolist(), [None if np.isinf(v) else v for v in hi]]
        return {
            "dim": self.dim,
            "default": enc(self._default) if self._default is not None else None,
            "by_date": {str(t): enc(v) for t, v in sorted(self._by_date.items())},
            "by_atom": {f"{t}:{n}": enc(v)
                        for (t, n), v in sorted(self._by_atom.items())},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "VolatilityBand":
        def dec(pair):
            lo, hi = pair
            hi = [np.inf if v is None else v for v in hi]
            return (np.asarray(lo, dtype=float), np.asarray(hi, dtype=float))
        by_date = {int(t): dec(v) for t, v in (data.get("by_date") or {}).items()}
        by_atom = {}
        for key, v in (data.get("by_atom") or {}).items():
            t, n = key.split(":")
            by_atom[(int(t), int(n))] = dec(v)
        default = dec(data["default"]) if data.get("default") is not None else None
        return cls(int(data["dim"]), default=default, by_date=by_date, by_atom=by_atom)


# ---------------------------------------------------------------------------
# measures
# ---------------------------------------------------------------------------

class PathMeasure:
    """Nonnegative weights over the stored scenarios of a lattice."""

    def __init__(self, lattice: Lattice, weights):
        self.lattice = lattice
        self.weights = _clean_weights(weights, (lattice.n_paths,))

    @property
    def mass(self) -> float:
        return float(self.weights.sum())

    def expectation(self, values) -> float | np.ndarray:
        v = np.asarray(values, dtype=float)
        if v.shape[0] != self.lattice.n_paths:
            raise ValueError("values must have one entry per path")
        return self.weights @ v

    def atom_mass(self, t: int) -> dict[int, float]:
        return {a.node_id: float(self.weights[list(a.path_ids)].sum())
                for a in self.lattice.atoms(t)}

    def conditional_expectation(self, t: int, values) -> dict[int, float | np.ndarray]:
        """E[values | atom] per node at date t; zero-mass atoms map to None."""
        v = np.asarray(values, dtype=float)
        out: dict[int, float | np.ndarray] = {}
        for a in self.lattice.atoms(t):
            ids = list(a.path_ids)
            m = self.weights[ids].sum()
            out[a.node_id] = None if m <= 0 else (self.weights[ids] @ v[ids]) / m
        return out

    def normalized(self) -> "PathMeasure":
        m = self.mass
        if m <= 0:
            raise ValueError("cannot normalize a zero measure")
        return PathMeasure(self.lattice, self.weights / m)

    def condition_on_atom(self, t: int, node_id: int) -> "PathMeasure":
        """The measure given the atom at (t, node_id), renormalized."""
        atom = next(a for a in self.lattice.atoms(t) if a.node_id == node_id)
        w = np.zeros_like(self.weights)
        ids = list(atom.path_ids)
        w[ids] = self.weights[ids]
        return PathMeasure(self.lattice, w).normalized()


class EnlargedMeasure:
    """Nonnegative weights over (exercise date, scenario) pairs."""

    def __init__(self, index: EnlargedIndex, weights):
        self.index = index
        self.weights = _clean_weights(
            weights, (index.n_theta, index.lattice.n_paths))

    @property
    def lattice(self) -> Lattice:
        return self.index.lattice

    @property
    def mass(self) -> float:
        return float(self.weights.sum())

    def path_marginal(self) -> PathMeasure:
        return PathMeasure(self.lattice, self.weights.sum(axis=0))

    def theta_marginal(self) -> np.ndarray:
        return self.weights.sum(axis=1)

    def expectation_stopped(self, payoff_table) -> float:
        """Expected payoff collected at the exercise date.

        ``payoff_table`` has shape (n_dates, n_paths); entry [u, p] is the
        amount paid if scenario p is exercised at date index u.
        """
        Z = np.asarray(payoff_table, dtype=float)
        if Z.shape != (self.lattice.n_dates, self.lattice.n_paths):
            raise ValueError("payoff table must be (n_dates, n_paths)")
        total = 0.0
        for kt, u in enumerate(self.index.theta_dates):
            total += self.weights[kt] @ Z[u]
        return float(total)

    def normalized(self) -> "EnlargedMeasure":
        m = self.mass
        if m <= 0:
            raise ValueError("cannot normalize a zero measure")
        return EnlargedMeasure(self.index, self.weights / m)


def epsilon_modify(measure: EnlargedMeasure, eps: float) -> EnlargedMeasure:
    """Mix mass eps of hold-to-expiry behaviour into an enlarged measure.

    The scenario marginal is unchanged; a fraction eps of every scenario's
    exercise distribution moves to the terminal date.  Admissibility is
    preserved: the hold-to-expiry version reads the scenario marginal per
    base atom, whose rows are sums of the original status-group rows, and
    mixing keeps every group row satisfied.
    """
    if not 0 <= eps < 1:
        raise ValueError("eps must lie in [0, 1)")
    w = (1.0 - eps) * measure.weights
    w[-1] += eps * measure.weights.sum(axis=0)
    return EnlargedMeasure(measure.index, w)


# ---------------------------------------------------------------------------
# statically tradeable options
# ---------------------------------------------------------------------------

class StaticOptionSet:
    """Options tradeable at time zero whose net payoff prices to zero.

    Payoffs are stored net of price: matrix[i, p] is what one unit of
    option i pays in scenario p minus the premium paid for it.  A measure
    is calibrated when every net expectation vanishes.
    """

    def __init__(self, payoffs, names: Sequence[str] | None = None,
                 prices=None):
        pay = np.asarray(payoffs, dtype=float)
        if pay.ndim == 1:
            pay = pay[None, :]
        prices = np.zeros(pay.shape[0]) if prices is None else \
            np.broadcast_to(np.asarray(prices, dtype=float), (pay.shape[0],))
        self.matrix = pay - prices[:, None]
        self.prices = np.asarray(prices, dtype=float).copy()
        self.names = tuple(names) if names is not None else tuple(
            f"option{i}" for i in range(pay.shape[0]))
        if len(self.names) != pay.shape[0]:
            raise ValueError("one name per option")

    @classmethod
    def from_terminal(cls, lattice: Lattice, funcs, prices=None,
                      names: Sequence[str] | None = None) -> "StaticOptionSet":
        """Evaluate payoff functions of the terminal state on each path."""
        if callable(funcs):
            funcs = [funcs]
        xT = lattice.path_values[:, -1, :]
        pay = np.array([[float(f(x)) for x in xT] for f in funcs])
        return cls(pay, names=names, prices=prices)

    @property
    def n_options(self) -> int:
        return self.matrix.shape[0]

    def residuals(self, measure: PathMeasure) -> np.ndarray:
        return self.matrix @ measure.weights


@dataclass
class ModelClass:
    """A lattice plus the constraints defining its admissible measures."""

    lattice: Lattice
    band: VolatilityBand
    options: StaticOptionSet | None = None
    conditioning: str = "enlarged"

    def __post_init__(self):
        if self.conditioning not in ("enlarged", "pooled"):
            raise ValueError("conditioning must be 'enlarged' or 'pooled'")
        if self.band.dim != self.lattice.dim:
            raise ValueError("band dimension does not match the lattice")
        if self.options is not None and \
                self.options.matrix.shape[1] != self.lattice.n_paths:
            raise ValueError("option payoffs must cover every path")


# ---------------------------------------------------------------------------
# constraint verification
# ---------------------------------------------------------------------------

@dataclass
class MartingaleReport:
    ok: bool
    max_violation: float            # worst |E[increment | atom]| per unit mass
    worst_atom: tuple | None = None


@dataclass
class ConstraintReport:
    martingale: MartingaleReport
    band_ok: bool
    max_band_violation: float
    calibration_ok: bool | None
    max_calibration_residual: float | None

    @property
    def ok(self) -> bool:
        checks = [self.martingale.ok, self.band_ok]
        if self.calibration_ok is not None:
            checks.append(self.calibration_ok)
        return all(checks)


def _group_stats(lattice: Lattice, weights_by_pair, members, t):
    """Mass, mean increment and second moment of the step t -> t+1 over
    (theta_pos, path) members."""
    d = lattice.dim
    mass = 0.0
    mean = np.zeros(d)
    second = np.zeros(d)
    for kt, p in members:
        w = weights_by_pair[kt, p]
        if w == 0.0:
            continue
        dx = lattice.increments[p, t]
        mass += w
        mean += w * dx
        second += w * dx * dx
    return mass, mean, second


def validate_martingale(measure: PathMeasure | EnlargedMeasure, *,
                        tol: float = MARTINGALE_TOL) -> MartingaleReport:
    """Check E[next increment | atom] = 0 per unit of atom mass.

    For enlarged measures the conditioning atoms are the exercise-status
    groups, exercised ones included: the scenario marginal must be a
    martingale given the exercise history, not just up to exercise.
    """
    if isinstance(measure, PathMeasure):
        lat = measure.lattice
        worst, where = 0.0, None
        for t in range(lat.n_dates - 1):
            for atom in lat.atoms(t):
                ids = list(atom.path_ids)
                m = measure.weights[ids].sum()
                if m <= 0:
                    continue
                drift = np.abs(measure.weights[ids] @ lat.increments[ids, t]) / m
                v = float(drift.max())
                if v > worst:
                    worst, where = v, (t, atom.node_id)
        return MartingaleReport(worst <= tol, worst, where)

    lat = measure.lattice
    worst, where = 0.0, None
    for t in range(lat.n_dates - 1):
        for ea in measure.index.enlarged_atoms(t):
            mass, mean, _ = _group_stats(lat, measure.weights, ea.members, t)
            if mass <= 0:
                continue
            v = float(np.abs(mean).max()) / mass
            if v > worst:
                worst, where = v, (t, ea.node_id)
    return MartingaleReport(worst <= tol, worst, where)


def conditional_variance(measure: PathMeasure | EnlargedMeasure, t: int,
                         node_id: int, *,
                         status: int | None = None) -> np.ndarray | None:
    """Second moment of the step t -> t+1 given the atom, per coordinate.

    For enlarged measures ``status`` picks the exercise-status group of
    the atom (an exercise date, or None for the not-yet-exercised group).
    Returns None when the conditioning event has zero mass.
    """
    if isinstance(measure, PathMeasure):
        lat = measure.lattice
        atom = next(a for a in lat.atoms(t) if a.node_id == node_id)
        ids = list(atom.path_ids)
        m = measure.weights[ids].sum()
        if m <= 0:
            return None
        dx = lat.increments[ids, t]
        return (measure.weights[ids] @ (dx * dx)) / m
    for ea in measure.index.enlarged_atoms(t):
        if ea.node_id == node_id and ea.status == status:
            mass, _, second = _group_stats(
                measure.lattice, measure.weights, ea.members, t)
            return None if mass <= 0 else second / mass
    return None


def check_constraints(measure: PathMeasure | EnlargedMeasure, model: ModelClass, *,
                      martingale_tol: float = MARTINGALE_TOL,
                      band_tol: float = BAND_TOL,
                      calibration_tol: float = CALIBRATION_TOL) -> ConstraintReport:
    """Verify a measure against a model class, reporting worst violations.

    The band check follows the model's conditioning convention; the
    calibration check always reads the scenario marginal.
    """
    mart = validate_martingale(measure, tol=martingale_tol)
    lat = model.lattice

    def band_violation(mass, second, lo, hi):
        # groups carrying only numerical dust have no conditional law
        if mass <= 1e-12:
            return 0.0
        v = 0.0
        for k in range(lat.dim):
            v = max(v, (lo[k] * mass - second[k]) / mass)
            if np.isfinite(hi[k]):
                v = max(v, (second[k] - hi[k] * mass) / mass)
        return v

    worst_band = 0.0
    if isinstance(measure, EnlargedMeasure) and model.conditioning == "enlarged":
        for t in range(lat.n_dates - 1):
            for ea in measure.index.enlarged_atoms(t):
                if not model.band.is_constrained(t, ea.node_id):
                    continue
                lo, hi = model.band.bounds(t, ea.node_id)
                mass, _, second = _group_stats(lat, measure.weights, ea.members, t)
                worst_band = max(worst_band, band_violation(mass, second, lo, hi))
        marginal = measure.path_marginal()
    else:
        marginal = measure.path_marginal() if isinstance(measure, EnlargedMeasure) \
            else measure
        for t in range(lat.n_dates - 1):
            for atom in lat.atoms(t):
                if not model.band.is_constrained(t, atom.node_id):
                    continue
                lo, hi = model.band.bounds(t, atom.node_id)
                ids = list(atom.path_ids)
                mass = marginal.weights[ids].sum()
                dx = lat.increments[ids, t]
                second = marginal.weights[ids] @ (dx * dx)
                worst_band = max(worst_band, band_violation(mass, second, lo, hi))

    calint_ok: bool | None = None
    max_res: float | None = None
    if model.options is not None:
        res = model.options.residuals(marginal)
        max_res = float(np.max(np.abs(res), initial=0.0))
        calint_ok = max_res <= calibration_tol

    return ConstraintReport(mart, worst_band <= band_tol, worst_band,
                            calint_ok, max_res)


# ---------------------------------------------------------------------------
# lifting calibrated measures onto a joint lattice
# ---------------------------------------------------------------------------

def lift_measure(measure: PathMeasure, joint: JointLattice,
                 options: StaticOptionSet, *,
                 tol: float = CALIBRATION_TOL) -> PathMeasure:
    """Transport a calibrated base measure onto the joint lattice.

    The option coordinates follow their conditional expectations under the
    measure, so the lifted measure is a martingale in the new coordinates
    exactly when the base measure is one in the old, and it starts from
    Y = 0 exactly when the base measure is calibrated.  Raises if the
    measure is not calibrated or if a required joint path is absent.
    """
    res = options.residuals(measure)
    if np.max(np.abs(res), initial=0.0) > tol:
        raise ValueError(
            f"measure is not calibrated: residuals {np.round(res, 12).tolist()}")
    base = joint.base
    if measure.lattice is not base and measure.lattice.n_paths != base.n_paths:
        raise ValueError("measure lives on a different lattice")
    g = options.matrix.T        # (n_paths, m)
    m = joint.m
    if g.shape[1] != m:
        raise ValueError("option count does not match the joint lattice")

    # conditional payoff expectations along each charged path
    ydoob = np.empty((base.n_dates, base.n_paths, m))
    for t in range(base.n_dates):
        cond = measure.conditional_expectation(t, g)
        for atom in base.atoms(t):
            val = cond[atom.node_id]
            for p in atom.path_ids:
                ydoob[t, p] = np.nan if val is None else val

    index = {}
    for jp in range(joint.lattice.n_paths):
        key = tuple(np.round(joint.lattice.path_values[jp], VALUE_DECIMALS)
                    .ravel().tolist())
        index[key] = jp
    out = np.zeros(joint.lattice.n_paths)
    for p in np.nonzero(measure.weights > 0)[0]:
        pre = np.concatenate([base.path_values[p, 0], np.zeros(m)])
        body = np.concatenate([base.path_values[p], ydoob[:, p, :]], axis=1)
        row = np.vstack([pre, body])
        key = tuple(np.round(row, VALUE_DECIMALS).ravel().tolist())
        jp = index.get(key)
        if jp is None:
            raise InfeasibleError(
                f"joint lattice has no path matching the lift of base path {p}")
        out[jp] += measure.weights[p]
    return PathMeasure(joint.lattice, out)
