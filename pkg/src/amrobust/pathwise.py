"""Dyadic pathwise calculus on sampled paths.

Left-endpoint Riemann sums need not settle down as the mesh refines, so
every approximation here carries level-to-level diagnostics instead of a
convergence promise: the sup distance between consecutive levels must
keep shrinking or the result is flagged (and, under the strict flag,
zeroed).  Quadratic variation is read off the integration identity
rather than summed directly, which keeps it independent of the obvious
sum-of-squared-increments cross-check.  The limsup diffusion rate is a
max over a finite window of dyadic scales, a stated proxy with the
window as a parameter.

Grids are k * 2**-level for k = 0 .. 2**level over the unit interval.
Coarser levels of one family are even-index subsamples of the finest
array, so cross-level comparisons are exact restrictions, never
re-simulation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import CapExceededError

DEFAULT_LEVEL = 14
MAX_LEVEL = 22

# an approximation converges when each of the last CAUCHY_WINDOW
# consecutive sup-distances shrinks by this factor (or sits below the
# floor, where ratios are meaningless)
CAUCHY_FACTOR = 0.9
CAUCHY_WINDOW = 3
CONVERGENCE_FLOOR = 1e-14

# default scale window for the limsup proxy: n in {level - SPAN .. level}
BETA_WINDOW_SPAN = 6


# ---------------------------------------------------------------------------
# sampled paths
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SampledPath:
    """A path sampled on the dyadic grid of one resolution level.

    values has shape (2**level + 1,) for scalar paths or
    (2**level + 1, d) for d components, all finite.  Views at coarser
    levels are even-index subsamples of this array, so the whole family
    of resolutions is consistent by construction.
    """

    values: np.ndarray
    level: int
    seed: int | None = None
    generator: str = ""

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim not in (1, 2):
            raise ValueError("path values must have shape (n,) or (n, d)")
        if vals.shape[0] != 2 ** self.level + 1:
            raise ValueError(f"level {self.level} needs {2 ** self.level + 1}"
                             f" grid points, got {vals.shape[0]}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("path values must be finite")
        object.__setattr__(self, "values", vals)

    @property
    def n_steps(self) -> int:
        return 2 ** self.level

    @property
    def dim(self) -> int:
        return 1 if self.values.ndim == 1 else self.values.shape[1]

    @property
    def times(self) -> np.ndarray:
        # k / 2**level is exact in binary floating point
        return np.arange(self.n_steps + 1) / self.n_steps

    def at_level(self, level: int) -> "SampledPath":
        """The even-index subsample down to a coarser level."""
        if level > self.level:
            raise CapExceededError(f"level {level} exceeds the sampled "
                                   f"resolution {self.level}")
        if level < 0:
            raise ValueError("level must be nonnegative")
        step = 2 ** (self.level - level)
        return SampledPath(self.values[::step], level, self.seed,
                           self.generator)

    def coarsen(self) -> "SampledPath":
        return self.at_level(self.level - 1)

    def component(self, i: int) -> "SampledPath":
        if self.values.ndim == 1:
            raise ValueError("scalar path has no components")
        return SampledPath(self.values[:, i], self.level, self.seed,
                           self.generator)


@dataclass(frozen=True)
class IntegrandSpec:
    """An adapted integrand q(t, prefix) producing a row vector.

    fn receives the current time and the path values up to and including
    it, and returns a scalar (scalar paths) or a length-d row.  With
    vectorized=True, fn is instead called once per level with the arrays
    of all left endpoints and their values and must return every row at
    once; only correct when q depends on nothing but the current point.
    A declared bound, if any, is enforced against the realized sup-norm
    during integration.
    """

    fn: Callable
    bound: float | None = None
    name: str = "q"
    vectorized: bool = False


# the integrand X itself, the one quadratic variation needs
_CURRENT_VALUE = IntegrandSpec(lambda t, x: x, name="X", vectorized=True)


# ---------------------------------------------------------------------------
# left-endpoint integration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IntegralResult:
    """Cumulative left-endpoint sums on one level's grid.

    sup_distances lists, per diagnostic level, the sup distance between
    that level's approximation and the next coarser one on their common
    grid points.  converged reports the Cauchy check over the last few
    of those; zeroed records that strict mode wiped the values after the
    check failed.
    """

    values: np.ndarray
    level: int
    sup_distances: tuple[tuple[int, float], ...]
    converged: bool
    realized_bound: float
    zeroed: bool = False

    @property
    def terminal(self) -> float:
        return float(self.values[-1])


def _integrand_rows(q: IntegrandSpec, times, values) -> tuple[np.ndarray, float]:
    """Rows of q at the left endpoint of every step, shape (n, d)."""
    n = len(times) - 1
    d = 1 if values.ndim == 1 else values.shape[1]
    if q.vectorized:
        rows = np.asarray(q.fn(times[:-1], values[:-1]), dtype=float)
        rows = rows.reshape(n, d)
    else:
        rows = np.empty((n, d))
        for k in range(n):
            rows[k] = q.fn(times[k], values[: k + 1])
    sup = float(np.max(np.abs(rows))) if n else 0.0
    if q.bound is not None and sup > q.bound + 1e-12:
        raise ValueError(f"integrand {q.name} exceeded its declared bound: "
                         f"sup {sup} > {q.bound}")
    return rows, sup


def _left_sums(rows: np.ndarray, values: np.ndarray) -> np.ndarray:
    dx = np.diff(values, axis=0)
    if values.ndim == 1:
        terms = rows[:, 0] * dx
    else:
        terms = np.einsum("kd,kd->k", rows, dx)
    out = np.zeros(values.shape[0])
    np.cumsum(terms, out=out[1:])
    return out


def _integral_levels(q: IntegrandSpec, path: SampledPath,
                     level: int) -> tuple[dict, float]:
    """The approximation at each diagnostic level, finest last."""
    per_level = {}
    sup = 0.0
    for lv in range(max(0, level - CAUCHY_WINDOW), level + 1):
        sub = path.at_level(lv)
        rows, s = _integrand_rows(q, sub.times, sub.values)
        per_level[lv] = _left_sums(rows, sub.values)
        sup = max(sup, s)
    return per_level, sup


def _sup_distances(per_level: dict) -> tuple[tuple[int, float], ...]:
    lvls = sorted(per_level)
    out = []
    for a, b in zip(lvls, lvls[1:]):
        gap = per_level[b][::2] - per_level[a]
        out.append((b, float(np.max(np.abs(gap)))))
    return tuple(out)


def _cauchy_ok(distances) -> bool:
    # shrink by CAUCHY_FACTOR across the window, not per consecutive
    # pair: level-to-level distances of honest stochastic integrals
    # fluctuate too much for a pairwise ratio test to mean anything
    tail = [d for _, d in distances[-CAUCHY_WINDOW:]]
    if len(tail) < 2:
        return True
    return tail[-1] <= max(CAUCHY_FACTOR * tail[0], CONVERGENCE_FLOOR)


def karandikar_integral(q: IntegrandSpec, path: SampledPath,
                        level: int | None = None, *,
                        strict: bool = False) -> IntegralResult:
    """Cumulative left-endpoint sums of q against the path.

    Evaluates at the requested level and at a few coarser ones, and
    marks the result non-convergent when the level-to-level sup
    distances stop shrinking by CAUCHY_FACTOR.  strict=True additionally
    zeroes the values in that case: the convention that an integral
    without a limit is worth nothing rather than its last partial sum.
    The default reports the last approximation and lets the caller
    decide, because silent zeros poison numerical comparisons.
    """
    if level is None:
        level = path.level
    if level > path.level:
        raise CapExceededError(f"level {level} exceeds the sampled "
                               f"resolution {path.level}")
    per_level, sup = _integral_levels(q, path, level)
    dists = _sup_distances(per_level)
    ok = _cauchy_ok(dists)
    vals = per_level[level]
    zeroed = False
    if strict and not ok:
        vals = np.zeros_like(vals)
        zeroed = True
    return IntegralResult(vals, level, dists, ok, sup, zeroed)


# ---------------------------------------------------------------------------
# quadratic variation and the limsup diffusion rate
# ---------------------------------------------------------------------------

@dataclass
class QVResult:
    """Quadratic variation on one level's grid with its diagnostics.

    values has shape (n + 1,) for scalar paths and (n + 1, d, d)
    otherwise, starting at exactly zero.  beta maps each requested time
    to its windowed difference-quotient estimate.  sup_distances track
    level-to-level stability of the integral route; they measure how
    settled the approximation is, not whether a limit exists, which no
    finite sample can certify.
    """

    values: np.ndarray
    level: int
    beta: dict = field(default_factory=dict)
    sup_distances: tuple[tuple[int, float], ...] = ()
    converged: bool = True

    @property
    def terminal(self):
        v = self.values[-1]
        return float(v) if np.ndim(v) == 0 else v


def _qv_1d(path1: SampledPath, level: int, strict: bool):
    res = karandikar_integral(_CURRENT_VALUE, path1, level, strict=strict)
    x = path1.at_level(level).values
    qv = x * x - x[0] * x[0] - 2.0 * res.values
    if res.zeroed:
        # the identity is wiped along with its integral
        qv = np.zeros_like(qv)
    # X^2 terms agree on common grid points, so qv gaps are twice the
    # integral gaps, exactly
    dists = tuple((lv, 2.0 * dv) for lv, dv in res.sup_distances)
    return qv, dists, res.converged


def quadratic_variation(path: SampledPath, level: int | None = None, *,
                        beta_times=(), window=None,
                        strict: bool = False) -> QVResult:
    """Pathwise quadratic variation via the integration identity.

    <X>_t = X_t X_t' - X_0 X_0' - 2 * (left sums of X dX).  The direct
    sum of squared increments is deliberately not used here, so it stays
    available as an independent check; at matching mesh the two agree up
    to float roundoff.  For d > 1 the off-diagonal entries polarize the
    variations of component sums.  Non-convergence flags of the
    underlying integrals propagate, and beta estimates are filled in for
    the requested times.
    """
    if level is None:
        level = path.level
    if level > path.level:
        raise CapExceededError(f"level {level} exceeds the sampled "
                               f"resolution {path.level}")
    if path.dim == 1:
        qv, dists, ok = _qv_1d(path, level, strict)
    else:
        d = path.dim
        qv = np.zeros((2 ** level + 1, d, d))
        dist_map: dict[int, float] = {}
        ok = True
        diag = []
        for i in range(d):
            q_i, dists_i, ok_i = _qv_1d(path.component(i), level, strict)
            diag.append(q_i)
            qv[:, i, i] = q_i
            ok = ok and ok_i
            for lv, dv in dists_i:
                dist_map[lv] = max(dist_map.get(lv, 0.0), dv)
        for i in range(d):
            for j in range(i + 1, d):
                pair = SampledPath(path.values[:, i] + path.values[:, j],
                                   path.level)
                q_s, dists_s, ok_s = _qv_1d(pair, level, strict)
                cross = 0.5 * (q_s - diag[i] - diag[j])
                qv[:, i, j] = cross
                qv[:, j, i] = cross
                ok = ok and ok_s
                for lv, dv in dists_s:
                    dist_map[lv] = max(dist_map.get(lv, 0.0), dv)
        dists = tuple(sorted(dist_map.items()))
    beta = {float(t): _beta_from_qv(qv, level, float(t), window)
            for t in beta_times}
    return QVResult(qv, level, beta, dists, ok)


def _beta_from_qv(qv: np.ndarray, level: int, t: float, window):
    if window is None:
        window = range(max(1, level - BETA_WINDOW_SPAN), level + 1)
    scales = sorted({int(n) for n in window})
    if not scales or scales[0] < 1 or scales[-1] > level:
        raise ValueError("window scales must lie in 1..level")
    if t < 2.0 ** -scales[0]:
        raise ValueError(f"t={t} is smaller than the coarsest window scale "
                         f"2**-{scales[0]}")
    k = int(round(t * 2 ** level))
    k = min(k, 2 ** level)
    quots = [np.asarray((qv[k] - qv[k - 2 ** (level - n)]) * float(2 ** n))
             for n in scales]
    est = np.maximum.reduce(quots)
    return float(est) if est.ndim == 0 else est


def beta_limsup(path: SampledPath, t: float, window=None, *,
                level: int | None = None):
    """Windowed difference-quotient estimate of the diffusion rate at t.

    max over n in the window of (<X>_t - <X>_{t - 2**-n}) * 2**n, a
    finite proxy for a limsup over all scales; widen the window to probe
    more of the tail.  t snaps to the nearest grid point of the working
    level.  For d > 1 the max is taken entrywise, a componentwise
    diagnostic rather than a matrix limit.
    """
    if level is None:
        level = path.level
    qv = quadratic_variation(path, level).values
    return _beta_from_qv(qv, level, float(t), window)


# ---------------------------------------------------------------------------
# sampled walk generator
# ---------------------------------------------------------------------------

def sample_diffusion(seed, sigma_fn, level: int = DEFAULT_LEVEL, *,
                     x0: float = 0.0) -> SampledPath:
    """A scaled random-walk path with adapted step volatility.

    Each of the 2**level steps moves by a random sign times
    sigma_fn(t, prefix) * 2**(-level / 2), so a constant sigma yields a
    walk whose squared increments sum to sigma**2 on the nose.  Pass a
    plain number for a constant sigma; that case is vectorized.  The
    sign stream is drawn up front from the seed, so a numeric sigma and
    a callable returning the same constant produce identical paths.
    Coarser resolutions come from at_level on the returned object, never
    from re-simulation, which is what keeps the level family consistent.
    """
    if level > MAX_LEVEL:
        raise CapExceededError(f"level {level} exceeds the cap {MAX_LEVEL}")
    if level < 0:
        raise ValueError("level must be nonnegative")
    n = 2 ** level
    rng = np.random.default_rng(seed)
    signs = rng.integers(0, 2, size=n) * 2.0 - 1.0
    scale = 2.0 ** (-level / 2.0)
    if callable(sigma_fn):
        values = np.empty(n + 1)
        values[0] = x0
        times = np.arange(n + 1) / n
        for k in range(n):
            vol = float(sigma_fn(times[k], values[: k + 1]))
            values[k + 1] = values[k] + signs[k] * (vol * scale)
        desc = f"rademacher walk, adapted sigma, level {level}"
    else:
        sigma = float(sigma_fn)
        # cumsum over [x0, steps...] accumulates in the same order as the
        # loop above, keeping the two branches bit-identical
        values = np.cumsum(np.concatenate(([x0], signs * (sigma * scale))))
        desc = f"rademacher walk, sigma {sigma}, level {level}"
    return SampledPath(values, level, seed=seed, generator=desc)
