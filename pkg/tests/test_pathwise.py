"""Dyadic integration, quadratic variation, and the walk generator."""

import numpy as np
import pytest

from amrobust.errors import CapExceededError
from amrobust.pathwise import (DEFAULT_LEVEL, MAX_LEVEL, IntegrandSpec,
                               SampledPath, beta_limsup, karandikar_integral,
                               quadratic_variation, sample_diffusion)

ONE = IntegrandSpec(lambda t, x: np.ones_like(t), name="1", vectorized=True)
CURRENT = IntegrandSpec(lambda t, x: x, name="X", vectorized=True)


def alternating_path(level):
    # +1/-1 at consecutive grid points: every coarsening is constant,
    # so consecutive integral approximations stay a fixed distance apart
    n = 2 ** level
    return SampledPath((-1.0) ** np.arange(n + 1), level)


# ---------------------------------------------------------------------------
# sampled paths
# ---------------------------------------------------------------------------

def test_path_validation():
    with pytest.raises(ValueError):
        SampledPath(np.zeros(6), 2)            # needs 5 points
    with pytest.raises(ValueError):
        SampledPath(np.array([0.0, np.inf, 0.0, 0.0, 0.0]), 2)
    with pytest.raises(ValueError):
        SampledPath(np.zeros((5, 1, 1)), 2)


def test_coarsening_is_even_index_subsample():
    p = sample_diffusion(0, 0.3, 6)
    assert np.array_equal(p.coarsen().values, p.values[::2])
    assert np.array_equal(p.at_level(3).values, p.values[::8])
    assert p.at_level(6) is not p and np.array_equal(p.at_level(6).values,
                                                    p.values)
    with pytest.raises(CapExceededError):
        p.at_level(7)


def test_times_are_exact_dyadics():
    p = sample_diffusion(0, 1.0, 4)
    assert p.times[1] == 2.0 ** -4
    assert p.times[-1] == 1.0
    assert p.n_steps == 16 and p.dim == 1


def test_component_extraction():
    two = SampledPath(np.zeros((5, 2)), 2)
    assert two.dim == 2
    assert two.component(1).dim == 1
    with pytest.raises(ValueError):
        two.component(0).component(0)


# ---------------------------------------------------------------------------
# left-endpoint integration
# ---------------------------------------------------------------------------

def test_constant_one_telescopes_exactly():
    # sigma 1 at an even level keeps every value on the lattice
    # m * 2**-(L/2), where float subtraction and summation are exact,
    # so the telescoping identity holds bitwise
    p = sample_diffusion(3, 1.0, 12)
    res = karandikar_integral(ONE, p)
    assert np.array_equal(res.values, p.values - p.values[0])
    assert res.converged and not res.zeroed
    assert res.realized_bound == 1.0


def test_piecewise_constant_integrand_is_a_finite_sum():
    p = sample_diffusion(9, 1.0, 10)
    q = IntegrandSpec(lambda t, x: 1.0 if t < 0.5 else 3.0, name="step")
    res = karandikar_integral(q, p)
    x, h = p.values, p.n_steps // 2
    assert res.terminal == (x[h] - x[0]) + 3.0 * (x[-1] - x[h])


def test_linearity_exact_on_lattice_paths():
    # alpha = 2 and integer-plus-lattice integrand values keep both
    # evaluation orders exact, so distributivity holds bitwise
    p = sample_diffusion(4, 1.0, 12)
    combo = IntegrandSpec(lambda t, x: 2.0 * x + 1.0, vectorized=True)
    lhs = karandikar_integral(combo, p).values
    rhs = 2.0 * karandikar_integral(CURRENT, p).values \
        + karandikar_integral(ONE, p).values
    assert np.array_equal(lhs, rhs)


def test_prefix_dependent_integrand_matches_direct_sums():
    p = sample_diffusion(2, 1.0, 8)
    runmax = IntegrandSpec(lambda t, x: float(np.max(x)), name="runmax")
    res = karandikar_integral(runmax, p)
    rows = np.maximum.accumulate(p.values)[:-1]
    direct = np.concatenate(([0.0], np.cumsum(rows * np.diff(p.values))))
    assert np.array_equal(res.values, direct)


def test_level_parameter_matches_coarsened_path():
    p = sample_diffusion(1, 0.4, 10)
    a = karandikar_integral(CURRENT, p, 8)
    b = karandikar_integral(CURRENT, p.at_level(8))
    assert np.array_equal(a.values, b.values)
    assert a.sup_distances == b.sup_distances


def test_resolution_exceeded():
    p = sample_diffusion(0, 0.3, 6)
    with pytest.raises(CapExceededError):
        karandikar_integral(ONE, p, 7)


def test_declared_bound_enforced():
    p = sample_diffusion(0, 1.0, 8)
    tight = IntegrandSpec(lambda t, x: x, bound=1e-3, vectorized=True)
    with pytest.raises(ValueError):
        karandikar_integral(tight, p)


def test_oscillating_path_flagged_and_strict_mode_zeroes():
    p = alternating_path(8)
    res = karandikar_integral(CURRENT, p)
    assert not res.converged
    assert res.sup_distances[-1][1] > 1.0
    assert res.values[-1] != 0.0
    strict = karandikar_integral(CURRENT, p, strict=True)
    assert strict.zeroed and not strict.converged
    assert np.all(strict.values == 0.0)


def test_walk_integrals_pass_the_cauchy_window():
    # seed-pinned: the window rule tolerates the level-to-level noise of
    # this walk; the flag is a diagnostic, not a theorem about walks
    res = karandikar_integral(CURRENT, sample_diffusion(3, 0.3, 12))
    assert res.converged
    assert len(res.sup_distances) == 3


# ---------------------------------------------------------------------------
# quadratic variation
# ---------------------------------------------------------------------------

def test_identity_route_matches_squared_increment_sums():
    # implementation uses X^2 - X0^2 - 2*int(X dX); the oracle sums
    # squared increments directly; algebraically identical at matching
    # mesh, so only float roundoff separates them
    for seed in range(4):
        p = sample_diffusion(seed, 0.3, 12)
        for lv in (4, 7, 10, 12):
            qv = quadratic_variation(p, lv).values
            dx = np.diff(p.at_level(lv).values)
            direct = np.concatenate(([0.0], np.cumsum(dx * dx)))
            assert np.max(np.abs(qv - direct)) <= 1e-12
            assert qv[0] == 0.0


def test_constant_path_has_zero_qv():
    p = sample_diffusion(0, 0.0, 8, x0=2.0)
    assert np.all(p.values == 2.0)
    assert np.all(quadratic_variation(p).values == 0.0)


def test_smooth_path_qv_is_mesh_sized():
    n = 2 ** 10
    smooth = SampledPath(np.arange(n + 1) / n, 10)
    qv = quadratic_variation(smooth)
    # exact lattice arithmetic: 1 - (n-1)/n on the nose
    assert qv.terminal == 2.0 ** -10
    assert qv.converged


def test_unit_sigma_walk_qv_is_exactly_one():
    p = sample_diffusion(3, 1.0, 12)
    assert quadratic_variation(p).terminal == 1.0


def test_scaled_walk_qv_concentrates():
    # rademacher steps make every squared increment exactly
    # (0.3 * 2**-5)**2, so the value is deterministic up to rounding
    for seed in range(6):
        p = sample_diffusion(seed, 0.3, 10)
        assert quadratic_variation(p).terminal == pytest.approx(0.09,
                                                                rel=1e-11)


def test_polarization_matches_cross_increment_sums():
    a = sample_diffusion(0, 0.5, 10)
    b = sample_diffusion(1, 0.3, 10)
    two = SampledPath(np.stack([a.values, b.values], axis=1), 10)
    qv = quadratic_variation(two)
    assert qv.values.shape == (2 ** 10 + 1, 2, 2)
    assert np.array_equal(qv.values[:, 0, 0], quadratic_variation(a).values)
    assert np.array_equal(qv.values[:, 0, 1], qv.values[:, 1, 0])
    cross = np.concatenate(([0.0],
                            np.cumsum(np.diff(a.values) * np.diff(b.values))))
    assert np.max(np.abs(qv.values[:, 0, 1] - cross)) <= 1e-12


def test_qv_propagates_non_convergence():
    qv = quadratic_variation(alternating_path(8))
    assert not qv.converged
    strict = quadratic_variation(alternating_path(8), strict=True)
    assert np.all(strict.values == 0.0)


def test_beta_times_match_standalone_estimates():
    p = sample_diffusion(5, 0.7, 12)
    qv = quadratic_variation(p, beta_times=(0.5, 1.0))
    assert qv.beta[0.5] == beta_limsup(p, 0.5)
    assert qv.beta[1.0] == beta_limsup(p, 1.0)


# ---------------------------------------------------------------------------
# limsup diffusion rate
# ---------------------------------------------------------------------------

def test_beta_on_smooth_path_vanishes():
    n = 2 ** 10
    smooth = SampledPath(np.arange(n + 1) / n, 10)
    est = beta_limsup(smooth, 1.0)
    assert est == 2.0 ** -10
    assert est <= 1e-3


def test_beta_recovers_constant_slope():
    p = sample_diffusion(5, 0.7, 12)
    assert beta_limsup(p, 1.0) == pytest.approx(0.49, rel=1e-10)
    assert beta_limsup(p, 0.25) == pytest.approx(0.49, rel=1e-10)


def test_beta_tracks_regime_change():
    vol = lambda t, x: 0.2 if t < 0.5 else 0.8
    p = sample_diffusion(11, vol, 12)
    # the default window at t = 0.5 looks back 2**-6, inside regime one
    assert beta_limsup(p, 0.5) == pytest.approx(0.04, rel=1e-9)
    assert beta_limsup(p, 1.0) == pytest.approx(0.64, rel=1e-9)


def test_beta_window_validation():
    p = sample_diffusion(0, 0.5, 8)
    with pytest.raises(ValueError):
        beta_limsup(p, 2.0 ** -3, window=range(2, 9))   # t below 2**-2
    with pytest.raises(ValueError):
        beta_limsup(p, 0.5, window=range(5, 12))        # scales beyond level
    assert beta_limsup(p, 2.0 ** -2, window=range(2, 9)) > 0.0


# ---------------------------------------------------------------------------
# walk generator
# ---------------------------------------------------------------------------

def test_generator_reproducible_by_seed():
    a = sample_diffusion(42, 0.3, 8)
    b = sample_diffusion(42, 0.3, 8)
    c = sample_diffusion(43, 0.3, 8)
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)
    assert a.seed == 42 and "0.3" in a.generator


def test_zero_sigma_gives_constant_path():
    p = sample_diffusion(0, 0.0, 6, x0=1.5)
    assert np.all(p.values == 1.5)


def test_numeric_and_callable_sigma_agree_bitwise():
    a = sample_diffusion(7, 0.3, 8, x0=0.25)
    b = sample_diffusion(7, lambda t, x: 0.3, 8, x0=0.25)
    assert np.array_equal(a.values, b.values)


def test_empirical_terminal_variance():
    # frozen draw: seeds 0..999 at level 10 land within 2% of sigma^2;
    # the example bound is 10%
    xs = np.array([sample_diffusion(s, 0.7, 10).values[-1]
                   for s in range(1000)])
    assert abs(xs.var() - 0.49) / 0.49 <= 0.10


def test_level_cap():
    with pytest.raises(CapExceededError):
        sample_diffusion(0, 1.0, MAX_LEVEL + 1)
    with pytest.raises(ValueError):
        sample_diffusion(0, 1.0, -1)
    assert DEFAULT_LEVEL <= MAX_LEVEL


def test_band_respecting_sigma_keeps_beta_in_band():
    # adapted two-valued volatility: every windowed quotient averages
    # squared steps whose sigma lies in [0.2, 0.6]
    vol = lambda t, x: 0.2 if x[-1] > 0 else 0.6
    p = sample_diffusion(13, vol, 12)
    for k in range(1, 9):
        est = beta_limsup(p, k / 8.0)
        assert 0.04 * (1 - 1e-9) <= est <= 0.36 * (1 + 1e-9)
