import math

import numpy as np
import pytest
from scipy.special import gamma

from monohom import diagnostics as D
from monohom.corrector import sample_spec, solve_corrector, solve_linearized
from monohom.field import CoefficientRecipe, ConstantRecipe, CovarianceSpec, SampleSeed, scalar_function_recipe
from monohom.grid import make_grid
from monohom.operator import OperatorSpec, radial_monotonicity_bound

from oracles import brute_inf_convolution, brute_underline

REC = CoefficientRecipe(CovarianceSpec(ell_c=1.0), lam=0.25)


@pytest.fixture(scope="module")
def sample64():
    g = make_grid(2, 32.0, 64)
    spec = sample_spec(REC, g, 3.0, SampleSeed(11, 0))
    b = solve_corrector(spec, [1.0, 0.5])
    return b, solve_linearized(b, np.array([1.0, 0.0]))


def test_mu_d_values():
    assert D.mu_d(4.0, 1) == pytest.approx(3.0)
    assert D.mu_d(0.0, 2) == pytest.approx(math.sqrt(math.log(2)))
    assert D.mu_d(17.0, 3) == 1.0


def test_meyers_radius_constant_coefficient_is_one():
    g = make_grid(2, 16.0, 32)
    spec = OperatorSpec(3.0, 0.5, ConstantRecipe(0.7 * np.eye(2)).sample(g), g)
    rf = D.meyers_radius(solve_corrector(spec, [1.0, 0.0]), c1=1e-3)
    assert np.all(rf.values == 1.0)


def test_meyers_radius_matches_brute_force(sample64):
    b, _ = sample64
    g = b.grid
    c1 = 0.02
    rf = D.meyers_radius(b, c1)
    assert len(np.unique(rf.underline)) >= 3
    dens = np.sum(b.grad_phi**2, axis=0) ** 1.5
    radii = D.dyadic_radii(g.L)
    thr = c1 * (1 + np.linalg.norm(b.xi) ** 3)
    under = brute_underline(dens, [thr] * len(radii), radii, g, g.L)
    assert np.array_equal(under, rf.underline)
    env = brute_inf_convolution(under, g, D.DEFAULT_ELL)
    np.testing.assert_allclose(rf.values, env, rtol=1e-12)
    assert rf.check_bounds(g.L)


def test_meyers_radius_is_lipschitz(sample64):
    b, _ = sample64
    g = b.grid
    rf = D.meyers_radius(b, 0.02)
    coords = g.coords()
    worst = -np.inf
    for idx in np.ndindex(*g.shape):
        dist = g.periodic_distance(coords[(slice(None),) + idx])
        worst = max(worst, np.max(np.abs(rf.values - rf.values[idx]) - D.DEFAULT_ELL * dist))
    assert worst <= 2 * g.h


def test_inf_convolution_in_3d_matches_brute_force():
    g = make_grid(3, 8.0, 8)
    rng = np.random.default_rng(0)
    vals = 2.0 ** rng.integers(0, 4, size=g.shape)
    out = D.periodic_inf_convolution(vals, g, 0.3)
    np.testing.assert_allclose(out, brute_inf_convolution(vals, g, 0.3), rtol=1e-12)


def test_linear_minimal_radius_matches_brute_force(sample64):
    b, lb = sample64
    g = b.grid
    C = 0.05
    rf = D.linear_minimal_radius(b, lb, C)
    assert len(np.unique(rf.values)) >= 3
    radii = D.dyadic_radii(g.L / 2)
    dens = np.sum(lb.grad_phi**2, axis=0) * b.mu
    coords = g.coords()
    thr = []
    for R in radii:
        t = np.empty(g.shape)
        for idx in np.ndindex(*g.shape):
            dist = g.periodic_distance(coords[(slice(None),) + idx])
            t[idx] = C * b.mu[dist <= 2 * R * (1 + 1e-12)].mean()
        thr.append(t)
    assert np.array_equal(brute_underline(dens, thr, radii, g, g.L / 2), rf.values)


def test_linear_minimal_radius_limits(sample64):
    b, lb = sample64
    assert np.all(D.linear_minimal_radius(b, lb, np.inf).values == 1)
    assert np.all(D.linear_minimal_radius(b, lb, 1e6).values == 1)


def test_sandwich_holds(sample64):
    b, _ = sample64
    for c1 in (0.01, 0.02, 0.05):
        assert D.check_sandwich(b, c1).passed


def test_calibrate_c1():
    g = make_grid(2, 16.0, 32)
    spec = OperatorSpec(3.0, 0.5, ConstantRecipe(0.7 * np.eye(2)).sample(g), g)
    assert D.calibrate_c1([solve_corrector(spec, [1.0, 0.0])]) == 4.0
    b = solve_corrector(sample_spec(REC, g, 3.0, SampleSeed(0, 0)), [1.0, 0.0])
    c1 = D.calibrate_c1([b])
    assert np.all(D.meyers_radius(b, c1).underline == 1)


# --- statistics --------------------------------------------------------------

def test_clt_constant_recipe_is_degenerate():
    g = make_grid(2, 16.0, 32)
    rep = D.clt_scaling(ConstantRecipe(0.5 * np.eye(2)), g, 3.0, [1.0, 0.0], [1, 2, 4], 3)
    assert rep.degenerate and rep.slope is None
    assert not np.any(rep.variances)


def test_clt_rejects_large_radii():
    g = make_grid(1, 16.0, 32)
    with pytest.raises(D.DiagnosticError):
        D.clt_scaling(REC, g, 3.0, [1.0], [2, 8], 3)


def test_clt_1d_slope_and_ci_shrink():
    g = make_grid(1, 64.0, 128)
    radii = [2, 4, 8, 16]
    small = D.clt_scaling(REC, g, 3.0, [1.0], radii, 100, seed=1)
    big = D.clt_scaling(REC, g, 3.0, [1.0], radii, 200, seed=1)
    assert -1.3 <= big.slope <= -0.7
    assert big.ci[0] < big.slope < big.ci[1]
    ratio = (big.ci[1] - big.ci[0]) / (small.ci[1] - small.ci[0])
    assert 0.8 / math.sqrt(2) <= ratio <= 1.2 / math.sqrt(2)


def test_scaling_from_samples_exact_power_law():
    radii = [1.0, 2.0, 4.0, 8.0]
    per = np.outer(np.linspace(1, 2, 60), np.array(radii) ** -2.0)
    rep = D.scaling_from_samples(per, radii)
    assert rep.slope == pytest.approx(-2.0, abs=1e-12)


def test_corrector_growth_constant_and_weights():
    g = make_grid(2, 16.0, 32)
    rep = D.corrector_growth(ConstantRecipe(0.5 * np.eye(2)), g, 3.0, [1.0, 0.0], [[2.0, 0.0]], 2)
    assert rep.phi_ratio[2][0] == 0.0 and rep.sigma_ratio[2][0] == 0.0
    rep = D.corrector_growth(REC, g, 3.0, [1.0, 0.0], [[0.0, 0.0], [2.0, 0.0]], 4)
    assert rep.weights == pytest.approx([math.sqrt(math.log(2)), math.sqrt(math.log(4))])
    assert np.all(rep.phi_moments[4] >= rep.phi_moments[1] - 1e-15)
    with pytest.raises(D.DiagnosticError):
        D.corrector_growth(REC, g, 3.0, [1.0, 0.0], [[0.3, 0.0]], 1)


def test_moment_tail_constant_and_gaussian():
    rep = D.moment_tail(np.ones(300))
    assert rep.kappa == 0.0
    np.testing.assert_allclose(rep.norms, 1.0)
    qs = np.array([1, 2, 4, 8])
    exact = (2 ** (qs / 2) * gamma((qs + 1) / 2) / math.sqrt(math.pi)) ** (1 / qs)
    kappa_exact = np.polyfit(np.log(qs), np.log(exact), 1)[0]
    x = np.random.default_rng(0).standard_normal(200000)
    rep = D.moment_tail(x)
    np.testing.assert_allclose(rep.norms, exact, rtol=0.05)
    assert abs(rep.kappa - kappa_exact) <= 0.03
    assert 0.35 <= rep.kappa <= 0.65
    with pytest.raises(D.DiagnosticError):
        D.moment_tail(np.ones(10))


def _xi_grid(rmax, n):
    return [np.array([r * math.cos(a), r * math.sin(a)]) for r in np.linspace(0, rmax, n)
            for a in ([0.0] if r == 0 else [0.0, 2.0])]


def test_strong_monotonicity_constant_isotropic_radial_bound():
    g = make_grid(2, 8.0, 16)
    b = 0.6
    rec = ConstantRecipe(b * np.eye(2))
    p = 4.0
    rep = D.verify_strong_monotonicity(rec, g, p, _xi_grid(4, 5), 1)
    _, c_e6 = radial_monotonicity_bound(lambda t: 1 + t ** (p - 2), lambda t: (p - 2) * t ** (p - 3), p)
    assert rep.c >= b * c_e6
    assert np.isfinite(rep.lipschitz)


def test_strong_monotonicity_p2_above_lambda():
    g = make_grid(2, 16.0, 32)
    rep = D.verify_strong_monotonicity(REC, g, 2.0, _xi_grid(2, 3), 4)
    assert rep.c - 3 * rep.c_se >= REC.lam


def test_strong_monotonicity_rejects_anisotropic():
    g = make_grid(2, 8.0, 16)
    with pytest.raises(D.DiagnosticError):
        D.verify_strong_monotonicity(ConstantRecipe(np.diag([0.5, 0.8])), g, 3.0, _xi_grid(1, 2), 1)


def test_radial_profile_constant_coefficient():
    g = make_grid(2, 8.0, 16)
    b = 0.7
    rep = D.radial_profile_check(ConstantRecipe(b * np.eye(2)), g, 3.0, [0.5, 1, 2, 4], 1)
    assert np.all(np.abs(rep.residual) <= 1e-6)
    ts = rep.ts
    np.testing.assert_allclose(rep.zeta, b * (ts**2 / 2 + ts**3 / 3), rtol=1e-13)
    np.testing.assert_allclose(rep.d2zeta, b * (1 + 2 * ts), rtol=1e-12)
    assert rep.passed


def test_radial_profile_p2_quadratic():
    g = make_grid(2, 8.0, 32)
    rep = D.radial_profile_check(REC, g, 2.0, [0.5, 1, 2, 4], 2)
    c = rep.zeta / rep.ts**2
    np.testing.assert_allclose(c, c[0], rtol=1e-9)
    np.testing.assert_allclose(rep.d2zeta, 2 * c[0], rtol=1e-7)
    assert rep.e8_ratio.min() > 0


def test_radial_profile_random_sample_passes():
    g = make_grid(2, 8.0, 32)
    rep = D.radial_profile_check(REC, g, 3.0, [0.5, 1, 2, 4], 3)
    assert rep.passed
    assert np.all(rep.e8_ratio > 0)


def test_radial_profile_rejects_anisotropic():
    g = make_grid(2, 8.0, 16)
    with pytest.raises(D.DiagnosticError):
        D.radial_profile_check(ConstantRecipe(np.diag([0.5, 0.8])), g, 3.0, [1, 2, 3, 4], 1)


# --- local regularity ------------------------------------------------------------

def test_holefilling_constant_and_dimension_bounds():
    g = make_grid(2, 16.0, 32)
    spec = OperatorSpec(3.0, 0.5, ConstantRecipe(0.5 * np.eye(2)).sample(g), g)
    rep = D.holefilling_fit(solve_corrector(spec, [1.0, 0.0]), [1, 2, 4, 8])
    assert rep.exponent == 0.0 and rep.delta == 2
    g1 = make_grid(1, 64.0, 256)
    b1 = solve_corrector(sample_spec(REC, g1, 3.0, SampleSeed(0, 0)), [1.0])
    assert D.holefilling_fit(b1, [1, 2, 4, 8, 16]).exponent <= 1
    with pytest.raises(D.DiagnosticError):
        D.holefilling_fit(b1, [1, 2])


def test_holefilling_2d_samples_have_positive_delta():
    g = make_grid(2, 32.0, 64)
    for i in range(10):
        b = solve_corrector(sample_spec(REC, g, 3.0, SampleSeed(5, i)), [1.0, 0.0])
        assert D.holefilling_fit(b, [1, 2, 4, 8]).delta > 0


def test_caccioppoli_and_average_control(sample64):
    b, _ = sample64
    rep = D.caccioppoli(b, [1, 2, 4])
    assert np.isfinite(rep.constant) and rep.constant > 0
    assert np.all(rep.rhs > 0)
    rf = D.meyers_radius(b, 0.02)
    hf = D.holefilling_fit(b, [1, 2, 4, 8])
    assert np.isfinite(D.average_control(b, rf.values, hf.delta, [1, 2, 4, 8]))


def test_caccioppoli_linear_solution():
    # u = xi.x on a constant medium: lhs = |xi|^2 (1+|xi|^(p-2)), rhs computed directly
    g = make_grid(2, 16.0, 64)
    spec = OperatorSpec(3.0, 0.5, ConstantRecipe(0.5 * np.eye(2)).sample(g), g)
    b = solve_corrector(spec, [1.0, 0.0])
    rep = D.caccioppoli(b, [2.0])
    assert rep.lhs[0] == pytest.approx(2.0)
    x = g.coords()[0]
    dist = g.periodic_distance(np.zeros(2))
    ann = x[(dist > 2) & (dist <= 4)]
    grid_c = np.linspace(-1, 1, 2001)
    brute = min(np.mean((np.abs(ann - c) / 2) ** 2 + (np.abs(ann - c) / 2) ** 3) for c in grid_c)
    assert rep.rhs[0] == pytest.approx(brute, rel=1e-5)


def test_scaling_invariance():
    g = make_grid(2, 16.0, 32)
    spec = sample_spec(REC, g, 3.0, SampleSeed(2, 0))
    dphi, dabar = D.scaling_invariance(spec, [1.0, -0.5], 0.5)
    assert dphi <= 1e-8 and dabar <= 1e-10


def test_scalar_function_recipe_is_isotropic():
    rec = scalar_function_recipe(lambda x: 0.5 + 0.25 * np.sin(x[0]) ** 2, 0.5)
    assert rec.isotropic
