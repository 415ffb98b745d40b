"""Acceptance criteria at full scale. Each test records one PASS/FAIL line per criterion."""

import json

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.optimize import brentq

from criteria import record
from monohom import diagnostics as D
from monohom.cli import main
from monohom.corrector import (
    homogenized_tangent,
    sample_spec,
    solve_corrector,
    solve_flux_corrector,
    solve_linearized,
)
from monohom.field import CoefficientRecipe, ConstantRecipe, CovarianceSpec, SampleSeed
from monohom.grid import make_grid, matrix_divergence
from monohom.operator import OperatorSpec
from monohom.twoscale import rate_study
from oracles import brute_inf_convolution, brute_underline

pytestmark = pytest.mark.acceptance

REC = CoefficientRecipe(CovarianceSpec(ell_c=1.0), lam=0.25)
EPSILONS = [1 / 4, 1 / 8, 1 / 16, 1 / 32]


def rms(v):
    return float(np.sqrt(np.mean(np.sum(v**2, axis=0))))


# 1 ----------------------------------------------------------------------------


def test_constant_coefficient_exactness():
    worst_grad, worst_abar, worst_sigma = 0.0, 0.0, 0.0
    for d, M in ((2, [[0.7, 0.1], [-0.1, 0.5]]), (3, np.diag([0.9, 0.6, 0.4]))):
        M = np.asarray(M, dtype=float)
        g = make_grid(d, 8.0, 16)
        A = ConstantRecipe(M).sample(g)
        for p in (2.0, 3.0, 4.0):
            spec = OperatorSpec(p, 0.4, A, g)
            for s in (1.0, 2.0):
                xi = s * np.eye(d)[0]
                b = solve_flux_corrector(solve_corrector(spec, xi))
                expected = M @ xi * (1 + s ** (p - 2))
                worst_grad = max(worst_grad, rms(b.grad_phi))
                worst_abar = max(worst_abar, float(np.abs(b.abar - expected).max()))
                worst_sigma = max(worst_sigma, float(np.abs(b.sigma).max()))
    ok = worst_grad <= 1e-10 and worst_abar <= 1e-10 and worst_sigma == 0.0
    record(1, ok, f"max |grad phi| {worst_grad:.2e}, max abar error {worst_abar:.2e}, max |sigma| {worst_sigma:.2e}")
    assert ok


# 2 ----------------------------------------------------------------------------


def laminate_oracle(b, xi, p, L):
    """Root-find the constant 1-D flux ``q`` with ``avg g(q, x) = xi``, ``b (1 + |g|^(p-2)) g = q``."""

    def slope(q, x):
        target = q / b(x)
        hi = max(1.0, abs(target))
        return brentq(lambda g: (1 + abs(g) ** (p - 2)) * g - target, -hi, hi, xtol=1e-15, rtol=1e-15)

    def mean_slope(q):
        return quad(lambda x: slope(q, x), 0.0, L, epsabs=1e-12, epsrel=1e-12, limit=200)[0] / L - xi

    hi = 2 * (1 + abs(xi) ** (p - 2)) * abs(xi) + 1
    return brentq(mean_slope, -hi, hi, xtol=1e-15, rtol=1e-15)


def test_one_dimensional_oracle():
    L, N = 1.0, 1024
    g = make_grid(1, L, N)

    def b(x):
        return (2 + np.cos(2 * np.pi * x / L)) / 3

    A = b(g.coords()[0])[None, None]
    worst3, worst2 = 0.0, 0.0
    for xi in (-1.5, 0.5, 1.0, 2.0):
        q3 = solve_corrector(OperatorSpec(3.0, 1 / 3, A, g), [xi], tol=1e-12).abar[0]
        worst3 = max(worst3, abs(q3 / laminate_oracle(b, xi, 3.0, L) - 1))
        q2 = solve_corrector(OperatorSpec(2.0, 1 / 3, A, g), [xi], tol=1e-12).abar[0]
        # 1/avg(1/(2b)) = 2/sqrt(3) for b = (2 + cos)/3
        worst2 = max(worst2, abs(q2 / (2 * xi / np.sqrt(3)) - 1))
    ok = worst3 <= 1e-6 and worst2 <= 1e-8
    record(2, ok, f"p=3 rel error {worst3:.2e} (<=1e-6), p=2 rel error {worst2:.2e} (<=1e-8)")
    assert ok


# 3 ----------------------------------------------------------------------------


def test_flux_identity_on_random_samples():
    g = make_grid(2, 16.0, 64)
    tol = 1e-10
    worst, skew = 0.0, True
    for i in range(20):
        spec = sample_spec(REC, g, 3.0, SampleSeed(3, i))
        bun = solve_flux_corrector(solve_corrector(spec, [1.0, 0.5], tol=tol))
        s = bun.sigma
        skew &= bool(np.array_equal(s, -np.swapaxes(s, 0, 1)))
        res = matrix_divergence(s, g) - (bun.q - bun.abar.reshape(2, 1, 1))
        worst = max(worst, float(np.linalg.norm(res) / np.linalg.norm(bun.q)))
    ok = worst <= 10 * tol and skew
    record(3, ok, f"max relative residual {worst:.2e} (<= {10 * tol:.0e}), skew exact {skew}")
    assert ok


# 4 ----------------------------------------------------------------------------


def test_tangent_consistency():
    g = make_grid(2, 8.0, 32)
    xi = np.array([1.0, 0.5])
    h, tol, n = 1e-3, 1e-12, 5
    T, _ = homogenized_tangent(REC, g, 3.0, xi, sample_count=n, seed=4, tol=tol)
    fd = np.zeros((2, 2))
    worst_field = 0.0
    for i in range(n):
        spec = sample_spec(REC, g, 3.0, SampleSeed(4, i))
        b0 = solve_corrector(spec, xi, tol=tol)
        for j in range(2):
            e = np.eye(2)[j]
            plus = solve_corrector(spec, xi + h * e, tol=tol, u0=b0.phi)
            minus = solve_corrector(spec, xi - h * e, tol=tol, u0=b0.phi)
            fd[:, j] += (plus.abar - minus.abar) / (2 * h) / n
            lin = solve_linearized(b0, e, tol=tol, with_sigma=False)
            diff = (plus.grad_phi - b0.grad_phi) / h
            worst_field = max(worst_field, float(np.linalg.norm(diff - lin.grad_phi) / np.linalg.norm(lin.grad_phi)))
    comp = float(np.max(np.abs(fd - T) / np.abs(T)))
    ok = comp <= 1e-3 and worst_field <= 1e-3
    record(4, ok, f"componentwise tangent rel error {comp:.2e}, per-sample grad phi rel error {worst_field:.2e}")
    assert ok


# 5 ----------------------------------------------------------------------------


def test_clt_scaling():
    radii = [2.0, 4.0, 8.0, 16.0]
    r2 = D.clt_scaling(REC, make_grid(2, 64.0, 128), 3.0, [1.0, 0.0], radii, sample_count=200, seed=5)
    r1 = D.clt_scaling(REC, make_grid(1, 256.0, 512), 3.0, [1.0], radii, sample_count=200, seed=5)
    ok = abs(r2.slope + 2) <= 0.3 and abs(r1.slope + 1) <= 0.3
    record(5, ok, f"d=2 slope {r2.slope:.3f} CI ({r2.ci[0]:.2f}, {r2.ci[1]:.2f}) target -2+-0.3; "
                  f"d=1 slope {r1.slope:.3f} CI ({r1.ci[0]:.2f}, {r1.ci[1]:.2f}) target -1+-0.3")
    assert ok


# 6 ----------------------------------------------------------------------------


def test_energy_and_lipschitz_bounds():
    g = make_grid(2, 8.0, 32)
    p = 3.0
    axis = np.linspace(-1.4, 1.4, 5)
    xis = [np.array([x, y]) for x in axis for y in axis]
    C_energy, C_lip = [], []
    for i in range(5):
        spec = sample_spec(REC, g, p, SampleSeed(6, i))
        grads, prev = [], None
        for xi in xis:
            b = solve_corrector(spec, xi, u0=prev)
            prev = b.phi
            grads.append(b.grad_phi)
        ce = 0.0
        for xi, gp in zip(xis, grads):
            n = np.linalg.norm(xi)
            dens = np.sum(gp**2, axis=0)
            if n == 0:
                assert not np.any(gp)
                continue
            ce = max(ce, float(np.mean(dens + dens ** (p / 2))) / (n**2 + n**p))
        cl = max(rms(g1 - g2) / np.linalg.norm(x1 - x2)
                 for a, (x1, g1) in enumerate(zip(xis, grads))
                 for x2, g2 in list(zip(xis, grads))[a + 1:])
        C_energy.append(ce)
        C_lip.append(cl)
    C_energy, C_lip = np.array(C_energy), np.array(C_lip)
    ok = (np.all(np.isfinite(C_energy)) and np.all(np.isfinite(C_lip))
          and C_energy.max() <= 10 * np.median(C_energy) and C_lip.max() <= 10 * np.median(C_lip))
    record(6, ok, f"energy constant {C_energy.max():.3f} (median {np.median(C_energy):.3f}), "
                  f"Lipschitz constant {C_lip.max():.3f} (median {np.median(C_lip):.3f})")
    assert ok


# 7 ----------------------------------------------------------------------------


def test_meyers_radius_oracles():
    g = make_grid(2, 32.0, 64)
    spec = sample_spec(REC, g, 3.0, SampleSeed(7, 0))
    b = solve_corrector(spec, [1.0, 0.5])
    lb = solve_linearized(b, np.array([1.0, 0.0]))
    c1, C = 0.02, 0.05

    rf = D.meyers_radius(b, c1)
    radii = D.dyadic_radii(g.L)
    dens = np.sum(b.grad_phi**2, axis=0) ** 1.5
    thr = c1 * (1 + np.linalg.norm(b.xi) ** 3)
    under = brute_underline(dens, [thr] * len(radii), radii, g, g.L)
    meyers_ok = np.array_equal(under, rf.underline) and np.array_equal(
        brute_inf_convolution(under, g, D.DEFAULT_ELL), rf.values)

    lrf = D.linear_minimal_radius(b, lb, C)
    lradii = D.dyadic_radii(g.L / 2)
    ldens = np.sum(lb.grad_phi**2, axis=0) * b.mu
    coords = g.coords()
    thresholds = []
    for R in lradii:
        t = np.empty(g.shape)
        for idx in np.ndindex(*g.shape):
            dist = g.periodic_distance(coords[(slice(None),) + idx])
            t[idx] = C * b.mu[dist <= 2 * R * (1 + 1e-12)].mean()
        thresholds.append(t)
    linear_ok = np.array_equal(brute_underline(ldens, thresholds, lradii, g, g.L / 2), lrf.values)

    lip = -np.inf
    for idx in np.ndindex(*g.shape):
        dist = g.periodic_distance(coords[(slice(None),) + idx])
        lip = max(lip, float(np.max(np.abs(rf.values - rf.values[idx]) - D.DEFAULT_ELL * dist)))
    sandwich = all(D.check_sandwich(b, c).passed for c in (0.01, 0.02, 0.05))
    ok = meyers_ok and linear_ok and lip <= 2 * g.h and sandwich
    record(7, ok, f"meyers exact {meyers_ok}, linear radius exact {linear_ok}, "
                  f"Lipschitz excess {lip:.3g} (<= {2 * g.h}), sandwich {sandwich}")
    assert ok


# 8 ----------------------------------------------------------------------------


def test_isotropic_strong_monotonicity():
    g = make_grid(2, 8.0, 32)
    p = 4.0
    dirs = [np.array([np.cos(a), np.sin(a)]) for a in (0.0, np.pi / 4, np.pi / 2)]
    xis = [np.zeros(2)] + [t * e for t in (1.0, 2.0, 4.0) for e in dirs]
    mono = D.verify_strong_monotonicity(REC, g, p, xis, sample_count=100, seed=8)
    radial = D.radial_profile_check(REC, g, p, [0.5, 1.0, 2.0, 3.0, 4.0], sample_count=100, seed=8)
    worst = float(np.max(np.abs(radial.residual) / np.maximum(radial.residual_se, 1e-300)))
    ok = mono.ci[0] > 0 and np.isfinite(mono.lipschitz) and radial.passed
    record(8, ok, f"c = {mono.c:.4f} CI ({mono.ci[0]:.4f}, {mono.ci[1]:.4f}), E6' Lipschitz {mono.lipschitz:.3f}, "
                  f"zeta-ODE max |res|/SE {worst:.2f}, band passed {radial.passed}")
    assert ok


# 9 ----------------------------------------------------------------------------


def test_two_scale_rate_periodic_and_control():
    per = rate_study("periodic", EPSILONS, N=256)
    ctl = rate_study("constant", EPSILONS, N=256)
    worst = max(r.err_L2 for r in ctl.rows)
    ok = per.slope >= 0.8 and worst <= 1e-8
    errs = ", ".join(f"{per.mean_errors[e]:.3e}" for e in EPSILONS)
    record(9, ok, f"periodic slope {per.slope:.3f} (>= 0.8; errors {errs}), constant control max error {worst:.1e}")
    assert ok


def test_two_scale_rate_random():
    # Known red at desk scale: the expansion error is pre-asymptotic over this epsilon range.
    rnd = rate_study("random", EPSILONS, N=256, sample_count=4, seed=9)
    errs = ", ".join(f"{rnd.mean_errors[e]:.3e}" for e in EPSILONS)
    ok = rnd.slope >= 0.75
    record(9, ok, f"random slope {rnd.slope:.3f} (>= 0.75; errors {errs})")
    assert ok


# 10 ---------------------------------------------------------------------------


STUDIES = {
    "homogenize": {"xis": [[1.0, 0.0], [0.5, 0.5]], "sample_count": 4},
    "tangent": {"xi": [1.0, 0.5], "sample_count": 3},
    "clt": {"xi": [1.0, 0.0], "radii": [0.5, 1, 2], "sample_count": 4},
    "growth": {"xi": [1.0, 0.0], "points": [[1.0, 0.0], [2.0, 1.0]], "sample_count": 4},
    "monotonicity": {"xis": [[0, 0], [1, 0], [0, 1], [1, 1]], "sample_count": 4},
    "radial-ode": {"ts": [0.5, 1, 1.5, 2], "sample_count": 4},
    "radius": {"xi": [1.0, 0.0], "samples": 2},
}


def test_infrastructure(tmp_path):
    assert main(["verify", "--out", str(tmp_path / "verify")]) == 0
    rep = json.loads((tmp_path / "verify" / "report.json").read_text())
    times = {c["name"]: c["value"] for c in rep["checks"] if c["name"].endswith("verify.time")}
    verify_ok = rep["status"] == "ok" and len(times) == 3 and max(times.values()) <= 60

    mismatched, count = [], 0
    for study, params in STUDIES.items():
        cfg = tmp_path / f"{study}.json"
        cfg.write_text(json.dumps({"study": study, "grid": {"d": 2, "L": 8, "N": 32}, "seed": 10, "params": params}))
        outs = []
        for threads in (1, 4):
            out = tmp_path / f"{study}-t{threads}"
            assert main(["run", str(cfg), "--threads", str(threads), "--out", str(out)]) == 0
            outs.append(out)
        files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*.csv"))
        count += len(files)
        mismatched += [f"{study}/{f}" for f in files if (outs[0] / f).read_bytes() != (outs[1] / f).read_bytes()]
    ok = verify_ok and count >= len(STUDIES) and not mismatched
    record(10, ok, "verify times " + ", ".join(f"{k.split('.')[0]} {v:.1f}s" for k, v in sorted(times.items()))
           + f"; {count} CSVs compared across threads 1/4, mismatches {mismatched or 'none'}")
    assert ok
