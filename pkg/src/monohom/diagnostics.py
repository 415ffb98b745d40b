"""Regularity diagnostics (minimal radii, hole-filling, Caccioppoli) and statistical studies."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt
from scipy.optimize import minimize_scalar

from .corrector import (
    CorrectorBundle,
    LinearizedBundle,
    homogenized_map,
    sample_spec,
    solve_corrector,
    solve_flux_corrector,
    solve_linearized,
)
from .field import SampleSeed
from .grid import Grid, ball_average, ball_averages_everywhere, ball_mask, gradient
from .montecarlo import map_samples, mean_and_stderr
from .operator import eval_W

DEFAULT_ELL = 1.0 / 16


class DiagnosticError(ValueError):
    pass


def mu_d(z, d: int):
    """Growth weight: ``1+sqrt|z|`` (d=1), ``sqrt(log(2+|z|))`` (d=2), ``1`` (d=3)."""
    z = np.abs(np.asarray(z, dtype=float))
    if d == 1:
        return 1.0 + np.sqrt(z)
    if d == 2:
        return np.sqrt(np.log(2.0 + z))
    if d == 3:
        return np.ones_like(z)
    raise DiagnosticError(f"no growth weight for d={d}")


def dyadic_radii(r_max: float) -> list[float]:
    """``1, 2, 4, ...`` up to ``r_max``."""
    out, r = [], 1.0
    while r <= r_max * (1 + 1e-12):
        out.append(r)
        r *= 2
    return out


# --- minimal radii --------------------------------------------------------


@dataclass
class RadiusField:
    kind: str
    values: np.ndarray
    underline: np.ndarray | None = None
    params: dict = field(default_factory=dict)

    def check_bounds(self, L: float) -> bool:
        return bool(self.values.min() >= 1.0 and self.values.max() <= L)


def underline_radius(density: np.ndarray, thresholds, radii, grid: Grid, cap: float) -> np.ndarray:
    """Smallest dyadic ``r`` with ``avg_{B_R(x)} density <= threshold(R)`` for every listed ``R >= r``.

    ``thresholds`` holds one scalar or field per radius. Points failing at the
    largest radius get the cap.
    """
    good_from = np.ones(grid.shape, dtype=bool)
    out = np.full(grid.shape, float(cap))
    for R, thr in zip(reversed(radii), reversed(list(thresholds))):
        good_from &= ball_averages_everywhere(density, grid, R) <= thr
        out[good_from] = R
    return out


def periodic_inf_convolution(values: np.ndarray, grid: Grid, ell: float) -> np.ndarray:
    """``min_y values(y) + ell |x - y|`` with periodic distance, exact on the lattice.

    ``values`` takes few distinct values (dyadic radii), so the envelope is the
    minimum over levels ``v`` of ``v + ell dist(x, {values = v})``, each distance
    obtained from an exact Euclidean distance transform on the 3^d-tiled torus.
    """
    d, N = grid.d, grid.N
    centre = tuple(slice(N, 2 * N) for _ in range(d))
    out = np.full(grid.shape, np.inf)
    for v in np.unique(values):
        tiled = np.tile(values != v, (3,) * d)
        _, idx = distance_transform_edt(tiled, return_indices=True)
        offs = idx[(slice(None),) + centre] - np.indices(grid.shape) - N
        dist = grid.h * np.sqrt(np.sum(offs.astype(float) ** 2, axis=0))
        np.minimum(out, v + ell * dist, out=out)
    return out


def meyers_radius(bundle: CorrectorBundle, c1: float, ell: float = DEFAULT_ELL) -> RadiusField:
    grid, p = bundle.grid, bundle.spec.p
    radii = dyadic_radii(grid.L)
    density = np.sum(bundle.grad_phi**2, axis=0) ** (p / 2)
    thr = c1 * (1 + np.linalg.norm(bundle.xi) ** p)
    under = underline_radius(density, [thr] * len(radii), radii, grid, grid.L)
    values = periodic_inf_convolution(under, grid, ell)
    return RadiusField("meyers_nonlinear", values, under, {"c1": c1, "ell": ell})


def linear_minimal_radius(bundle: CorrectorBundle, lin: LinearizedBundle, C: float) -> RadiusField:
    grid = bundle.grid
    radii = dyadic_radii(grid.L / 2)
    density = np.sum(lin.grad_phi**2, axis=0) * bundle.mu
    if np.isinf(C):
        return RadiusField("linear_minimal", np.ones(grid.shape), params={"C": C})
    thr = [C * ball_averages_everywhere(bundle.mu, grid, 2 * R) for R in radii]
    values = underline_radius(density, thr, radii, grid, grid.L / 2)
    return RadiusField("linear_minimal", values, params={"C": C})


def calibrate_c1(bundles, factor: float = 4.0) -> float:
    """``factor`` times the largest normalized ball average of ``|grad phi|^p`` over the references.

    Returns ``factor`` itself when every reference has a vanishing gradient.
    """
    sup = 0.0
    for b in bundles:
        density = np.sum(b.grad_phi**2, axis=0) ** (b.spec.p / 2)
        norm = 1 + np.linalg.norm(b.xi) ** b.spec.p
        for R in dyadic_radii(b.grid.L):
            sup = max(sup, float(ball_averages_everywhere(density, b.grid, R).max()) / norm)
    return factor * sup if sup > 0 else factor


@dataclass
class SandwichReport:
    c1: float
    c2: float
    lower_violations: int
    upper_violations: int

    @property
    def passed(self) -> bool:
        return self.lower_violations == 0 and self.upper_violations == 0


def check_sandwich(bundle: CorrectorBundle, c1: float, ell: float = DEFAULT_ELL) -> SandwichReport:
    """Pointwise ``underline_r(c2) <= r_*(c1) <= underline_r(c1)`` with ``c2 = (1/ell+1)^d c1``."""
    c2 = (1 / ell + 1) ** bundle.grid.d * c1
    rf = meyers_radius(bundle, c1, ell)
    low = meyers_radius(bundle, c2, ell).underline
    tiny = 1e-12 * bundle.grid.L
    return SandwichReport(
        c1, c2,
        int(np.sum(low > rf.values + tiny)),
        int(np.sum(rf.values > rf.underline + tiny)),
    )


# --- statistical studies ----------------------------------------------------


def fit_loglog(x, y) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


@dataclass
class ScalingReport:
    radii: list
    variances: np.ndarray
    slope: float | None
    ci: tuple | None
    sample_count: int
    degenerate: bool = False
    per_sample: np.ndarray | None = None


def _quantity(spec, xi, quantity, tol):
    b = solve_corrector(spec, xi, tol=tol)
    if quantity == "grad_phi":
        return b.grad_phi
    if quantity == "grad_sigma":
        b = solve_flux_corrector(b)
        d = spec.grid.d
        comps = [gradient(b.sigma[i, j], spec.grid) for i in range(d) for j in range(i + 1, d)]
        if not comps:
            raise DiagnosticError("the flux corrector is vacuous in d=1")
        return np.concatenate(comps, axis=0)
    if quantity == "grad_phi_tilde":
        e = np.eye(spec.grid.d)[0]
        return solve_linearized(b, e, tol=tol, with_sigma=False).grad_phi
    raise DiagnosticError(f"unknown quantity {quantity!r}")


def scaling_from_samples(per_sample: np.ndarray, radii, n_boot: int = 2000, seed: int = 0) -> ScalingReport:
    """Slope fit and bootstrap 95% interval from per-sample squared averages.

    ``per_sample[s, k]`` is the (spatially pooled) squared ball average for
    sample ``s`` and radius ``radii[k]``; its mean over samples is the variance.
    """
    n = per_sample.shape[0]
    var = per_sample.mean(axis=0)
    if np.any(var <= 0):
        return ScalingReport(list(radii), var, None, None, n, degenerate=True, per_sample=per_sample)
    slope = fit_loglog(radii, var)
    rng = np.random.default_rng(seed)
    boots = []
    for _ in range(n_boot):
        v = per_sample[rng.integers(0, n, n)].mean(axis=0)
        if np.all(v > 0):
            boots.append(fit_loglog(radii, v))
    ci = (float(np.percentile(boots, 2.5)), float(np.percentile(boots, 97.5)))
    return ScalingReport(list(radii), var, slope, ci, n, per_sample=per_sample)


def clt_scaling(recipe, grid: Grid, p: float, xi, radii, sample_count: int, seed: int = 0,
                quantity: str = "grad_phi", tol: float = 1e-10, threads: int | None = 1,
                pooled: bool = True) -> ScalingReport:
    """Variance of ``avg_{B_R} quantity`` against ``R``.

    The quantity has zero mean, so the variance is the mean squared average.
    With ``pooled`` set, every lattice point serves as a ball centre
    (stationarity); otherwise only the origin is used.
    """
    radii = [float(r) for r in radii]
    if max(radii) > grid.L / 4:
        raise DiagnosticError(f"radii must not exceed L/4 = {grid.L / 4}")
    xi = np.asarray(xi, dtype=float)

    def one(i):
        spec = sample_spec(recipe, grid, p, SampleSeed(seed, i))
        Q = _quantity(spec, xi, quantity, tol)
        row = []
        for R in radii:
            if pooled:
                avg = ball_averages_everywhere(Q, grid, R)
                row.append(float(np.mean(np.sum(avg**2, axis=0))))
            else:
                avg = ball_average(Q, grid, np.zeros(grid.d), R)
                row.append(float(np.sum(avg**2)))
        return row

    per = np.array(map_samples(one, range(sample_count), threads))
    return scaling_from_samples(per, radii, seed=seed)


@dataclass
class GrowthReport:
    points: np.ndarray
    weights: np.ndarray
    phi_moments: dict
    sigma_moments: dict
    phi_ratio: dict
    sigma_ratio: dict
    sup_phi_ratio: np.ndarray


def _point_index(grid: Grid, x):
    idx = np.asarray(x, dtype=float) / grid.h + grid.N // 2
    if not np.allclose(idx, np.round(idx), atol=1e-9):
        raise DiagnosticError(f"point {x} is not a lattice point")
    return tuple(int(round(i)) % grid.N for i in idx)


def corrector_growth(recipe, grid: Grid, p: float, xi, points, sample_count: int, seed: int = 0,
                     qs=(1, 2, 4), tol: float = 1e-10, threads: int | None = 1) -> GrowthReport:
    """Moments of ``|phi(x) - avg_B phi|`` and ``|sigma(x) - avg_B sigma|`` (B the unit ball at 0)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if np.any(np.abs(points) > grid.L / 4):
        raise DiagnosticError("points must lie within Q_{L/4}")
    idx = [_point_index(grid, x) for x in points]
    xi = np.asarray(xi, dtype=float)
    d = grid.d
    ball = ball_mask(grid, np.zeros(d), 1.0)

    def one(i):
        spec = sample_spec(recipe, grid, p, SampleSeed(seed, i))
        b = solve_flux_corrector(solve_corrector(spec, xi, tol=tol))
        phi = b.phi - b.phi[ball].mean()
        sig = b.sigma - b.sigma[..., ball].mean(axis=-1)[(...,) + (None,) * d]
        out_phi = [abs(phi[j]) for j in idx]
        out_sig = [float(np.linalg.norm(sig[(slice(None), slice(None)) + j])) / np.sqrt(2) for j in idx]
        return out_phi, out_sig

    res = map_samples(one, range(sample_count), threads)
    P = np.array([r[0] for r in res])
    S = np.array([r[1] for r in res])
    w = mu_d(np.linalg.norm(points, axis=1), d)
    pm = {q: np.mean(P**q, axis=0) ** (1 / q) for q in qs}
    sm = {q: np.mean(S**q, axis=0) ** (1 / q) for q in qs}
    return GrowthReport(points, w, pm, sm,
                        {q: pm[q] / w for q in qs}, {q: sm[q] / w for q in qs},
                        np.max(P, axis=0) / w)


@dataclass
class MomentReport:
    qs: tuple
    norms: np.ndarray
    kappa: float


def moment_tail(values, qs=(1, 2, 4, 8)) -> MomentReport:
    """``E[X^q]^(1/q)`` for each ``q`` and the log-log growth exponent ``kappa`` in ``q``."""
    v = np.abs(np.asarray(values, dtype=float))
    if v.size < 200:
        raise DiagnosticError("moment_tail needs at least 200 samples")
    norms = np.array([np.mean(v**q) ** (1 / q) for q in qs])
    if np.allclose(norms, norms[0], rtol=1e-14, atol=0):
        return MomentReport(tuple(qs), norms, 0.0)
    return MomentReport(tuple(qs), norms, fit_loglog(qs, norms))


# --- isotropic closure ------------------------------------------------------


@dataclass
class MonotonicityReport:
    xis: np.ndarray
    pairs: list
    ratio_mean: np.ndarray
    ratio_se: np.ndarray
    c: float
    c_se: float
    ci: tuple
    witness: tuple
    lipschitz: float
    abar: np.ndarray
    abar_se: np.ndarray


def e6_ratio(a1, a2, x1, x2, p):
    dx = x1 - x2
    den = (1 + np.linalg.norm(x1) ** (p - 2) + np.linalg.norm(x2) ** (p - 2)) * (dx @ dx)
    return float((a1 - a2) @ dx / den)


def e6_lipschitz(a1, a2, x1, x2, p):
    den = (1 + np.linalg.norm(x1) ** (p - 2) + np.linalg.norm(x2) ** (p - 2)) * np.linalg.norm(x1 - x2)
    return float(np.linalg.norm(a1 - a2) / den)


def verify_strong_monotonicity(recipe, grid: Grid, p: float, xis, sample_count: int, seed: int = 0,
                               tol: float = 1e-10, threads: int | None = 1,
                               require_isotropic: bool = True) -> MonotonicityReport:
    """Monotonicity ratio of the homogenized map on all pairs of a slope grid.

    Every sample is evaluated at every slope (common random numbers), so the
    ratio is averaged per sample and its standard error is that of the mean.
    """
    if require_isotropic and not getattr(recipe, "isotropic", False):
        raise DiagnosticError("the strong monotonicity claim needs an isotropic recipe")
    xis = np.atleast_2d(np.asarray(xis, dtype=float))
    n = len(xis)

    def one(i):
        spec = sample_spec(recipe, grid, p, SampleSeed(seed, i))
        out, prev = [], None
        for xi in xis:
            b = solve_corrector(spec, xi, tol=tol, u0=prev)
            prev = b.phi
            out.append(b.abar)
        return np.array(out)

    A = np.array(map_samples(one, range(sample_count), threads))  # (samples, n, d)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if np.any(xis[i] != xis[j])]
    ratios = np.array([[e6_ratio(A[s, i], A[s, j], xis[i], xis[j], p) for (i, j) in pairs]
                       for s in range(sample_count)])
    rm, rse = mean_and_stderr(ratios)
    k = int(np.argmin(rm))
    abar, abar_se = mean_and_stderr(A)
    lip = max(e6_lipschitz(abar[i], abar[j], xis[i], xis[j], p) for (i, j) in pairs)
    c, se = float(rm[k]), float(rse[k])
    return MonotonicityReport(xis, pairs, rm, rse, c, se, (c - 1.96 * se, c + 1.96 * se),
                              (xis[pairs[k][0]], xis[pairs[k][1]]), lip, abar, abar_se)


@dataclass
class RadialReport:
    ts: np.ndarray
    zeta: np.ndarray
    dzeta: np.ndarray
    h: np.ndarray
    residual: np.ndarray
    residual_se: np.ndarray
    residual_scale: np.ndarray
    d2zeta: np.ndarray
    d2zeta_fd: np.ndarray
    e8_ratio: np.ndarray
    passed: bool


def radial_profile_check(recipe, grid: Grid, p: float, ts, sample_count: int, seed: int = 0,
                         e=None, tol: float = 1e-10, threads: int | None = 1,
                         atol: float = 1e-8) -> RadialReport:
    """Check ``t zeta' - p zeta = h`` for ``zeta(t) = W_bar(t e)`` on an isotropic ensemble.

    For ``a = b (1 + |g|^(p-2)) g`` the decomposition has ``rho_1 = rho_2 = b``
    and ``h(t) = (1 - p/2) E mean(b |g|^2)``. Per sample the identity reduces
    to ``mean(q . grad phi) = 0``, so the residual sits at solver tolerance;
    ``atol`` (relative to ``|t zeta'| + |p zeta|``) is added to the 3-SE band.
    """
    if not getattr(recipe, "isotropic", False):
        raise DiagnosticError("the radial profile check needs an isotropic recipe")
    ts = np.asarray(ts, dtype=float)
    if ts.size < 4:
        raise DiagnosticError("need at least 4 values of t")
    e = np.eye(grid.d)[0] if e is None else np.asarray(e, dtype=float)

    def one(i):
        spec = sample_spec(recipe, grid, p, SampleSeed(seed, i))
        b_field = spec.A[0, 0]
        rows, prev = [], None
        for t in ts:
            bun = solve_corrector(spec, t * e, tol=tol, u0=prev)
            prev = bun.phi
            g = bun.total_gradient
            n2 = np.sum(g**2, axis=0)
            zeta = float(np.mean(eval_W(b_field, g, p)))
            dz = float(bun.abar @ e)
            hh = float((1 - p / 2) * np.mean(b_field * n2))
            d2 = float(solve_linearized(bun, e, tol=tol, with_sigma=False).tangent_row @ e)
            rows.append((zeta, dz, hh, t * dz - p * zeta - hh, d2))
        return np.array(rows)

    R = np.array(map_samples(one, range(sample_count), threads))  # (samples, t, 5)
    m, se = mean_and_stderr(R)
    zeta, dz, hh, res, d2 = m.T
    scale = np.abs(ts * dz) + np.abs(p * zeta)
    fd = np.gradient(dz, ts)
    e8 = d2 / (1 + ts**p) ** ((p - 2) / p)
    passed = bool(np.all(np.abs(res) <= 3 * se[:, 3] + atol * scale))
    return RadialReport(ts, zeta, dz, hh, res, se[:, 3], scale, d2, fd, e8, passed)


# --- local regularity ---------------------------------------------------------


@dataclass
class HoleFillingReport:
    radii: list
    averages: np.ndarray
    exponent: float
    delta: float


def energy_density_p(g: np.ndarray, p: float) -> np.ndarray:
    n2 = np.sum(g**2, axis=0)
    return n2 * (1 + n2 ** ((p - 2) / 2))


def holefilling_fit(bundle: CorrectorBundle, radii, center=None) -> HoleFillingReport:
    """Fit ``avg_{B_r} |grad u|^2 (1+|grad u|^(p-2)) ~ r^(-exponent)`` for ``u = xi.x + phi``.

    ``delta = d - exponent`` is the hole-filling exponent.
    """
    radii = [float(r) for r in radii]
    if len(radii) < 4:
        raise DiagnosticError("need at least 4 radii")
    grid = bundle.grid
    center = np.zeros(grid.d) if center is None else np.asarray(center, dtype=float)
    dens = energy_density_p(bundle.total_gradient, bundle.spec.p)
    avgs = np.array([float(ball_average(dens, grid, center, r)) for r in radii])
    if np.allclose(avgs, avgs[0], rtol=1e-12, atol=0):
        exponent = 0.0
    else:
        exponent = -fit_loglog(radii, avgs)
    return HoleFillingReport(radii, avgs, exponent, grid.d - exponent)


@dataclass
class CaccioppoliReport:
    radii: list
    lhs: np.ndarray
    rhs: np.ndarray
    constant: float


def caccioppoli(bundle: CorrectorBundle, radii, center=None) -> CaccioppoliReport:
    """Ratios ``avg_{B_r} |grad u|^2(1+|grad u|^(p-2)) / inf_c avg_{B_2r \\ B_r} (|u-c|/r)^2 + (|u-c|/r)^p``."""
    grid, p = bundle.grid, bundle.spec.p
    center = np.zeros(grid.d) if center is None else np.asarray(center, dtype=float)
    disp = grid.periodic_displacement(center)
    u = np.tensordot(bundle.xi, disp, axes=1) + bundle.phi
    dist = grid.periodic_distance(center)
    dens = energy_density_p(bundle.total_gradient, p)
    lhs, rhs = [], []
    for r in radii:
        if 2 * r > grid.L / 2:
            raise DiagnosticError("need 2r <= L/2")
        lhs.append(float(dens[ball_mask(grid, center, r)].mean()))
        ann = u[(dist > r * (1 + 1e-12)) & (dist <= 2 * r * (1 + 1e-12))]

        def osc(c, ann=ann, r=r):
            t = np.abs(ann - c) / r
            return float(np.mean(t**2 + t**p))

        if np.ptp(ann) == 0:
            rhs.append(0.0)
            continue
        res = minimize_scalar(osc, bounds=(ann.min(), ann.max()), method="bounded",
                              options={"xatol": 1e-10 * max(1.0, np.ptp(ann))})
        rhs.append(min(res.fun, osc(ann.mean())))
    lhs, rhs = np.array(lhs), np.array(rhs)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(rhs > 0, lhs / rhs, np.where(lhs > 0, np.inf, 0.0))
    return CaccioppoliReport(list(radii), lhs, rhs, float(ratio.max()))


def average_control(bundle: CorrectorBundle, rstar: np.ndarray, delta: float, radii, center=None) -> float:
    """Smallest ``C`` with ``avg_{B_r}|g|^2+|g|^p <= C (1+|xi|^p) ((r_* v r)/r)^(d-delta)`` at ``center``."""
    grid, p = bundle.grid, bundle.spec.p
    center = np.zeros(grid.d) if center is None else np.asarray(center, dtype=float)
    n2 = np.sum(bundle.total_gradient**2, axis=0)
    dens = n2 + n2 ** (p / 2)
    rs = float(rstar[_point_index(grid, center)])
    C = 0.0
    for r in radii:
        avg = float(ball_average(dens, grid, center, r))
        bound = (1 + np.linalg.norm(bundle.xi) ** p) * (max(rs, r) / r) ** (grid.d - delta)
        C = max(C, avg / bound)
    return C


def scaling_invariance(spec, xi, s: float, tol: float = 1e-10) -> tuple[float, float]:
    """Relative change of ``grad phi`` and of ``abar / s`` when ``A`` is replaced by ``s A``."""
    b1 = solve_corrector(spec, xi, tol=tol)
    b2 = solve_corrector(spec.scaled(s), xi, tol=tol)
    gn = max(np.linalg.norm(b1.grad_phi), 1e-300)
    dphi = float(np.linalg.norm(b2.grad_phi - b1.grad_phi) / gn) if np.any(b1.grad_phi) else float(
        np.linalg.norm(b2.grad_phi))
    an = np.linalg.norm(b1.abar)
    dabar = float(np.linalg.norm(b2.abar / s - b1.abar) / an) if an > 0 else float(np.linalg.norm(b2.abar))
    return dphi, dabar
