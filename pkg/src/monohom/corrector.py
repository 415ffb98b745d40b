"""Extended nonlinear and linearized correctors, the homogenized map and its tangent."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .field import SampleSeed
from .grid import Grid, divergence, gradient, matrix_divergence
from .montecarlo import map_samples, mean_and_stderr
from .operator import OperatorSpec, eval_a, eval_Da, flux, tangent
from .solver import (
    NonlinearProblem,
    SolveStats,
    _inverse_laplacian,
    solve_linear,
    solve_nonlinear,
)


class CorrectorError(RuntimeError):
    pass


@dataclass
class CorrectorBundle:
    spec: OperatorSpec
    xi: np.ndarray
    phi: np.ndarray
    grad_phi: np.ndarray
    q: np.ndarray
    abar: np.ndarray
    mu: np.ndarray
    stats: SolveStats
    sigma: np.ndarray | None = None
    sigma_residual: float | None = None
    tol: float = 1e-10

    @property
    def grid(self) -> Grid:
        return self.spec.grid

    @property
    def total_gradient(self) -> np.ndarray:
        return _slope(self.xi, self.grid) + self.grad_phi


@dataclass
class LinearizedBundle:
    e: np.ndarray
    a_xi: np.ndarray
    phi: np.ndarray
    grad_phi: np.ndarray
    q: np.ndarray
    tangent_row: np.ndarray
    weighted_energy: float
    weighted_energy_shifted: float
    stats: SolveStats
    sigma: np.ndarray | None = None
    sigma_residual: float | None = None


def _slope(xi, grid: Grid) -> np.ndarray:
    return np.asarray(xi, dtype=float).reshape((grid.d,) + (1,) * grid.d)


def flux_defect(q: np.ndarray, grid: Grid) -> float:
    """``||q - mean(q) - div sigma||`` for the sigma built from ``q``, relative to ``||q||``."""
    res = np.linalg.norm(_sigma_divergence_residual(q, grid))
    qn = np.linalg.norm(q)
    return float(res / qn) if qn > 0 else float(res)


def _sigma_divergence_residual(q, grid):
    # div sigma - (q - qbar) = grad (-Delta)^{-1} div q, identically in the discrete calculus
    dq = divergence(q, grid)
    return gradient(_inverse_laplacian(dq - dq.mean(), grid), grid)


def solve_corrector(
    spec: OperatorSpec,
    xi,
    tol: float = 1e-10,
    lin_tol: float = 1e-8,
    max_newton: int = 50,
    u0: np.ndarray | None = None,
    max_krylov: int = 2000,
) -> CorrectorBundle:
    """Zero-mean periodic corrector ``phi`` with ``-div a(x, xi + grad phi) = 0``.

    After the Newton residual test, iterations continue until the flux
    equilibrium defect (which controls the flux-corrector identity) is below
    ``tol`` relative to ``||q||``.
    """
    grid = spec.grid
    xi = np.asarray(xi, dtype=float).reshape(grid.d)
    problem = NonlinearProblem(spec, xi=xi, tol=tol, lin_tol=lin_tol, max_newton=max_newton, u0=u0,
                               max_krylov=max_krylov)
    phi, stats = solve_nonlinear(problem)
    q = flux(spec, _slope(xi, grid) + gradient(phi, grid))
    tighter = tol
    for _ in range(3):
        if flux_defect(q, grid) <= tol:
            break
        tighter *= 1e-2
        problem = replace(problem, tol=tighter, u0=phi)
        phi, extra = solve_nonlinear(problem)
        stats.iterations += extra.iterations
        stats.history += extra.history
        stats.linear_iterations += extra.linear_iterations
        stats.residual = extra.residual
        q = flux(spec, _slope(xi, grid) + gradient(phi, grid))
    grad_phi = gradient(phi, grid)
    g = _slope(xi, grid) + grad_phi
    n = np.sqrt(np.sum(g**2, axis=0))
    mu = 1.0 + n ** (spec.p - 2)
    abar = q.reshape(grid.d, -1).mean(axis=1)
    return CorrectorBundle(spec=spec, xi=xi, phi=phi, grad_phi=grad_phi, q=q, abar=abar,
                           mu=mu, stats=stats, tol=tol)


def flux_potential(q: np.ndarray, grid: Grid) -> tuple[np.ndarray, float]:
    """Skew field ``sigma_ij = (-Delta)^{-1}(D_i^+ q_j - D_j^+ q_i)`` and the residual of ``div sigma = q - mean q``."""
    d = grid.d
    sigma = np.zeros((d, d) + grid.shape)
    for i in range(d):
        for j in range(i + 1, d):
            rhs = (np.roll(q[j], -1, axis=i) - q[j]) / grid.h - (np.roll(q[i], -1, axis=j) - q[i]) / grid.h
            s = _inverse_laplacian(rhs, grid)
            sigma[i, j] = s
            sigma[j, i] = -s
    qbar = q.reshape(d, -1).mean(axis=1)
    res = matrix_divergence(sigma, grid) - (q - _slope(qbar, grid))
    qn = np.linalg.norm(q)
    rel = float(np.linalg.norm(res) / qn) if qn > 0 else float(np.linalg.norm(res))
    return sigma, rel


def solve_flux_corrector(bundle: CorrectorBundle) -> CorrectorBundle:
    grid = bundle.grid
    if grid.d == 1:
        return replace(bundle, sigma=np.zeros((1, 1) + grid.shape), sigma_residual=0.0)
    sigma, rel = flux_potential(bundle.q, grid)
    if rel > 100 * bundle.tol:
        raise CorrectorError(f"flux corrector identity residual {rel:.3e} exceeds 100 tol")
    return replace(bundle, sigma=sigma, sigma_residual=rel)


def solve_linearized(
    bundle: CorrectorBundle,
    e,
    tol: float = 1e-10,
    with_sigma: bool = True,
    u0: np.ndarray | None = None,
) -> LinearizedBundle:
    """Linearized corrector ``-div a_xi (e + grad phi~) = 0`` with ``a_xi = Da(x, xi + grad phi)``."""
    spec, grid = bundle.spec, bundle.grid
    e = np.asarray(e, dtype=float).reshape(grid.d)
    if not np.isclose(np.linalg.norm(e), 1.0, rtol=1e-12):
        raise ValueError("direction must be a unit vector")
    a_xi = tangent(spec, bundle.total_gradient)
    rhs = np.einsum("ij...,j->i...", a_xi, e)
    phi, stats = solve_linear(a_xi, rhs, grid, tol=tol, x0=u0)
    grad = gradient(phi, grid)
    ql = np.einsum("ij...,j...->i...", a_xi, _slope(e, grid) + grad)
    row = ql.reshape(grid.d, -1).mean(axis=1)
    en = np.sum(grad**2, axis=0)
    n = np.sqrt(np.sum(bundle.total_gradient**2, axis=0))
    lb = LinearizedBundle(
        e=e, a_xi=a_xi, phi=phi, grad_phi=grad, q=ql, tangent_row=row,
        weighted_energy=float(np.mean(en * bundle.mu)),
        weighted_energy_shifted=float(np.mean(en * (1 + n) ** (spec.p - 2))),
        stats=stats,
    )
    if with_sigma and grid.d > 1:
        lb.sigma, lb.sigma_residual = flux_potential(ql, grid)
    elif with_sigma:
        lb.sigma, lb.sigma_residual = np.zeros((1, 1) + grid.shape), 0.0
    return lb


def exact_constant_map(M, xi, p, shift=1.0):
    return eval_a(np.asarray(M, dtype=float), np.asarray(xi, dtype=float), p, shift)


def exact_constant_tangent(M, xi, p, shift=1.0):
    return eval_Da(np.asarray(M, dtype=float), np.asarray(xi, dtype=float), p, shift)


# --- Monte-Carlo estimators -------------------------------------------------


@dataclass
class SampleResult:
    index: int
    abar: np.ndarray
    tangent: np.ndarray | None = None
    newton_iterations: int = 0
    residual: float = 0.0
    extras: dict = field(default_factory=dict)


def sample_spec(recipe, grid: Grid, p: float, seed: SampleSeed, shift: float = 1.0) -> OperatorSpec:
    A = recipe.sample(grid, seed)
    return OperatorSpec(p, recipe.lam, A, grid, shift)


def homogenized_map(
    recipe,
    grid: Grid,
    p: float,
    xi,
    sample_count: int = 1,
    seed: int = 0,
    tol: float = 1e-10,
    threads: int | None = 1,
    return_samples: bool = False,
):
    """Monte-Carlo mean of the spatial flux average over independent coefficient samples."""
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    xi = np.asarray(xi, dtype=float)

    def one(i):
        spec = sample_spec(recipe, grid, p, SampleSeed(seed, i))
        b = solve_corrector(spec, xi, tol=tol)
        return SampleResult(i, b.abar, newton_iterations=b.stats.iterations, residual=b.stats.residual)

    results = map_samples(one, range(sample_count), threads)
    est, err = mean_and_stderr([r.abar for r in results])
    if return_samples:
        return est, err, results
    return est, err


def homogenized_tangent(
    recipe,
    grid: Grid,
    p: float,
    xi,
    sample_count: int = 1,
    seed: int = 0,
    tol: float = 1e-10,
    threads: int | None = 1,
    return_samples: bool = False,
):
    """Monte-Carlo mean of ``D abar_L(xi)``; column ``j`` is the linearized flux average for ``e_j``."""
    xi = np.asarray(xi, dtype=float)
    d = grid.d

    def one(i):
        spec = sample_spec(recipe, grid, p, SampleSeed(seed, i))
        b = solve_corrector(spec, xi, tol=tol)
        cols = [solve_linearized(b, np.eye(d)[j], tol=tol, with_sigma=False).tangent_row for j in range(d)]
        return SampleResult(i, b.abar, tangent=np.stack(cols, axis=1),
                            newton_iterations=b.stats.iterations, residual=b.stats.residual)

    results = map_samples(one, range(sample_count), threads)
    est, err = mean_and_stderr([r.tangent for r in results])
    if return_samples:
        return est, err, results
    return est, err
