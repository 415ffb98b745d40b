"""Periodic divergence-form solvers: FFT Poisson, preconditioned Krylov, damped Newton."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.sparse.linalg import LinearOperator, gmres

from .grid import Grid, divergence, gradient
from .operator import OperatorSpec, energy_density, flux, tangent

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    def __init__(self, message, stats=None):
        super().__init__(message)
        self.stats = stats


@dataclass
class SolveStats:
    iterations: int = 0
    residual: float = 0.0
    history: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    linear_iterations: list = field(default_factory=list)
    energies: list = field(default_factory=list)
    wall_time: float = 0.0
    method: str = ""


@lru_cache(maxsize=32)
def laplacian_symbol(grid: Grid) -> np.ndarray:
    """Symbol of ``-Delta_h`` in rfftn layout: ``sum_i (4/h^2) sin^2(pi k_i / N)``."""
    N, h = grid.N, grid.h
    full = 4.0 / h**2 * np.sin(np.pi * np.arange(N) / N) ** 2
    half = full[: N // 2 + 1]
    axes = [full] * (grid.d - 1) + [half]
    sym = np.zeros([len(a) for a in axes])
    for i, a in enumerate(axes):
        shape = [1] * grid.d
        shape[i] = len(a)
        sym = sym + a.reshape(shape)
    return sym


def _inverse_laplacian(rhs: np.ndarray, grid: Grid) -> np.ndarray:
    sym = laplacian_symbol(grid)
    rhat = np.fft.rfftn(rhs)
    inv = np.zeros_like(sym)
    np.divide(1.0, sym, out=inv, where=sym > 0)
    return np.fft.irfftn(rhat * inv, s=grid.shape, axes=tuple(range(grid.d)))


def solve_poisson(rhs: np.ndarray, grid: Grid) -> np.ndarray:
    """Zero-mean solution of ``-Delta_h u = rhs`` on the torus."""
    m = float(np.mean(rhs))
    if abs(m) > 1e-12 * max(1.0, float(np.sqrt(np.mean(rhs**2)))):
        raise ValueError(f"Poisson right-hand side has nonzero mean {m:.3e}")
    return _inverse_laplacian(rhs, grid)


def apply_operator(coef: np.ndarray, u: np.ndarray, grid: Grid) -> np.ndarray:
    """``-div(coef grad u)``."""
    return -divergence(np.einsum("ij...,j...->i...", coef, gradient(u, grid)), grid)


def _pcg(apply, precond, b, x0, tol, max_iter):
    x = x0.copy()
    r = b - apply(x)
    bnorm = np.linalg.norm(b)
    z = precond(r)
    d = z.copy()
    rz = np.vdot(r, z)
    it = 0
    while np.linalg.norm(r) > tol * bnorm and it < max_iter:
        Ad = apply(d)
        alpha = rz / np.vdot(d, Ad)
        x += alpha * d
        r -= alpha * Ad
        z = precond(r)
        rz_new = np.vdot(r, z)
        d = z + (rz_new / rz) * d
        rz = rz_new
        it += 1
    return x, it


def solve_linear(
    coef: np.ndarray,
    g: np.ndarray,
    grid: Grid,
    tol: float = 1e-10,
    max_iter: int = 2000,
    x0: np.ndarray | None = None,
) -> tuple[np.ndarray, SolveStats]:
    """Zero-mean ``u`` with ``-div(coef grad u) = div g``.

    CG when ``coef`` is pointwise symmetric, restarted GMRES otherwise; both
    preconditioned by ``-mbar Delta_h`` inverted with FFTs.
    """
    t0 = time.perf_counter()
    b = divergence(g, grid)
    b = b - b.mean()
    bnorm = np.linalg.norm(b)
    stats = SolveStats()
    if bnorm == 0.0:
        stats.wall_time = time.perf_counter() - t0
        stats.method = "trivial"
        return np.zeros(grid.shape), stats
    d = grid.d
    mbar = float(np.mean(sum(coef[i, i] for i in range(d)))) / d
    if not mbar > 0:
        raise SolverError("coefficient trace mean must be positive", stats)
    apply = lambda u: apply_operator(coef, u, grid)  # noqa: E731
    precond = lambda r: _inverse_laplacian(r - r.mean(), grid) / mbar  # noqa: E731
    x = np.zeros(grid.shape) if x0 is None else np.array(x0, dtype=float)
    symmetric = np.array_equal(coef, np.swapaxes(coef, 0, 1))
    total = 0
    for _ in range(4):
        if symmetric:
            stats.method = "pcg"
            x, it = _pcg(apply, precond, b, x, tol, max_iter - total)
        else:
            stats.method = "gmres"
            shape = grid.shape
            n = grid.size
            op = LinearOperator((n, n), matvec=lambda v: apply(v.reshape(shape)).ravel())
            M = LinearOperator((n, n), matvec=lambda v: precond(v.reshape(shape)).ravel())
            counter = [0]

            def cb(_):
                counter[0] += 1

            restart = 60
            xf, _info = gmres(op, b.ravel(), x0=x.ravel(), rtol=tol, atol=0.0, restart=restart,
                              maxiter=max(1, (max_iter - total) // restart + 1), M=M,
                              callback=cb, callback_type="pr_norm")
            x, it = xf.reshape(shape), counter[0]
        total += it
        x -= x.mean()
        res = np.linalg.norm(b - apply(x)) / bnorm
        if res <= tol or total >= max_iter:
            break
    stats.iterations = total
    stats.residual = float(res)
    stats.wall_time = time.perf_counter() - t0
    if res > tol:
        raise SolverError(f"{stats.method} did not reach tol {tol:.1e} (residual {res:.3e})", stats)
    return x, stats


@dataclass
class NonlinearProblem:
    """``-div a(x, xi + grad u) = div f`` on the torus, zero-mean ``u``.

    Corrector mode sets ``xi`` and leaves ``f`` empty; boundary-value mode sets ``f``.
    ``law`` replaces the pointwise map of ``spec`` by any object with
    ``value(G)`` and ``jacobian(G)`` (homogenized maps); ``grid`` is then required.
    """

    spec: OperatorSpec | None
    xi: np.ndarray | None = None
    f: np.ndarray | None = None
    tol: float = 1e-10
    max_newton: int = 50
    lin_tol: float = 1e-8
    max_krylov: int = 2000
    u0: np.ndarray | None = None
    law: object | None = None
    grid: Grid | None = None

    def __post_init__(self):
        if self.grid is None:
            if self.spec is None:
                raise ValueError("a grid is required when no operator spec is given")
            self.grid = self.spec.grid
        if self.spec is None and self.law is None:
            raise ValueError("need an operator spec or a law")

    def flux_of(self, G: np.ndarray) -> np.ndarray:
        return self.law.value(G) if self.law is not None else flux(self.spec, G)

    def tangent_of(self, G: np.ndarray) -> np.ndarray:
        return self.law.jacobian(G) if self.law is not None else tangent(self.spec, G)

    def slope_field(self) -> np.ndarray:
        grid = self.grid
        xi = np.zeros(grid.d) if self.xi is None else np.asarray(self.xi, dtype=float)
        return xi.reshape((grid.d,) + (1,) * grid.d)


def nonlinear_flux(problem: NonlinearProblem, u: np.ndarray) -> np.ndarray:
    q = problem.flux_of(problem.slope_field() + gradient(u, problem.grid))
    if problem.f is not None:
        q = q + problem.f
    return q


def nonlinear_residual(problem: NonlinearProblem, u: np.ndarray) -> np.ndarray:
    return -divergence(nonlinear_flux(problem, u), problem.grid)


def discrete_energy(problem: NonlinearProblem, u: np.ndarray) -> float:
    """``h^d sum W(x, xi + grad u) + f . grad u`` (scalar coefficients only)."""
    spec = problem.spec
    gu = gradient(u, spec.grid)
    e = energy_density(spec, problem.slope_field() + gu)
    if problem.f is not None:
        e = e + np.sum(problem.f * gu, axis=0)
    return float(np.sum(e) * spec.grid.cell_volume)


def solve_nonlinear(problem: NonlinearProblem) -> tuple[np.ndarray, SolveStats]:
    """Damped Newton with the analytic Jacobian and residual backtracking.

    The relative residual is measured against the residual of ``u = 0`` (floored
    at 1e-6 of the flux-divergence scale so that trivial problems stay well posed).
    """
    t0 = time.perf_counter()
    spec, grid = problem.spec, problem.grid
    stats = SolveStats(method="newton")
    zero = np.zeros(grid.shape)
    q0 = nonlinear_flux(problem, zero)
    r_zero = np.linalg.norm(nonlinear_residual(problem, zero))
    scale = max(r_zero, 1e-6 * np.linalg.norm(q0) / grid.h)
    if scale == 0.0:
        stats.wall_time = time.perf_counter() - t0
        return zero, stats
    use_energy = problem.law is None and spec.is_scalar
    u = zero if problem.u0 is None else np.array(problem.u0, dtype=float)
    u -= u.mean()
    q = nonlinear_flux(problem, u)
    r = -divergence(q, grid)
    rn = np.linalg.norm(r)
    E = discrete_energy(problem, u) if use_energy else None
    stats.history.append(rn / scale)
    if use_energy:
        stats.energies.append(E)
    # floor of the attainable relative residual in double precision
    floor = 64 * np.finfo(float).eps * np.linalg.norm(q) / grid.h / scale
    while rn / scale > problem.tol:
        if stats.iterations >= problem.max_newton:
            stats.wall_time = time.perf_counter() - t0
            stats.residual = rn / scale
            raise SolverError("Newton did not converge within max_newton", stats)
        J = problem.tangent_of(problem.slope_field() + gradient(u, grid))
        delta, lstats = solve_linear(J, q, grid, tol=problem.lin_tol, max_iter=problem.max_krylov)
        stats.linear_iterations.append(lstats.iterations)
        t = 1.0
        while True:
            u_new = u + t * delta
            q_new = nonlinear_flux(problem, u_new)
            r_new = -divergence(q_new, grid)
            rn_new = np.linalg.norm(r_new)
            ok = rn_new < (1 - 1e-4 * t) * rn
            if ok and use_energy:
                E_new = discrete_energy(problem, u_new)
                ok = E_new <= E + 1e-13 * abs(E)
            if ok:
                break
            t *= 0.5
            if t < 1e-4:
                break
        stats.iterations += 1
        if t < 1e-4:
            if rn / scale <= max(problem.tol, floor):
                break
            stats.wall_time = time.perf_counter() - t0
            stats.residual = rn / scale
            raise SolverError("Newton line search stagnated", stats)
        u, q, r, rn = u_new, q_new, r_new, rn_new
        if use_energy:
            E = E_new
            stats.energies.append(E)
        stats.steps.append(t)
        stats.history.append(rn / scale)
    u = u - u.mean()
    stats.residual = float(np.linalg.norm(nonlinear_residual(problem, u)) / scale)
    stats.wall_time = time.perf_counter() - t0
    return u, stats
