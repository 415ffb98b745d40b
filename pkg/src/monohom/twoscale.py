"""Two-scale expansion on the torus: partition of unity, heterogeneous and homogenized solves, error and remainder."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.interpolate import CubicSpline, RectBivariateSpline

from .corrector import flux_potential, solve_corrector, solve_flux_corrector
from .field import CoefficientRecipe, CovarianceSpec, SampleSeed
from .grid import Grid, divergence, gradient, make_grid
from .montecarlo import map_samples
from .operator import OperatorSpec, eval_a, eval_Da
from .solver import NonlinearProblem, SolverError, _inverse_laplacian, solve_nonlinear

log = logging.getLogger(__name__)


class TwoScaleError(ValueError):
    pass


# --- partition of unity --------------------------------------------------------


def smoothstep(t):
    """Quintic ``C^2`` step from 0 to 1 on [0, 1], with ``S(t) + S(1-t) = 1``."""
    t = np.clip(t, 0.0, 1.0)
    return t**3 * (10 - 15 * t + 6 * t**2)


def bump_1d(s, a: float):
    """1 on ``|s| <= a``, 0 on ``|s| >= 1-a``; translates by 1 sum to one."""
    return 1.0 - smoothstep((np.abs(s) - a) / (1 - 2 * a))


def plateau_width(d: int) -> float:
    # 1/(2d) leaves no transition room in d=1; a quarter keeps the bump C^2 there
    return 1 / (2 * d) if d > 1 else 0.25


@dataclass
class PartitionOfUnity:
    grid: Grid
    delta: float
    plateau: float
    centers: np.ndarray
    eta1: np.ndarray
    deta1: np.ndarray
    support: list
    c_low: float = 0.0
    C_grad: float = 0.0

    @property
    def count(self) -> int:
        return len(self.centers)

    def indices(self):
        return itertools.product(range(self.count), repeat=self.grid.d)

    def block(self, k):
        """Index tuple for ``np.ix_`` and ``(eta_k, grad eta_k)`` on the support block."""
        sup = [self.support[m] for m in k]
        ix = np.ix_(*sup)
        vals = [self.eta1[m][s] for m, s in zip(k, sup)]
        dvals = [self.deta1[m][s] for m, s in zip(k, sup)]
        eta = _outer(vals)
        grad = np.stack([_outer(vals[:i] + [dvals[i]] + vals[i + 1:]) for i in range(self.grid.d)])
        return ix, eta, grad

    def eta(self, k) -> np.ndarray:
        return _outer([self.eta1[m] for m in k])

    def grad_eta(self, k) -> np.ndarray:
        v = [self.eta1[m] for m in k]
        dv = [self.deta1[m] for m in k]
        return np.stack([_outer(v[:i] + [dv[i]] + v[i + 1:]) for i in range(self.grid.d)])

    def local_averages(self, G: np.ndarray) -> np.ndarray:
        """``xi_k = int eta_k G / int eta_k`` for every centre; shape ``(d,) + (M,)*d``."""
        d = self.grid.d
        letters = "xyz"[:d]
        caps = "abc"[:d]
        spec = ",".join(f"{c}{x}" for c, x in zip(caps, letters)) + f",{letters}->{caps}"
        mass1 = self.eta1.sum(axis=1)
        mass = _outer([mass1] * d)
        return np.stack([np.einsum(spec, *([self.eta1] * d), G[i]) / mass for i in range(d)])


def _outer(vecs):
    out = vecs[0]
    for v in vecs[1:]:
        out = np.multiply.outer(out, v)
    return out


def build_partition(grid: Grid, delta: float) -> PartitionOfUnity:
    """Tensor-product partition with centres on ``delta Z^d``; invariants measured on construction."""
    cells = delta / grid.h
    if abs(cells - round(cells)) > 1e-9:
        raise TwoScaleError("delta must be a multiple of the grid spacing")
    if round(cells) < 8:
        raise TwoScaleError(f"delta resolves to {cells:.3g} < 8 grid cells")
    if delta > grid.L / 4 + 1e-12:
        raise TwoScaleError("delta must not exceed L/4")
    M = grid.L / delta
    if abs(M - round(M)) > 1e-9:
        raise TwoScaleError("L must be a multiple of delta")
    M = int(round(M))
    d, N, h = grid.d, grid.N, grid.h
    a = plateau_width(d)
    x = (np.arange(N) - N // 2) * h
    start = np.ceil(-grid.L / 2 / delta - 1e-12) * delta
    centers = start + delta * np.arange(M)
    disp = (x[None, :] - centers[:, None] + grid.L / 2) % grid.L - grid.L / 2
    raw = bump_1d(disp / delta, a)
    eta1 = raw / raw.sum(axis=0, keepdims=True)
    deta1 = (np.roll(eta1, -1, axis=1) - eta1) / h
    support = [np.flatnonzero((eta1[m] != 0) | (deta1[m] != 0)) for m in range(M)]
    pou = PartitionOfUnity(grid, delta, a, centers, eta1, deta1, support)
    k0 = (int(np.argmin(np.abs(centers))),) * d
    eta0 = pou.eta(k0)
    dist = np.max(np.abs(grid.periodic_displacement(np.full(d, centers[k0[0]]))), axis=0)
    inner = dist <= a * delta + 1e-12
    pou.c_low = float(eta0[inner].min())
    pou.C_grad = float(max(np.sqrt(np.sum(pou.grad_eta(k0) ** 2, axis=0)).max(), 0.0) * delta)
    return pou


# --- maps for the homogenized problem ---------------------------------------------


@dataclass
class ExactMap:
    """Homogenized map of a constant coefficient: ``abar = a``."""

    M: np.ndarray
    p: float

    def value(self, G):
        return eval_a(self.M, G, self.p)

    def jacobian(self, G):
        return eval_Da(self.M, G, self.p)


def _shape_factor(G, p):
    n = np.sqrt(np.sum(G**2, axis=0))
    w = 1 + n ** (p - 2)
    with np.errstate(invalid="ignore", divide="ignore"):
        # gradient of |xi|^(p-2): (p-2) |xi|^(p-4) xi, zero at the origin
        dw = np.where(n > 0, (p - 2) * n ** (p - 4) * G, 0.0) if p != 2 else np.zeros_like(G)
    return w, dw


@dataclass
class LineTable:
    """First component of ``abar(t e_1)`` for 1-D macroscopic problems.

    Stores ``psi(t) = abar_1(t e_1) / (1 + |t|^(p-2))`` as a cubic spline; the
    division removes most of the non-smoothness at ``t = 0``.
    """

    ts: np.ndarray
    values: np.ndarray
    p: float
    _spline: CubicSpline = field(init=False, repr=False)

    def __post_init__(self):
        w = 1 + np.abs(self.ts) ** (self.p - 2)
        self._spline = CubicSpline(self.ts, self.values / w)

    @property
    def t_max(self) -> float:
        return float(min(-self.ts[0], self.ts[-1]))

    def value(self, G):
        t = G[0]
        return (self._spline(t) * (1 + np.abs(t) ** (self.p - 2)))[None]

    def jacobian(self, G):
        t = G[0]
        w = 1 + np.abs(t) ** (self.p - 2)
        dw = (self.p - 2) * np.abs(t) ** (self.p - 3) * np.sign(t) if self.p != 2 else 0.0
        return (self._spline(t, 1) * w + self._spline(t) * dw)[None, None]

    def in_range(self, G) -> bool:
        return bool(np.abs(G[0]).max() <= self.t_max)


@dataclass
class RadialTable:
    """Isotropic map ``abar(xi) = g(|xi|) xi/|xi|`` with ``g`` a line table of ``abar_1(t e_1)``."""

    line: LineTable

    @property
    def t_max(self) -> float:
        return self.line.t_max

    def _g(self, n):
        return self.line.value(n[None])[0], self.line.jacobian(n[None])[0, 0]

    def value(self, G):
        n = np.sqrt(np.sum(G**2, axis=0))
        g, dg = self._g(n)
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = np.where(n > 0, g / n, dg)
        return ratio * G

    def jacobian(self, G):
        d = G.shape[0]
        n = np.sqrt(np.sum(G**2, axis=0))
        g, dg = self._g(n)
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = np.where(n > 0, g / n, dg)
            xh = np.where(n > 0, G / np.where(n > 0, n, 1.0), 0.0)
        eye = np.eye(d).reshape((d, d) + (1,) * (G.ndim - 1))
        return ratio * eye + (dg - ratio) * np.einsum("i...,j...->ij...", xh, xh)

    def in_range(self, G) -> bool:
        return bool(np.sqrt(np.sum(G**2, axis=0)).max() <= self.t_max)


@dataclass
class GridTable:
    """``abar`` on a tensor grid in d=2, interpolated by bicubic splines of ``abar / (1+|xi|^(p-2))``."""

    axis: np.ndarray
    values: np.ndarray  # (2, n, n)
    p: float
    _splines: list = field(init=False, repr=False)

    def __post_init__(self):
        X, Y = np.meshgrid(self.axis, self.axis, indexing="ij")
        w, _ = _shape_factor(np.stack([X, Y]), self.p)
        self._splines = [RectBivariateSpline(self.axis, self.axis, self.values[i] / w, s=0) for i in range(2)]

    @property
    def t_max(self) -> float:
        return float(min(-self.axis[0], self.axis[-1]))

    def _psi(self, G, dx=0, dy=0):
        return np.stack([s.ev(G[0], G[1], dx=dx, dy=dy) for s in self._splines])

    def value(self, G):
        w, _ = _shape_factor(G, self.p)
        return self._psi(G) * w

    def jacobian(self, G):
        w, dw = _shape_factor(G, self.p)
        psi = self._psi(G)
        J = np.stack([self._psi(G, dx=1), self._psi(G, dy=1)], axis=1) * w
        return J + psi[:, None] * dw[None, :]

    def in_range(self, G) -> bool:
        return bool(np.abs(G).max() <= self.t_max)


def cell_coefficient(A: np.ndarray, grid: Grid, epsilon: float) -> tuple[Grid, np.ndarray]:
    """Periodicity cell of an ``epsilon``-periodic field sampled on ``grid`` (first ``n`` points per axis)."""
    n = epsilon / grid.h
    if abs(n - round(n)) > 1e-9 or grid.N % round(n):
        raise TwoScaleError("epsilon must be a multiple of h dividing N h")
    n = int(round(n))
    cell = make_grid(grid.d, epsilon, n)
    sl = (slice(None), slice(None)) + (slice(0, n),) * grid.d
    return cell, np.ascontiguousarray(A[sl])


def line_bound(lam: float, p: float, F_max: float) -> float:
    """``T`` with ``lam (T + T^(p-1)) = 2 F_max``: bounds ``|grad ubar|`` for 1-D data."""
    lo, hi = 0.0, 1.0
    while lam * (hi + hi ** (p - 1)) < 2 * F_max:
        hi *= 2
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if lam * (mid + mid ** (p - 1)) < 2 * F_max:
            lo = mid
        else:
            hi = mid
    return hi


def tabulate_line(spec: OperatorSpec, t_max: float, count: int = 13, tol: float = 1e-11) -> LineTable:
    """``abar_1(t e_1)`` on ``[-t_max, t_max]`` by corrector solves; oddness halves the work."""
    ts = np.linspace(0.0, t_max, count)
    e = np.eye(spec.grid.d)[0]
    vals, prev = [], None
    for t in ts:
        b = solve_corrector(spec, t * e, tol=tol, u0=prev)
        prev = b.phi
        vals.append(b.abar[0])
    vals = np.array(vals)
    return LineTable(np.concatenate([-ts[:0:-1], ts]), np.concatenate([-vals[:0:-1], vals]), spec.p)


def tabulate_grid(spec: OperatorSpec, t_max: float, count: int = 21, tol: float = 1e-11) -> GridTable:
    """``abar`` on ``[-t_max, t_max]^2`` (d=2) by corrector solves; ``abar(-xi) = -abar(xi)`` halves the work."""
    if spec.grid.d != 2:
        raise TwoScaleError("grid tabulation is implemented for d=2")
    axis = np.linspace(-t_max, t_max, count)
    vals = np.zeros((2, count, count))
    done = np.zeros((count, count), dtype=bool)
    for i in range(count):
        prev = None
        for j in range(count):
            if done[i, j]:
                continue
            b = solve_corrector(spec, np.array([axis[i], axis[j]]), tol=tol, u0=prev)
            prev = b.phi
            vals[:, i, j] = b.abar
            vals[:, count - 1 - i, count - 1 - j] = -b.abar
            done[i, j] = done[count - 1 - i, count - 1 - j] = True
    return GridTable(axis, vals, spec.p)


# --- solves ------------------------------------------------------------------------


def solve_heterogeneous(spec: OperatorSpec, f: np.ndarray, tol: float = 1e-10, u0=None):
    """``-div a(x, grad u) = div f`` on the torus (zero-mean ``u``)."""
    return solve_nonlinear(NonlinearProblem(spec, f=f, tol=tol, u0=u0))


def solve_homogenized(law, f: np.ndarray, grid: Grid, tol: float = 1e-10, retabulate: Callable | None = None):
    """Newton for ``-div abar(grad u) = div f`` with a tabulated (or exact) ``abar``.

    When the gradient leaves the table, ``retabulate(t_needed)`` is called once
    for a wider table; a second exit fails.
    """
    for attempt in range(2):
        u, stats = solve_nonlinear(NonlinearProblem(None, f=f, tol=tol, law=law, grid=grid))
        G = gradient(u, grid)
        if not hasattr(law, "in_range") or law.in_range(G):
            return u, stats, law
        if retabulate is None or attempt == 1:
            raise SolverError("homogenized gradient left the tabulated range", stats)
        law = retabulate(1.5 * float(np.abs(G).max()))
    raise AssertionError("unreachable")


# --- corrector library and expansion ---------------------------------------------------


@dataclass
class CorrectorEntry:
    xi: np.ndarray
    phi: np.ndarray
    grad: np.ndarray
    sigma: np.ndarray
    abar: np.ndarray


class CorrectorLibrary:
    """Physical-scale correctors keyed by slope.

    ``cell`` mode solves on one periodicity cell (arrays of ``n`` points per axis,
    tiled by index arithmetic); ``torus`` mode solves on the full torus. Keys
    round slopes to ``resolution``; the default is far below solver tolerance.
    """

    def __init__(self, spec: OperatorSpec, cell: int | None = None, tol: float = 1e-10,
                 resolution: float = 1e-11):
        self.spec, self.cell, self.tol, self.resolution = spec, cell, tol, resolution
        self.entries: dict = {}
        self.solves = 0
        self._prev = None

    def key(self, xi) -> tuple:
        return tuple(np.round(np.asarray(xi, dtype=float) / self.resolution).astype(np.int64).tolist())

    def get(self, xi) -> CorrectorEntry:
        k = self.key(xi)
        if k not in self.entries:
            xi_q = np.array(k, dtype=float) * self.resolution
            b = solve_corrector(self.spec, xi_q, tol=self.tol, u0=self._prev)
            self._prev = b.phi
            if self.spec.grid.d > 1:
                sigma, _ = flux_potential(b.q, self.spec.grid)
            else:
                sigma = np.zeros((1, 1) + self.spec.grid.shape)
            self.entries[k] = CorrectorEntry(xi_q, b.phi, b.grad_phi, sigma, b.abar)
            self.solves += 1
        return self.entries[k]

    def take(self, arr: np.ndarray, support: list) -> np.ndarray:
        """Values of a (possibly cell-sized) field on the block ``np.ix_(*support)``."""
        if self.cell is None:
            return arr[(...,) + np.ix_(*support)]
        return arr[(...,) + np.ix_(*[s % self.cell for s in support])]


@dataclass
class TwoScaleField:
    epsilon: float
    delta: float
    ubar: np.ndarray
    xi_k: np.ndarray
    u2s: np.ndarray
    grad_u2s: np.ndarray
    corrector_sum: np.ndarray
    grad_assembled: np.ndarray
    slope: np.ndarray | None = None

    def macro_gradient(self, grid: Grid) -> np.ndarray:
        G = gradient(self.ubar, grid)
        if self.slope is not None:
            G = G + np.asarray(self.slope, dtype=float).reshape((grid.d,) + (1,) * grid.d)
        return G


def _block_support(pou: PartitionOfUnity, k):
    return [pou.support[m] for m in k]


def two_scale_expand(ubar: np.ndarray, pou: PartitionOfUnity, library: CorrectorLibrary,
                     epsilon: float, slope=None) -> TwoScaleField:
    """``u2s = ubar + sum_k eta_k Phi_{xi_k}`` with physical-scale correctors ``Phi``.

    ``slope`` adds an affine part ``slope . x`` to ``ubar`` (not stored in the
    periodic arrays, but included in every gradient).
    """
    grid = pou.grid
    G = gradient(ubar, grid)
    if slope is not None:
        G = G + np.asarray(slope, dtype=float).reshape((grid.d,) + (1,) * grid.d)
    xi_k = pou.local_averages(G)
    extra = np.zeros(grid.shape)
    grad_extra = np.zeros((grid.d,) + grid.shape)
    for k in pou.indices():
        entry = library.get(xi_k[(slice(None),) + k])
        sup = _block_support(pou, k)
        ix, eta, geta = pou.block(k)
        phi = library.take(entry.phi, sup)
        gphi = library.take(entry.grad, sup)
        extra[ix] += eta * phi
        grad_extra[(slice(None),) + ix] += eta * gphi + phi * geta
    u2s = ubar + extra
    grad_u2s = gradient(u2s, grid) + (G - gradient(ubar, grid))
    return TwoScaleField(epsilon, pou.delta, ubar, xi_k, u2s, grad_u2s, extra, G + grad_extra,
                         None if slope is None else np.asarray(slope, dtype=float))


def expansion_error(u_eps: np.ndarray, ts: TwoScaleField, grid: Grid, p: float) -> dict:
    """L^2 and L^p norms of ``grad u_eps - grad u2s`` on the torus.

    ``u_eps`` is the periodic part; it shares the affine slope of ``ts``.
    """
    if u_eps.shape != ts.u2s.shape or u_eps.shape != grid.shape:
        raise TwoScaleError("grid mismatch")
    grad_eps = gradient(u_eps, grid) + (ts.macro_gradient(grid) - gradient(ts.ubar, grid))
    diff = grad_eps - ts.grad_u2s
    n = np.sqrt(np.sum(diff**2, axis=0))
    dv = grid.cell_volume
    ref = np.sqrt(np.sum(grad_eps**2) * dv)
    return {
        "err_L2": float(np.sqrt(np.sum(n**2) * dv)),
        "err_Lp": float((np.sum(n**p) * dv) ** (1 / p)),
        "err_Lp_p": float(np.sum(n**p) * dv),
        "rel_L2": float(np.sqrt(np.sum(n**2) * dv) / ref) if ref > 0 else 0.0,
    }


def gradient_projection(F: np.ndarray, grid: Grid) -> np.ndarray:
    """``L^2`` projection of a vector field onto discrete gradients."""
    r = -divergence(F, grid)
    return gradient(_inverse_laplacian(r - r.mean(), grid), grid)


TERM_NAMES = ("abar_mismatch", "flux_corrector", "slope_mismatch", "interpolation", "cutoff_gradient")


def remainder_assembly(ts: TwoScaleField, pou: PartitionOfUnity, library: CorrectorLibrary,
                       spec: OperatorSpec, law) -> dict:
    """The five remainder terms of the two-scale error equation, and their norms.

    Also returns ``R_flux = a(x, grad u2s) - abar(grad ubar)``, which drives the
    discrete error equation exactly, and the norm of its gradient part.
    """
    grid, p = pou.grid, spec.p
    d = grid.d
    G = ts.macro_gradient(grid)
    aG = law.value(G)
    sum_abar = np.zeros((d,) + grid.shape)
    T2 = np.zeros((d,) + grid.shape)
    T3 = np.zeros((d,) + grid.shape)
    S = np.zeros((d,) + grid.shape)
    P = np.zeros((d,) + grid.shape)
    mix = np.zeros((d,) + grid.shape)
    for k in pou.indices():
        entry = library.get(ts.xi_k[(slice(None),) + k])
        sup = _block_support(pou, k)
        ix, eta, geta = pou.block(k)
        blk = (slice(None),) + ix
        A_b = spec.A[(slice(None), slice(None)) + ix]
        gphi = library.take(entry.grad, sup)
        phi = library.take(entry.phi, sup)
        sig = library.take(entry.sigma, sup)
        xi = entry.xi.reshape((d,) + (1,) * d)
        sum_abar[blk] += eta * entry.abar.reshape((d,) + (1,) * d)
        T2[blk] -= np.einsum("ij...,j...->i...", sig, geta)
        a_loc = eval_a(A_b, G[blk] + gphi, p)
        T3[blk] += eta * (a_loc - eval_a(A_b, xi + gphi, p))
        mix[blk] += eta * a_loc
        S[blk] += eta * gphi
        P[blk] += phi * geta
    T1 = sum_abar - aG
    aS = eval_a(spec.A, G + S, p)
    T4 = aS - mix
    T5 = eval_a(spec.A, G + S + P, p) - aS
    terms = dict(zip(TERM_NAMES, (T1, T2, T3, T4, T5)))
    R = T1 + T2 + T3 + T4 + T5
    R_flux = eval_a(spec.A, ts.grad_u2s, p) - aG
    dv = grid.cell_volume

    def l2(F):
        return float(np.sqrt(np.sum(F**2) * dv))

    PR_flux = gradient_projection(R_flux, grid)
    PR = gradient_projection(R, grid)
    return {
        "terms": terms,
        "term_norms": {k: l2(v) for k, v in terms.items()},
        "R": R,
        "R_L2": l2(R),
        "R_flux_L2": l2(R_flux),
        "PR_flux_L2": l2(PR_flux),
        "projection_gap": l2(PR - PR_flux) / max(l2(PR_flux), 1e-300),
    }


def energy_estimate(u_eps, ts: TwoScaleField, grid: Grid, p: float, lam: float, R_L2: float) -> dict:
    """Both sides of ``||grad w||_2^2 + ||grad w||_p^p <= C ||R||_2^2`` with ``C = max(1, 2^(p-3)) / lam^2``."""
    err = expansion_error(u_eps, ts, grid, p)
    lhs = err["err_L2"] ** 2 + err["err_Lp_p"]
    C = max(1.0, 2.0 ** (p - 3)) / lam**2
    return {"lhs": lhs, "rhs": C * R_L2**2, "C": C, "holds": bool(lhs <= C * R_L2**2 * (1 + 1e-8) + 1e-28)}


# --- rate study ---------------------------------------------------------------------


def periodic_profile(lam: float) -> Callable[[np.ndarray], np.ndarray]:
    """Scalar 1-periodic coefficient with range ``[lam, 1]`` (unit cell)."""
    mid, amp = 0.5 * (1 + lam), 0.5 * (1 - lam)

    def b(y):
        y1 = y[0]
        y2 = y[1] if len(y) > 1 else 0.0 * y1
        return mid + amp * (2 * np.sin(2 * np.pi * y1) + np.cos(2 * np.pi * (y1 + 2 * y2))) / 3

    return b


def macro_data(grid: Grid, kind: str, amplitude: float = 1.0, period: float = 1.0) -> np.ndarray:
    """Smooth two-mode divergence-form data of the given period (the torus length must be a multiple).

    ``kind='full'`` varies in every direction (d=2); ``kind='line'`` depends on
    ``x_1`` only and points along ``e_1``.
    """
    x = grid.coords()
    L = period
    if abs(grid.L / L - round(grid.L / L)) > 1e-9:
        raise TwoScaleError("torus length must be a multiple of the data period")
    f = np.zeros((grid.d,) + grid.shape)
    if kind == "line":
        f[0] = amplitude * (np.sin(2 * np.pi * x[0] / L) + 0.5 * np.cos(4 * np.pi * x[0] / L))
    elif kind == "full":
        if grid.d < 2:
            raise TwoScaleError("full macro data needs d >= 2")
        f[0] = amplitude * np.sin(2 * np.pi * x[0] / L)
        f[1] = 0.5 * amplitude * np.sin(2 * np.pi * (x[0] + x[1]) / L)
    else:
        raise TwoScaleError(f"unknown macro data kind {kind!r}")
    return f


@dataclass
class RateRow:
    epsilon: float
    delta: float
    sample: int
    err_L2: float
    err_Lp: float
    remainder_L2: float
    rel_L2: float
    corrector_solves: int
    energy_holds: bool


@dataclass
class RateReport:
    mode: str
    rows: list
    slope: float | None
    remainder_slope: float | None
    mean_errors: dict


def _fit(eps, vals):
    eps, vals = np.asarray(eps), np.asarray(vals)
    if np.any(vals <= 0) or len(eps) < 2:
        return None
    return float(np.polyfit(np.log(eps), np.log(vals), 1)[0])


def single_scale_run(mode: str, epsilon: float, grid: Grid, p: float, lam: float, sample: int = 0,
                     seed: int = 0, amplitude: float = 1.0, tol: float = 1e-10, table_count: int | None = None,
                     with_remainder: bool = True) -> tuple[RateRow, dict]:
    """One ``(epsilon, sample)`` point of a rate study.

    Modes: ``periodic`` (cell correctors, 2-D table), ``random`` (Gaussian
    coefficient with ``ell_c = epsilon``; ``x_1``-only data so slopes vary along
    one axis; the sample's own ``abar_L`` closes the macroscopic problem) and
    ``constant`` (control run).
    """
    d = grid.d
    if epsilon / grid.h < 8 - 1e-9:
        raise TwoScaleError("the microscale must be resolved by >= 8 grid cells")
    extras: dict = {}
    if mode == "constant":
        b = 0.5 * (1 + lam)
        A = b * np.broadcast_to(np.eye(d).reshape((d, d) + (1,) * d), (d, d) + grid.shape).copy()
        spec = OperatorSpec(p, lam, A, grid)
        f = macro_data(grid, "full" if d >= 2 else "line", amplitude)
        law = ExactMap(b * np.eye(d), p)
        ubar, _, _ = solve_homogenized(law, f, grid, tol=tol)
        library = CorrectorLibrary(spec, cell=None, tol=tol)
    elif mode == "periodic":
        prof = periodic_profile(lam)
        bfield = prof(grid.coords() / epsilon)
        A = bfield[None, None] * np.eye(d).reshape((d, d) + (1,) * d)
        spec = OperatorSpec(p, lam, A, grid)
        cell_grid, A_cell = cell_coefficient(A, grid, epsilon)
        cell_spec = OperatorSpec(p, lam, A_cell, cell_grid)
        if d == 2:
            f = macro_data(grid, "full", amplitude)
            count = table_count or 21

            def tab(t):
                return tabulate_grid(cell_spec, t, count, tol=min(tol, 1e-11))

            t0 = line_bound(lam, p, float(np.abs(f).max()) * np.sqrt(d))
        else:
            f = macro_data(grid, "line", amplitude)
            count = table_count or 25

            def tab(t):
                return tabulate_line(cell_spec, t, count, tol=min(tol, 1e-11))

            t0 = line_bound(lam, p, float(np.abs(f).max()))
        law = tab(0.6 * t0)
        ubar, _, law = solve_homogenized(law, f, grid, tol=tol, retabulate=tab)
        library = CorrectorLibrary(cell_spec, cell=cell_grid.N, tol=tol)
    elif mode == "random":
        rec = CoefficientRecipe(CovarianceSpec(ell_c=epsilon), lam=lam)
        A = rec.sample(grid, SampleSeed(seed, sample))
        spec = OperatorSpec(p, lam, A, grid)
        f = macro_data(grid, "line", amplitude)
        t0 = line_bound(lam, p, float(np.abs(f).max()))
        law = tabulate_line(spec, t0, table_count or 13, tol=min(tol, 1e-11))
        g1 = make_grid(1, grid.L, grid.N)
        f1 = f[0][(slice(None),) + (0,) * (d - 1)][None]
        u1, _, law = solve_homogenized(law, f1, g1, tol=tol)
        ubar = np.broadcast_to(u1.reshape((grid.N,) + (1,) * (d - 1)), grid.shape).copy()
        library = CorrectorLibrary(spec, cell=None, tol=tol)
    else:
        raise TwoScaleError(f"unknown mode {mode!r}")

    u_eps, _ = solve_heterogeneous(spec, f, tol=tol)
    pou = build_partition(grid, epsilon)
    ts = two_scale_expand(ubar, pou, library, epsilon)
    err = expansion_error(u_eps, ts, grid, p)
    R_L2, holds = float("nan"), True
    if with_remainder:
        law_full = law if mode != "random" else _LineLawOnGrid(law)
        rem = remainder_assembly(ts, pou, library, spec, law_full)
        R_L2 = rem["R_L2"]
        est = energy_estimate(u_eps, ts, grid, p, lam, rem["PR_flux_L2"])
        holds = est["holds"]
        extras.update(remainder=rem["term_norms"], projection_gap=rem["projection_gap"], energy=est)
    extras.update(u_eps=u_eps, two_scale=ts, partition=pou, library=library, spec=spec, law=law, f=f)
    row = RateRow(epsilon, pou.delta, sample, err["err_L2"], err["err_Lp"], R_L2, err["rel_L2"],
                  library.solves, holds)
    return row, extras


@dataclass
class _LineLawOnGrid:
    """Lift of a 1-D line table to d dimensions for slopes along ``e_1``."""

    table: LineTable

    def value(self, G):
        out = np.zeros_like(G)
        out[0] = self.table.value(G[:1])[0]
        return out

    def jacobian(self, G):
        d = G.shape[0]
        J = np.zeros((d, d) + G.shape[1:])
        J[0, 0] = self.table.jacobian(G[:1])[0, 0]
        return J


def rate_study(mode: str, epsilons, d: int = 2, p: float = 3.0, lam: float = 0.25, N: int = 256,
               sample_count: int = 1, seed: int = 0, amplitude: float = 1.0, tol: float = 1e-10,
               with_remainder: bool = True, torus: float = 1.0, threads: int | None = 1) -> RateReport:
    """Expansion error against ``epsilon`` (``delta = epsilon``); data have period 1, the torus has length ``torus``."""
    grid = make_grid(d, torus, N)
    for eps in epsilons:
        if eps / grid.h < 8 - 1e-9:
            raise TwoScaleError(f"epsilon = {eps} is resolved by fewer than 8 grid cells")
    jobs =[(eps, s) for eps in epsilons for s in range(sample_count if mode == "random" else 1)]

    def one(i):
        eps, s = jobs[i]
        row, _ = single_scale_run(mode, eps, grid, p, lam, sample=s, seed=seed, amplitude=amplitude,
                                  tol=tol, with_remainder=with_remainder)
        log.info("two-scale %s eps=%g sample=%d err=%.3e", mode, eps, s, row.err_L2)
        return row

    rows = map_samples(one, range(len(jobs)), threads)
    eps_list = list(epsilons)
    mean_err = {e: float(np.mean([r.err_L2 for r in rows if r.epsilon == e])) for e in eps_list}
    mean_rem = [float(np.mean([r.remainder_L2 for r in rows if r.epsilon == e])) for e in eps_list]
    slope = _fit(eps_list, [mean_err[e] for e in eps_list])
    rslope = _fit(eps_list, mean_rem) if with_remainder else None
    return RateReport(mode, rows, slope, rslope, mean_err)
