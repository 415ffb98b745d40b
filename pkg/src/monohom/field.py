"""Stationary Gaussian coefficient fields on the torus by periodization in law.

The covariance is periodized by a lattice sum, sampled by circulant (spectral)
synthesis from counter-based white noise, pushed through a pointwise map B and
smoothed with a compactly supported kernel: A = chi * B(G).
"""

from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .grid import Grid

log = logging.getLogger(__name__)

_TRUNCATION = 1e-14
_MAX_PERIODS = 5
_ADMISSIBILITY_TOL = 1e-10


class CoefficientError(ValueError):
    pass


class SampleSeed(NamedTuple):
    root: int
    index: int = 0

    def generator(self) -> np.random.Generator:
        """Philox stream keyed by (root, index); the counter walks lattice order."""
        root = int(self.root) % 2**64
        index = int(self.index) % 2**64
        return np.random.Generator(np.random.Philox(key=root + (index << 64)))


def gaussian_covariance(ell_c: float) -> Callable[[np.ndarray], np.ndarray]:
    return lambda r: np.exp(-0.5 * (np.asarray(r) / ell_c) ** 2)


@dataclass(frozen=True)
class CovarianceSpec:
    ell_c: float
    c: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if not self.ell_c > 0:
            raise CoefficientError("correlation length must be positive")
        if self.c is None:
            object.__setattr__(self, "c", gaussian_covariance(self.ell_c))

    def __call__(self, r):
        return np.asarray(self.c(np.asarray(r, dtype=float)), dtype=float)


def lattice_sum(spec: CovarianceSpec, L: float, points: np.ndarray) -> np.ndarray:
    """``sum_k c(x + L k)`` at ``points`` (shape ``(d,) + any``).

    Shells of images ``max|k| = m`` are added until a whole shell contributes
    less than 1e-14 c(0).
    """
    points = np.asarray(points, dtype=float)
    d = points.shape[0]
    c0 = float(spec(0.0))
    out = np.zeros(points.shape[1:])
    thresh = _TRUNCATION * abs(c0)
    expand = (d,) + (1,) * (points.ndim - 1)
    for m in range(_MAX_PERIODS + 1):
        shell_max = 0.0
        for k in itertools.product(range(-m, m + 1), repeat=d):
            if max(abs(i) for i in k) != m:
                continue
            shift = np.asarray(k, dtype=float).reshape(expand) * L
            vals = spec(np.sqrt(np.sum((points + shift) ** 2, axis=0)))
            out += vals
            shell_max = max(shell_max, float(np.max(np.abs(vals))))
        if m >= 1 and shell_max <= thresh:
            return out
    raise CoefficientError(
        f"covariance lattice sum did not truncate within {_MAX_PERIODS} periods"
    )


def periodized_covariance(spec: CovarianceSpec, grid: Grid) -> np.ndarray:
    """Periodized covariance ``c_L`` sampled on the grid (origin at index N/2)."""
    return lattice_sum(spec, grid.L, grid.coords())


def covariance_spectrum(c_L: np.ndarray, grid: Grid) -> tuple[np.ndarray, float]:
    """Eigenvalues of the circulant covariance, negatives clipped; returns (spectrum, clipped fraction)."""
    lam = np.real(np.fft.fftn(np.fft.ifftshift(c_L)))
    total = np.sum(np.abs(lam))
    neg = -np.sum(lam[lam < 0])
    frac = float(neg / total) if total > 0 else 0.0
    if frac > 1e-8:
        warnings.warn(f"clipped negative spectral mass fraction {frac:.3e}", RuntimeWarning)
    return np.clip(lam, 0.0, None), frac


def white_noise(grid: Grid, seed: SampleSeed) -> np.ndarray:
    return seed.generator().standard_normal(grid.shape)


def sample_gaussian(
    c_L: np.ndarray, grid: Grid, seed: SampleSeed, noise: np.ndarray | None = None
) -> np.ndarray:
    """Centered stationary Gaussian field with circulant covariance ``c_L``.

    ``G = C^{1/2} W`` with W white noise; the FFT of a real field is Hermitian,
    so G is real up to roundoff.
    """
    spectrum, _ = covariance_spectrum(c_L, grid)
    if not spectrum.any():
        return np.zeros(grid.shape)
    if noise is None:
        noise = white_noise(grid, seed)
    return np.real(np.fft.ifftn(np.sqrt(spectrum) * np.fft.fftn(noise)))


def coupled_pair(
    spec: CovarianceSpec, grid_1: Grid, grid_2: Grid, seed: SampleSeed
) -> tuple[np.ndarray, np.ndarray]:
    """Two periodized fields on nested tori driven by one white-noise stream.

    The noise on the small torus is the centered window of the noise on the
    large one, so both fields agree away from the small torus' boundary.
    """
    if grid_1.d != grid_2.d or not np.isclose(grid_1.h, grid_2.h, rtol=1e-12):
        raise CoefficientError("coupled grids must share dimension and spacing")
    if grid_2.N < grid_1.N:
        raise CoefficientError("second grid must be the larger torus")
    w2 = white_noise(grid_2, seed)
    lo = (grid_2.N - grid_1.N) // 2
    w1 = w2[(slice(lo, lo + grid_1.N),) * grid_1.d]
    g1 = sample_gaussian(periodized_covariance(spec, grid_1), grid_1, seed, noise=w1)
    g2 = sample_gaussian(periodized_covariance(spec, grid_2), grid_2, seed, noise=w2)
    return g1, g2


def window(f: np.ndarray, big: Grid, small: Grid) -> np.ndarray:
    """Restriction of a field on ``big`` to the centered copy of ``small``."""
    lo = (big.N - small.N) // 2
    return f[(Ellipsis,) + (slice(lo, lo + small.N),) * big.d]


# --- pointwise maps B -------------------------------------------------------


def tanh_profile(lam: float) -> Callable[[np.ndarray], np.ndarray]:
    """Scalar profile with range (lam, 1): ``(1+lam)/2 + (1-lam)/2 tanh(t)``."""
    return lambda t: 0.5 * (1 + lam) + 0.5 * (1 - lam) * np.tanh(t)


def skew_profile(lam: float, d: int) -> Callable[[np.ndarray], np.ndarray]:
    """Non-symmetric matrix profile ``b(t) Id + s(t) J`` with ``J`` the rotation generator
    of the (1, 2) plane, ``b`` in (lam, 0.8) and ``|s| < 0.5``, so ``|B x| <= |x|``."""
    if d < 2:
        raise CoefficientError("a skew profile needs d >= 2")
    J = np.zeros((d, d))
    J[0, 1], J[1, 0] = 1.0, -1.0

    def B(t):
        b = 0.5 * (0.8 + lam) + 0.5 * (0.8 - lam) * np.tanh(t)
        s = 0.5 * np.tanh(0.5 * t)
        return np.eye(d)[(...,) + (None,) * t.ndim] * b + J[(...,) + (None,) * t.ndim] * s

    return B


def tabulated_profile(ts, values) -> Callable[[np.ndarray], np.ndarray]:
    ts = np.asarray(ts, dtype=float)
    values = np.asarray(values, dtype=float)
    return lambda t: np.interp(t, ts, values)


def bump_kernel(grid: Grid, radius_cells: float = 2.0) -> np.ndarray:
    """Polynomial bump ``(1 - (|x|/rho)^2)^2`` with ``rho = radius_cells * h``, unit integral, FFT layout."""
    rho = radius_cells * grid.h
    r = grid.offset_distance
    k = np.where(r < rho, (1 - (r / rho) ** 2) ** 2, 0.0)
    return k / (k.sum() * grid.cell_volume)


@dataclass
class CoefficientRecipe:
    """Recipe ``A = chi * B(G)`` for a Gaussian field G with the given covariance.

    ``B`` maps a scalar array to a scalar profile (isotropic, ``B(t) = b(t) Id``)
    when ``isotropic`` is set, otherwise to a matrix array of shape ``(d, d) + t.shape``.
    """

    covariance: CovarianceSpec
    lam: float
    B: Callable[[np.ndarray], np.ndarray] | None = None
    kernel_radius_cells: float = 2.0
    isotropic: bool = True
    _cov_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not 0 < self.lam <= 1:
            raise CoefficientError(f"ellipticity must lie in (0, 1], got {self.lam}")
        if self.B is None:
            self.B = tanh_profile(self.lam)

    def covariance_on(self, grid: Grid) -> np.ndarray:
        key = (grid.d, grid.L, grid.N)
        if key not in self._cov_cache:
            self._cov_cache[key] = periodized_covariance(self.covariance, grid)
        return self._cov_cache[key]

    def gaussian(self, grid: Grid, seed: SampleSeed) -> np.ndarray:
        return sample_gaussian(self.covariance_on(grid), grid, seed)

    def sample(self, grid: Grid, seed: SampleSeed) -> np.ndarray:
        return make_coefficient(self.gaussian(grid, seed), grid, self)


def _convolve(f: np.ndarray, khat: np.ndarray, grid: Grid) -> np.ndarray:
    axes = tuple(range(-grid.d, 0))
    return np.fft.irfftn(np.fft.rfftn(f, axes=axes) * khat, s=grid.shape, axes=axes)


def make_coefficient(G: np.ndarray, grid: Grid, recipe: CoefficientRecipe) -> np.ndarray:
    """Matrix field ``chi * B(G)``, validated against the ellipticity sandwich."""
    if recipe.kernel_radius_cells < 2:
        raise CoefficientError("kernel support must span at least two cells")
    kernel = bump_kernel(grid, recipe.kernel_radius_cells)
    khat = np.fft.rfftn(kernel) * grid.cell_volume
    d = grid.d
    if recipe.isotropic:
        b = _convolve(np.asarray(recipe.B(G), dtype=float), khat, grid)
        A = np.zeros((d, d) + grid.shape)
        for i in range(d):
            A[i, i] = b
    else:
        A = _convolve(np.asarray(recipe.B(G), dtype=float), khat, grid)
    check_admissible(A, recipe.lam)
    return A


def check_admissible(A: np.ndarray, lam: float, tol: float = _ADMISSIBILITY_TOL) -> None:
    """Raise unless ``lam |x|^2 <= x.A x`` and ``|A x| <= |x|`` at every lattice point."""
    d = A.shape[0]
    M = np.moveaxis(A.reshape(d, d, -1), -1, 0)
    sym = 0.5 * (M + np.transpose(M, (0, 2, 1)))
    ev = np.linalg.eigvalsh(sym)
    sv = np.linalg.svd(M, compute_uv=False)
    if ev.min() < lam - tol or sv.max() > 1 + tol:
        raise CoefficientError(
            f"coefficient violates ellipticity: min sym eig {ev.min():.6g} (lam={lam}),"
            f" max singular value {sv.max():.6g}"
        )


@dataclass
class ConstantRecipe:
    """Deterministic constant coefficient ``A = M``."""

    M: np.ndarray
    lam: float | None = None
    isotropic: bool = False

    def __post_init__(self):
        self.M = np.atleast_2d(np.asarray(self.M, dtype=float))
        if self.lam is None:
            sym = 0.5 * (self.M + self.M.T)
            self.lam = float(np.linalg.eigvalsh(sym).min())
        d = self.M.shape[0]
        self.isotropic = bool(np.allclose(self.M, self.M[0, 0] * np.eye(d), rtol=0, atol=0))

    def sample(self, grid: Grid, seed: SampleSeed | None = None) -> np.ndarray:
        if self.M.shape != (grid.d, grid.d):
            raise CoefficientError("constant matrix does not match grid dimension")
        A = np.broadcast_to(self.M.reshape((grid.d, grid.d) + (1,) * grid.d),
                            (grid.d, grid.d) + grid.shape).copy()
        check_admissible(A, self.lam)
        return A


@dataclass
class FunctionRecipe:
    """Deterministic coefficient from a callable ``coords -> matrix field``."""

    func: Callable[[np.ndarray], np.ndarray]
    lam: float
    isotropic: bool = False

    def sample(self, grid: Grid, seed: SampleSeed | None = None) -> np.ndarray:
        A = np.asarray(self.func(grid.coords()), dtype=float)
        if A.shape == grid.shape:
            A = np.eye(grid.d).reshape((grid.d, grid.d) + (1,) * grid.d) * A
        check_admissible(A, self.lam)
        return A


def scalar_function_recipe(b: Callable[[np.ndarray], np.ndarray], lam: float) -> FunctionRecipe:
    """Isotropic deterministic coefficient ``A(x) = b(x) Id``."""
    return FunctionRecipe(func=b, lam=lam, isotropic=True)
