"""Periodic lattice on the torus Q_L = [-L/2, L/2)^d and discrete vector calculus.

Array layout conventions used throughout the package:

* scalar field: shape ``(N,) * d``
* vector field: shape ``(d,) + (N,) * d``
* matrix field: shape ``(d, d) + (N,) * d``

Lattice point ``j`` sits at ``x_j = (j - N/2) h`` so the origin is index ``N/2``.
The gradient is the forward difference and the divergence the backward
difference, so that ``divergence = -gradient^T`` exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    d: int
    L: float
    N: int

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise GridError(f"dimension must be 1, 2 or 3, got {self.d}")
        if self.N < 4 or self.N % 2:
            raise GridError(f"N must be even and >= 4, got {self.N}")
        if not self.L > 0:
            raise GridError(f"L must be positive, got {self.L}")

    @property
    def h(self) -> float:
        return self.L / self.N

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.N,) * self.d

    @property
    def size(self) -> int:
        return self.N**self.d

    @property
    def cell_volume(self) -> float:
        return self.h**self.d

    @property
    def origin_index(self) -> tuple[int, ...]:
        return (self.N // 2,) * self.d

    def coords(self) -> np.ndarray:
        """Lattice coordinates, shape ``(d,) + shape``."""
        x = (np.arange(self.N) - self.N // 2) * self.h
        return np.stack(np.meshgrid(*([x] * self.d), indexing="ij"))

    def periodic_displacement(self, center) -> np.ndarray:
        """Minimal-image displacement ``x - center`` for every lattice point."""
        center = np.asarray(center, dtype=float).reshape((self.d,) + (1,) * self.d)
        dx = self.coords() - center
        return dx - self.L * np.round(dx / self.L)

    def periodic_distance(self, center) -> np.ndarray:
        return np.sqrt(np.sum(self.periodic_displacement(center) ** 2, axis=0))

    @cached_property
    def offset_distance(self) -> np.ndarray:
        """Periodic distance of every lattice point to index 0 (FFT layout)."""
        k = np.arange(self.N)
        k = np.minimum(k, self.N - k) * self.h
        grids = np.meshgrid(*([k] * self.d), indexing="ij")
        return np.sqrt(sum(g**2 for g in grids))


def make_grid(d: int, L: float, N: int) -> Grid:
    return Grid(int(d), float(L), int(N))


def _check_finite(a):
    if not np.all(np.isfinite(a)):
        raise ValueError("field contains non-finite values")


def gradient(u: np.ndarray, grid: Grid) -> np.ndarray:
    """Forward-difference gradient, component i is ``(u(x + h e_i) - u(x)) / h``."""
    _check_finite(u)
    return np.stack([(np.roll(u, -1, axis=i) - u) / grid.h for i in range(grid.d)])


def divergence(F: np.ndarray, grid: Grid) -> np.ndarray:
    """Backward-difference divergence of a vector field (negative adjoint of gradient)."""
    _check_finite(F)
    out = np.zeros(F.shape[1:])
    for i in range(grid.d):
        out += (F[i] - np.roll(F[i], 1, axis=i)) / grid.h
    return out


def matrix_divergence(S: np.ndarray, grid: Grid) -> np.ndarray:
    """Row-wise divergence ``(div S)_i = sum_j D_j^- S_ij``."""
    return np.stack([divergence(S[i], grid) for i in range(grid.d)])


def laplacian(u: np.ndarray, grid: Grid) -> np.ndarray:
    """Standard (2d+1)-point discrete Laplacian."""
    out = -2.0 * grid.d * u
    for i in range(grid.d):
        out = out + np.roll(u, 1, axis=i) + np.roll(u, -1, axis=i)
    return out / grid.h**2


def inner(u: np.ndarray, v: np.ndarray, grid: Grid) -> float:
    return float(np.sum(u * v) * grid.cell_volume)


def mean(u: np.ndarray, grid: Grid) -> np.ndarray:
    axes = tuple(range(u.ndim - grid.d, u.ndim))
    return u.mean(axis=axes)


def ball_mask(grid: Grid, center, r: float) -> np.ndarray:
    """Lattice points within periodic distance ``r`` of ``center`` (ties included).

    Falls back to the single nearest point when the ball contains no lattice point.
    """
    dist = grid.periodic_distance(center)
    mask = dist <= r * (1 + 1e-12)
    if not mask.any():
        mask = dist == dist.min()
    return mask


def ball_average(f: np.ndarray, grid: Grid, center, r: float) -> np.ndarray:
    """Mean of ``f`` over the lattice ball ``B_r(center)``; ``f`` may carry leading axes."""
    if not 0 < r <= grid.L / 2:
        raise GridError(f"ball radius must lie in (0, L/2], got {r}")
    mask = ball_mask(grid, center, r)
    return f[..., mask].mean(axis=-1)


def ball_averages_everywhere(f: np.ndarray, grid: Grid, r: float) -> np.ndarray:
    """Average of ``f`` over ``B_r(x)`` for every lattice point ``x`` (circular FFT convolution).

    Radii beyond L/2 are allowed here: the ball is the set of points within
    periodic distance r, so it saturates at the whole torus.
    """
    mask = (grid.offset_distance <= r * (1 + 1e-12)).astype(float)
    count = mask.sum()
    axes = tuple(range(-grid.d, 0))
    mhat = np.fft.rfftn(mask, axes=axes)
    # correlation: sum_y f(x + y) mask(y); mask is even so convolution is the same
    out = np.fft.irfftn(np.fft.rfftn(f, axes=axes) * mhat, s=grid.shape, axes=axes)
    return out / count
