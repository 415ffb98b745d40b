"""Pointwise monotone maps ``a(x, xi) = A(x) (1 + |xi|^(p-2)) xi``.

Functions accept either a single matrix/vector (``A`` of shape (d, d), ``xi``
of shape (d,)) or whole fields with trailing lattice axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import qmc

from .grid import Grid


@dataclass
class OperatorSpec:
    p: float
    lam: float
    A: np.ndarray
    grid: Grid
    # 1.0 for the non-degenerate map; 0.0 keeps only the pure p-homogeneous part
    shift: float = 1.0

    def __post_init__(self):
        if self.p < 2:
            raise ValueError(f"growth exponent must be >= 2, got {self.p}")
        if not 0 < self.lam <= 1:
            raise ValueError(f"ellipticity must lie in (0, 1], got {self.lam}")
        if self.A.shape != (self.grid.d, self.grid.d) + self.grid.shape:
            raise ValueError("coefficient field shape does not match grid")

    @property
    def is_scalar(self) -> bool:
        """True when A = b Id pointwise (the operator then has a potential)."""
        d = self.grid.d
        off = [self.A[i, j] for i in range(d) for j in range(d) if i != j]
        diag_equal = all(np.array_equal(self.A[i, i], self.A[0, 0]) for i in range(d))
        return diag_equal and all(not np.any(o) for o in off)

    @property
    def is_symmetric(self) -> bool:
        return bool(np.array_equal(self.A, np.swapaxes(self.A, 0, 1)))

    def scaled(self, s: float) -> "OperatorSpec":
        return OperatorSpec(self.p, self.lam, s * self.A, self.grid, self.shift)


def _matvec(A, v):
    return np.einsum("ij...,j...->i...", A, v)


def _norm(xi):
    return np.sqrt(np.sum(np.asarray(xi) ** 2, axis=0))


def eval_a(A, xi, p, shift=1.0):
    xi = np.asarray(xi, dtype=float)
    n = _norm(xi)
    return _matvec(A, (shift + n ** (p - 2)) * xi)


def eval_Da(A, xi, p, shift=1.0):
    """Jacobian ``A [(1+|xi|^(p-2)) Id + (p-2) |xi|^(p-2) xi_hat (x) xi_hat]``."""
    xi = np.asarray(xi, dtype=float)
    d = xi.shape[0]
    n = _norm(xi)
    np_2 = n ** (p - 2)
    safe = np.where(n > 0, n, 1.0)
    xh = np.where(n > 0, xi / safe, 0.0)
    eye = np.eye(d).reshape((d, d) + (1,) * (xi.ndim - 1))
    S = (shift + np_2) * eye + (p - 2) * np_2 * np.einsum("i...,j...->ij...", xh, xh)
    return np.einsum("ik...,kj...->ij...", A, S)


def eval_W(b, xi, p, shift=1.0):
    """Potential ``b (|xi|^2/2 + |xi|^p/p)``; defined for scalar coefficients only."""
    b = np.asarray(b, dtype=float)
    if b.ndim >= 2 and b.shape[0] == b.shape[1] == np.asarray(xi).shape[0]:
        d = b.shape[0]
        off = [b[i, j] for i in range(d) for j in range(d) if i != j]
        if any(np.any(o) for o in off) or any(not np.array_equal(b[i, i], b[0, 0]) for i in range(d)):
            raise ValueError("potential exists only for scalar coefficients A = b Id")
        b = b[0, 0]
    n = _norm(xi)
    return b * (0.5 * shift * n**2 + n**p / p)


def flux(spec: OperatorSpec, g: np.ndarray) -> np.ndarray:
    return eval_a(spec.A, g, spec.p, spec.shift)


def tangent(spec: OperatorSpec, g: np.ndarray) -> np.ndarray:
    return eval_Da(spec.A, g, spec.p, spec.shift)


def energy_density(spec: OperatorSpec, g: np.ndarray) -> np.ndarray:
    return eval_W(spec.A[0, 0], g, spec.p, spec.shift)


def ellipticity_bounds(lam: float, p: float) -> tuple[float, float]:
    """Constants ``c, C`` with ``c |h|^2 mu <= h.Da(x, xi) h <= C |h|^2 mu`` for ``A = b Id``.

    Here ``mu = 1 + |xi|^(p-2)`` and ``b`` ranges over ``[lam, 1]``. The symmetric
    factor of Da has spectrum ``[1 + n^(p-2), 1 + (p-1) n^(p-2)]``.
    """
    return lam, max(p - 1.0, 1.0)


@dataclass
class ClassReport:
    p: float
    alpha: float
    beta: float
    C_upper: float
    C_mono: float
    passed: bool
    witness_upper: tuple = field(default=())
    witness_mono: tuple = field(default=())


def _pair_samples(d, n, radius, rng):
    sob = qmc.Sobol(d=2 * d, scramble=True, seed=rng)
    m = int(np.ceil(np.log2(n)))
    u = sob.random_base2(m)[:n]
    pts = (2 * u - 1) * radius
    x1, x2 = pts[:, :d], pts[:, d:]
    k = max(n // 10, 1)
    # near-zero pairs
    x1[:k] *= 1e-4 / radius
    x2[:k] *= 1e-4 / radius
    # near-collinear pairs
    t = rng.uniform(0.5, 1.5, size=(k, 1))
    x2[k:2 * k] = x1[k:2 * k] * t + 1e-4 * rng.standard_normal((k, d))
    return x1, x2


def check_class_M(
    amap: Callable[[np.ndarray], np.ndarray],
    d: int,
    p: float,
    alpha: float,
    beta: float,
    sample_count: int = 4096,
    radius: float = 10.0,
    seed: int = 0,
    mono_tol: float = 1e-6,
) -> ClassReport:
    """Sampled estimate of the continuity and monotonicity constants of ``amap``.

    ``amap`` acts on vectors stacked along axis 0 (shape ``(d, n)``). A sampled
    test cannot certify membership; ``passed`` means no pair pushed the
    monotonicity constant below ``mono_tol``.
    """
    if sample_count < 1000:
        raise ValueError("class test needs at least 1000 pairs")
    rng = np.random.default_rng(seed)
    x1, x2 = _pair_samples(d, sample_count, radius, rng)
    diff = x1 - x2
    dn = np.linalg.norm(diff, axis=1)
    keep = dn > 0
    x1, x2, diff, dn = x1[keep], x2[keep], diff[keep], dn[keep]
    a1 = np.asarray(amap(x1.T)).T
    a2 = np.asarray(amap(x2.T)).T
    da = a1 - a2
    base = 1 + np.linalg.norm(x1, axis=1) + np.linalg.norm(x2, axis=1)
    upper = np.linalg.norm(da, axis=1) / (base ** (p - 1 - alpha) * dn**alpha)
    mono = np.sum(da * diff, axis=1) / (base ** (p - beta) * dn**beta)
    iu, im = int(np.argmax(upper)), int(np.argmin(mono))
    C_upper, C_mono = float(upper[iu]), float(mono[im])
    return ClassReport(
        p=p, alpha=alpha, beta=beta, C_upper=C_upper, C_mono=C_mono,
        passed=bool(C_mono > mono_tol and np.isfinite(C_upper)),
        witness_upper=(x1[iu], x2[iu]), witness_mono=(x1[im], x2[im]),
    )


def radial_monotonicity_bound(rho, drho, p: float, t_max: float = 1e3, n: int = 200001):
    """Lower bounds from the radial reduction for ``a(xi) = rho(|xi|) xi``.

    Returns ``(c, c_e6)`` where ``c = inf_t (t rho)'(t) / (1+t^p)^((p-2)/p)`` on a
    dense log grid and ``c_e6 = c / (12 (p-1))`` bounds
    ``(a(x1)-a(x2)).(x1-x2) / ((1+|x1|^(p-2)+|x2|^(p-2)) |x1-x2|^2)`` from below.
    """
    t = np.concatenate([[0.0], np.geomspace(1e-6, t_max, n)])
    dtr = rho(t) + t * drho(t)
    c = float(np.min(dtr / (1 + t**p) ** ((p - 2) / p)))
    return c, c / (12 * (p - 1))
