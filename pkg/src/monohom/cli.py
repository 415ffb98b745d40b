"""Command line entry point: ``monohom run|verify|sample-field``.

Exit codes: 0 success, 2 invalid configuration, 3 solver failure, 4 failed
invariant check. Failed runs keep their partial outputs next to a ``FAILED``
marker file.

Precedence for every setting: command-line flag, then config file, then
default. The thread count falls back to ``MONOHOM_THREADS`` and then to the
number of CPUs.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import platform
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .corrector import (
    CorrectorError,
    exact_constant_map,
    flux_potential,
    homogenized_map,
    homogenized_tangent,
    sample_spec,
    solve_corrector,
    solve_flux_corrector,
    solve_linearized,
)
from .diagnostics import (
    DiagnosticError,
    calibrate_c1,
    caccioppoli,
    check_sandwich,
    clt_scaling,
    corrector_growth,
    holefilling_fit,
    linear_minimal_radius,
    meyers_radius,
    radial_profile_check,
    verify_strong_monotonicity,
)
from .field import (
    CoefficientError,
    CoefficientRecipe,
    ConstantRecipe,
    CovarianceSpec,
    SampleSeed,
    scalar_function_recipe,
    skew_profile,
    tabulated_profile,
    tanh_profile,
)
from .grid import Grid, divergence, gradient, inner, laplacian, make_grid
from .io import read_field, write_csv, write_field
from .montecarlo import SampleFailure, default_threads
from .operator import OperatorSpec, check_class_M, eval_a, eval_Da, radial_monotonicity_bound
from .solver import NonlinearProblem, SolverError, solve_nonlinear, solve_poisson
from .twoscale import TwoScaleError, build_partition, periodic_profile, rate_study

log = logging.getLogger("monohom")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_INVARIANT = 0, 2, 3, 4

STUDIES = ("corrector", "homogenize", "tangent", "clt", "growth", "monotonicity", "radial-ode",
           "two-scale", "radius", "verify")

# allowed keys with defaults; None marks "required or study-dependent"
SCHEMA = {
    "study": None,
    "grid": {"d": 2, "L": 16.0, "N": 64},
    "operator": {"p": 3.0, "lambda": 0.25},
    "recipe": {"kind": "gaussian", "ell_c": 1.0, "kernel_radius_cells": 2.0, "B": "tanh",
               "isotropic": None, "M": None, "period": None},
    "solver": {"tol": 1e-10, "lin_tol": None, "max_newton": 50, "max_krylov": 2000, "warm_start": True},
    "params": {},
    "seed": 0,
    "output": "monohom-run",
    "threads": None,
}

PARAMS = {
    "corrector": {"xi": None, "samples": 1, "snapshots": False},
    "homogenize": {"xis": None, "sample_count": 1},
    "tangent": {"xi": None, "sample_count": 1, "fd_h": None},
    "clt": {"xi": None, "radii": None, "sample_count": 20, "quantity": "grad_phi", "pooled": True},
    "growth": {"xi": None, "points": None, "sample_count": 10, "qs": [1, 2, 4]},
    "monotonicity": {"xis": None, "sample_count": 10},
    "radial-ode": {"ts": None, "sample_count": 10},
    "two-scale": {"mode": "periodic", "epsilons": [0.25, 0.125], "sample_count": 1, "torus": 1.0,
                  "amplitude": 1.0, "with_remainder": True},
    "radius": {"xi": None, "samples": 1, "c1": None, "C_lin": 1.0, "ell": 0.0625, "snapshots": False},
    "verify": {"fast": False, "dims": [1, 2, 3]},
    "sample-field": {"samples": [0]},
}


class ConfigError(ValueError):
    pass


class InvariantFailure(RuntimeError):
    pass


# --- configuration -----------------------------------------------------------------


def _merge(defaults: dict, given: dict, where: str) -> dict:
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        if k not in defaults:
            raise ConfigError(f"unknown key '{where}{k}'")
        if isinstance(defaults[k], dict) and defaults[k] and not isinstance(v, dict):
            raise ConfigError(f"'{where}{k}' must be an object")
        if isinstance(defaults[k], dict) and defaults[k]:
            out[k] = _merge(defaults[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def load_config(source, study: str | None = None) -> dict:
    """Validate a config mapping (or JSON file) and fill in defaults."""
    if isinstance(source, (str, Path)):
        try:
            raw = json.loads(Path(source).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
    else:
        raw = copy.deepcopy(source)
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if study is not None:
        raw.setdefault("study", study)
    cfg = _merge(SCHEMA, raw, "")
    name = cfg["study"]
    if name not in STUDIES and name != "sample-field":
        raise ConfigError(f"unknown study {name!r}; choose from {', '.join(STUDIES)}")
    cfg["params"] = _merge(PARAMS[name], raw.get("params", {}) or {}, "params.")
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    g, op, rc, sv = cfg["grid"], cfg["operator"], cfg["recipe"], cfg["solver"]
    if g["d"] not in (1, 2, 3):
        raise ConfigError("grid.d must be 1, 2 or 3")
    if not (isinstance(g["N"], int) and g["N"] >= 4 and g["N"] % 2 == 0):
        raise ConfigError("grid.N must be an even integer >= 4")
    if not float(g["L"]) > 0:
        raise ConfigError("grid.L must be positive")
    if not float(op["p"]) >= 2:
        raise ConfigError("operator.p must be >= 2")
    if not 0 < float(op["lambda"]) <= 1:
        raise ConfigError("operator.lambda must lie in (0, 1]")
    if rc["kind"] not in ("gaussian", "constant", "periodic"):
        raise ConfigError("recipe.kind must be gaussian, constant or periodic")
    if rc["kind"] == "gaussian":
        if not float(rc["ell_c"]) > 0:
            raise ConfigError("recipe.ell_c must be positive")
        if float(rc["kernel_radius_cells"]) < 2:
            raise ConfigError("recipe.kernel_radius_cells must be >= 2")
        if not (rc["B"] in ("tanh", "skew") or (isinstance(rc["B"], dict) and set(rc["B"]) == {"ts", "values"})):
            raise ConfigError("recipe.B must be 'tanh', 'skew' or {'ts': [...], 'values': [...]}")
        if rc["B"] == "skew" and g["d"] < 2:
            raise ConfigError("recipe.B='skew' needs d >= 2")
    if rc["kind"] == "constant":
        M = np.asarray(rc["M"], dtype=float) if rc["M"] is not None else None
        if M is None or M.shape != (g["d"], g["d"]):
            raise ConfigError("recipe.M must be a d x d matrix for a constant recipe")
    if rc["kind"] == "periodic" and not (rc["period"] and float(rc["period"]) > 0):
        raise ConfigError("recipe.period must be positive for a periodic recipe")
    if sv["lin_tol"] is not None and not 0 < float(sv["lin_tol"]) < 1:
        raise ConfigError("solver.lin_tol must lie in (0, 1)")
    if not 0 < float(sv["tol"]) < 1:
        raise ConfigError("solver.tol must lie in (0, 1)")
    if int(sv["max_newton"]) < 1 or int(sv["max_krylov"]) < 1:
        raise ConfigError("solver iteration limits must be positive")
    if cfg["threads"] is not None and int(cfg["threads"]) < 1:
        raise ConfigError("threads must be >= 1")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    _validate_params(cfg)


def _need(params, key, study):
    if params.get(key) is None:
        raise ConfigError(f"params.{key} is required for study {study!r}")
    return params[key]


def _vec(v, d, key):
    a = np.asarray(v, dtype=float)
    if a.shape != (d,):
        raise ConfigError(f"params.{key} must have length d={d}")
    return a


def _validate_params(cfg):
    s, P, d = cfg["study"], cfg["params"], cfg["grid"]["d"]
    if s in ("corrector", "tangent", "clt", "growth", "radius"):
        _vec(_need(P, "xi", s), d, "xi")
    if s in ("homogenize", "monotonicity"):
        for x in _need(P, "xis", s):
            _vec(x, d, "xis[]")
    if s == "clt":
        if len(_need(P, "radii", s)) < 2:
            raise ConfigError("params.radii needs at least two radii")
    if s == "growth":
        for x in _need(P, "points", s):
            _vec(x, d, "points[]")
    if s == "radial-ode":
        _need(P, "ts", s)
    if s == "two-scale":
        if P["mode"] not in ("periodic", "random", "constant"):
            raise ConfigError("params.mode must be periodic, random or constant")
        h = float(P["torus"]) / int(cfg["grid"]["N"])
        for e in P["epsilons"]:
            if not 0 < e <= float(P["torus"]) / 4 or float(e) / h < 8 - 1e-9:
                raise ConfigError(f"params.epsilons: {e} must lie in [8h, torus/4] with h = {h:.4g}")
    if s == "verify":
        if not set(P["dims"]) <= {1, 2, 3}:
            raise ConfigError("params.dims must be a subset of [1, 2, 3]")
    for key in ("sample_count", "samples"):
        v = P.get(key)
        if isinstance(v, int) and v < 1:
            raise ConfigError(f"params.{key} must be >= 1")


def build_grid(cfg) -> Grid:
    g = cfg["grid"]
    return make_grid(int(g["d"]), float(g["L"]), int(g["N"]))


def build_recipe(cfg):
    rc, lam, d = cfg["recipe"], float(cfg["operator"]["lambda"]), cfg["grid"]["d"]
    if rc["kind"] == "constant":
        return ConstantRecipe(np.asarray(rc["M"], dtype=float), lam)
    if rc["kind"] == "periodic":
        prof, period = periodic_profile(lam), float(rc["period"])
        return scalar_function_recipe(lambda x: prof(x / period), lam)
    B = rc["B"]
    if B == "tanh":
        prof, iso = tanh_profile(lam), True
    elif B == "skew":
        prof, iso = skew_profile(lam, d), False
    else:
        prof, iso = tabulated_profile(B["ts"], B["values"]), True
    if rc["isotropic"] is not None:
        iso = bool(rc["isotropic"])
    return CoefficientRecipe(CovarianceSpec(ell_c=float(rc["ell_c"])), lam, B=prof,
                             kernel_radius_cells=float(rc["kernel_radius_cells"]), isotropic=iso)


# --- reports ----------------------------------------------------------------------------


@dataclass
class Run:
    cfg: dict
    out: Path
    threads: int
    checks: list = field(default_factory=list)
    tables: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    samples: list = field(default_factory=list)

    @property
    def seed(self) -> int:
        return int(self.cfg["seed"])

    @property
    def tol(self) -> float:
        return float(self.cfg["solver"]["tol"])

    @property
    def lin_tol(self) -> float:
        # Krylov tolerance follows the Newton tolerance unless set explicitly
        lt = self.cfg["solver"]["lin_tol"]
        return float(lt) if lt is not None else min(1e-8, 100 * self.tol)

    def check(self, name, passed, value=None, threshold=None, hard=True, note=None):
        rec = {"name": name, "passed": bool(passed), "value": _jsonable(value),
               "threshold": _jsonable(threshold), "hard": hard}
        if note:
            rec["note"] = note
        self.checks.append(rec)
        log.info("%s %s value=%s", "PASS" if passed else "FAIL", name, value)
        return passed

    def table(self, name, header, rows):
        path = write_csv(self.out / "tables" / f"{name}.csv", header, rows)
        self.tables.append(str(path.relative_to(self.out)))
        return path

    def snapshot(self, name, values, grid, seed=None):
        path = write_field(self.out / "fields" / f"{name}.bin", values, grid, name, seed)
        self.summary.setdefault("fields", []).append(str(path.relative_to(self.out)))


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, float) and not np.isfinite(v):
        return str(v)
    return v


def versions() -> dict:
    return {"monohom": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__}


def resolve_threads(flag, cfg) -> int:
    if flag is not None:
        return max(1, int(flag))
    if cfg.get("threads") is not None:
        return int(cfg["threads"])
    return default_threads()


# --- studies ------------------------------------------------------------------------------


def _operator(cfg):
    return float(cfg["operator"]["p"]), float(cfg["operator"]["lambda"])


def study_corrector(run: Run):
    cfg, P = run.cfg, run.cfg["params"]
    grid, recipe = build_grid(cfg), build_recipe(cfg)
    p, _ = _operator(cfg)
    xi = np.asarray(P["xi"], dtype=float)
    d = grid.d
    rows, worst_res, worst_flux, skew = [], 0.0, 0.0, True
    for i in range(int(P["samples"])):
        seed = SampleSeed(run.seed, i)
        spec = sample_spec(recipe, grid, p, seed)
        b = solve_corrector(spec, xi, tol=run.tol, lin_tol=run.lin_tol,
                            max_newton=cfg["solver"]["max_newton"], max_krylov=cfg["solver"]["max_krylov"])
        b = solve_flux_corrector(b)
        skew &= bool(np.array_equal(b.sigma, -np.swapaxes(b.sigma, 0, 1)))
        worst_res = max(worst_res, b.stats.residual)
        worst_flux = max(worst_flux, b.sigma_residual)
        rows.append([i, *xi, *b.abar, b.stats.iterations, b.stats.residual, b.sigma_residual,
                     float(np.sqrt(np.mean(np.sum(b.grad_phi**2, axis=0))))])
        run.samples.append({"sample": i, "newton_iterations": b.stats.iterations, "residual": b.stats.residual})
        if P["snapshots"]:
            run.snapshot(f"phi_s{i}", b.phi, grid, seed)
            run.snapshot(f"sigma_s{i}", b.sigma, grid, seed)
    header = (["sample"] + [f"xi_{j}" for j in range(d)] + [f"abar_{j}" for j in range(d)]
              + ["newton_iterations", "residual", "flux_identity", "grad_phi_rms"])
    run.table("corrector", header, rows)
    run.check("corrector.residual", worst_res <= run.tol, worst_res, run.tol)
    run.check("corrector.flux_identity", worst_flux <= 10 * run.tol, worst_flux, 10 * run.tol)
    run.check("corrector.sigma_skew", skew, None, "exact")
    if isinstance(recipe, ConstantRecipe):
        exact = exact_constant_map(recipe.M, xi, p)
        err = float(np.max(np.abs(np.array([r[1 + d + j] for r in rows for j in range(d)]).reshape(-1, d) - exact)))
        run.check("corrector.constant_exact", err <= 1e-10, err, 1e-10)
    run.summary["abar"] = [r[1 + d:1 + 2 * d] for r in rows]


def study_homogenize(run: Run):
    cfg, P = run.cfg, run.cfg["params"]
    grid, recipe = build_grid(cfg), build_recipe(cfg)
    p, _ = _operator(cfg)
    d, rows = grid.d, []
    for xi in P["xis"]:
        est, err = homogenized_map(recipe, grid, p, xi, int(P["sample_count"]), run.seed, tol=run.tol,
                                   threads=run.threads)
        rows.append([p, grid.L, grid.N, *xi, *est, *err])
    run.table("homogenized_map", ["p", "L", "N"] + [f"xi_{j}" for j in range(d)]
              + [f"abar_{j}" for j in range(d)] + [f"stderr_{j}" for j in range(d)], rows)
    finite = all(np.all(np.isfinite(r[3:])) for r in rows)
    run.check("homogenize.finite", finite)


def study_tangent(run: Run):
    cfg, P = run.cfg, run.cfg["params"]
    grid, recipe = build_grid(cfg), build_recipe(cfg)
    p, _ = _operator(cfg)
    d, xi, n = grid.d, np.asarray(P["xi"], dtype=float), int(P["sample_count"])
    D, se = homogenized_tangent(recipe, grid, p, xi, n, run.seed, tol=run.tol, threads=run.threads)
    run.table("homogenized_tangent", ["p", "L", "N"] + [f"xi_{j}" for j in range(d)]
              + [f"D_{i}{j}" for i in range(d) for j in range(d)]
              + [f"stderr_{i}{j}" for i in range(d) for j in range(d)],
              [[p, grid.L, grid.N, *xi, *D.ravel(), *se.ravel()]])
    run.summary["tangent"] = D.tolist()
    if P["fd_h"]:
        h = float(P["fd_h"])
        fd = np.zeros((d, d))
        for j in range(d):
            e = np.eye(d)[j] * h
            ap, _ = homogenized_map(recipe, grid, p, xi + e, n, run.seed, tol=run.tol, threads=run.threads)
            am, _ = homogenized_map(recipe, grid, p, xi - e, n, run.seed, tol=run.tol, threads=run.threads)
            fd[:, j] = (ap - am) / (2 * h)
        rel = float(np.max(np.abs(fd - D)) / np.max(np.abs(D)))
        run.summary["tangent_fd"] = fd.tolist()
        run.check("tangent.fd_consistency", rel <= 1e-3, rel, 1e-3)
    else:
        run.check("tangent.finite", bool(np.all(np.isfinite(D))))


def study_clt(run: Run):
    cfg, P = run.cfg, run.cfg["params"]
    grid, recipe = build_grid(cfg), build_recipe(cfg)
    p, _ = _operator(cfg)
    rep = clt_scaling(recipe, grid, p, P["xi"], P["radii"], int(P["sample_count"]), run.seed,
                      quantity=P["quantity"], tol=run.tol, threads=run.threads, pooled=bool(P["pooled"]))
    rows = []
    for k, R in enumerate(rep.radii):
        partial = None
        if k > 0 and rep.variances[k] > 0 and rep.variances[k - 1] > 0:
            partial = float(np.log(rep.variances[k] / rep.variances[k - 1]) / np.log(R / rep.radii[k - 1]))
        rows.append([R, rep.variances[k], partial])
    run.table("clt", ["radius", "variance", "slope_partial"], rows)
    run.summary.update(slope=rep.slope, ci=rep.ci, sample_count=rep.sample_count, target=-grid.d)
    if rep.degenerate:
        run.check("clt.degenerate", True, None, None, hard=False, note="zero variance (deterministic input)")
        return
    run.check("clt.slope_finite", np.isfinite(rep.slope), rep.slope)
    run.check("clt.slope_band", abs(rep.slope + grid.d) <= 0.3, rep.slope, [-grid.d - 0.3, -grid.d + 0.3],
              hard=False)


def study_growth(run: Run):
    cfg, P = run.cfg, run.cfg["params"]
    grid, recipe = build_grid(cfg), build_recipe(cfg)
    p, _ = _operator(cfg)
    qs = tuple(int(q) for q in P["qs"])
    rep = corrector_growth(recipe, grid, p, P["xi"], P["points"], int(P["sample_count"]), run.seed, qs=qs,
                           tol=run.tol, threads=run.threads)
    rows = []
    for j, x in enumerate(rep.points):
        for q in qs:
            rows.append([*x, q, rep.weights[j], rep.phi_moments[q][j], rep.sigma_moments[q][j],
                         rep.phi_ratio[q][j], rep.sigma_ratio[q][j]])
    run.table("growth", [f"x_{i}" for i in range(grid.d)]
              + ["q", "mu_d", "phi_moment", "sigma_moment", "phi_ratio", "sigma_ratio"], rows)
    ratios = np.array([r[-2:] for r in rows], dtype=float)
    run.check("growth.finite", bool(np.all(np.isfinite(ratios))))
    run.summary["max_ratio"] = float(np.max(ratios))


def study_monotonicity(run: Run):
    cfg, P = run.cfg, run.cfg["params"]
    grid, recipe = build_grid(cfg), build_recipe(cfg)
    p, _ = _operator(cfg)
    rep = verify_strong_monotonicity(recipe, grid, p, P["xis"], int(P["sample_count"]), run.seed,
                                     tol=run.tol, threads=run.threads)
    rows = [[i, j, rep.ratio_mean[k], rep.ratio_se[k]] for k, (i, j) in enumerate(rep.pairs)]
    run.table("monotonicity", ["i", "j", "ratio_mean", "ratio_se"], rows)
    run.table("abar", [f"xi_{j}" for j in range(grid.d)] + [f"abar_{j}" for j in range(grid.d)]
              + [f"stderr_{j}" for j in range(grid.d)],
              [[*x, *a, *s] for x, a, s in zip(rep.xis, rep.abar, rep.abar_se)])
    run.summary.update(c=rep.c, c_se=rep.c_se, ci=rep.ci, lipschitz=rep.lipschitz)
    run.check("monotonicity.lipschitz_finite", np.isfinite(rep.lipschitz), rep.lipschitz)
    run.check("monotonicity.c_positive", rep.ci[0] > 0, rep.ci, 0.0, hard=False)


def study_radial(run: Run):
    cfg, P = run.cfg, run.cfg["params"]
    grid, recipe = build_grid(cfg), build_recipe(cfg)
    p, _ = _operator(cfg)
    rep = radial_profile_check(recipe, grid, p, P["ts"], int(P["sample_count"]), run.seed, tol=run.tol,
                               threads=run.threads)
    rows = [[t, z, dz, h, r, se, d2, e8] for t, z, dz, h, r, se, d2, e8 in
            zip(rep.ts, rep.zeta, rep.dzeta, rep.h, rep.residual, rep.residual_se, rep.d2zeta, rep.e8_ratio)]
    run.table("radial", ["t", "zeta", "dzeta", "h", "residual", "residual_se", "d2zeta", "e8_ratio"], rows)
    run.check("radial.ode_residual", rep.passed, float(np.max(np.abs(rep.residual))),
              "3 SE + atol * scale")


def study_two_scale(run: Run):
    cfg, P = run.cfg, run.cfg["params"]
    g = cfg["grid"]
    p, lam = _operator(cfg)
    eps = [float(e) for e in P["epsilons"]]
    try:
        rep = rate_study(P["mode"], eps, d=int(g["d"]), p=p, lam=lam, N=int(g["N"]),
                         sample_count=int(P["sample_count"]), seed=run.seed, amplitude=float(P["amplitude"]),
                         tol=run.tol, with_remainder=bool(P["with_remainder"]), torus=float(P["torus"]),
                         threads=run.threads)
    except TwoScaleError as exc:
        raise ConfigError(str(exc)) from exc
    rows, prev = [], None
    for e in eps:
        partial = None
        if prev is not None and rep.mean_errors[e] > 0 and rep.mean_errors[prev] > 0:
            partial = float(np.log(rep.mean_errors[e] / rep.mean_errors[prev]) / np.log(e / prev))
        for r in (r for r in rep.rows if r.epsilon == e):
            rows.append([r.epsilon, r.delta, r.sample, r.err_L2, r.err_Lp, r.remainder_L2, partial])
        prev = e
    run.table("rate", ["epsilon", "delta", "sample", "err_L2", "err_Lp", "remainder_L2", "slope_partial"], rows)
    run.summary.update(slope=rep.slope, remainder_slope=rep.remainder_slope,
                       corrector_solves=[r.corrector_solves for r in rep.rows])
    run.check("two_scale.energy_estimate", all(r.energy_holds for r in rep.rows))
    if P["mode"] == "constant":
        worst = max(r.err_L2 for r in rep.rows)
        run.check("two_scale.constant_control", worst <= 1e-8, worst, 1e-8)
    elif rep.slope is not None:
        target = 0.8 if P["mode"] == "periodic" else 0.75
        run.check("two_scale.rate_slope", rep.slope >= target, rep.slope, target, hard=False)


def study_radius(run: Run):
    cfg, P = run.cfg, run.cfg["params"]
    grid, recipe = build_grid(cfg), build_recipe(cfg)
    p, _ = _operator(cfg)
    xi = np.asarray(P["xi"], dtype=float)
    bundles = [solve_corrector(sample_spec(recipe, grid, p, SampleSeed(run.seed, i)), xi, tol=run.tol)
               for i in range(int(P["samples"]))]
    c1 = float(P["c1"]) if P["c1"] is not None else calibrate_c1(bundles)
    ell = float(P["ell"])
    rows, ok_sandwich, ok_bounds = [], True, True
    for i, b in enumerate(bundles):
        rf = meyers_radius(b, c1, ell)
        sw = check_sandwich(b, c1, ell)
        lin = solve_linearized(b, np.eye(grid.d)[0], tol=run.tol, with_sigma=False)
        rl = linear_minimal_radius(b, lin, float(P["C_lin"]))
        ok_sandwich &= sw.passed
        ok_bounds &= rf.check_bounds(grid.L)
        rows.append([i, c1, rf.values.min(), rf.values.mean(), rf.values.max(), rl.values.min(), rl.values.max(),
                     sw.lower_violations, sw.upper_violations])
        if P["snapshots"]:
            run.snapshot(f"rstar_s{i}", rf.values, grid, SampleSeed(run.seed, i))
    run.table("radius", ["sample", "c1", "rstar_min", "rstar_mean", "rstar_max", "rlin_min", "rlin_max",
                         "lower_violations", "upper_violations"], rows)
    run.check("radius.sandwich", ok_sandwich)
    run.check("radius.bounds", ok_bounds)


def study_sample_field(run: Run):
    cfg, P = run.cfg, run.cfg["params"]
    grid, recipe = build_grid(cfg), build_recipe(cfg)
    samples = P["samples"] if isinstance(P["samples"], list) else list(range(int(P["samples"])))
    rows = []
    for i in samples:
        seed = SampleSeed(run.seed, int(i))
        A = recipe.sample(grid, seed)
        run.snapshot(f"coefficient_s{i}", A, grid, seed)
        sym = 0.5 * (A + np.swapaxes(A, 0, 1))
        rows.append([int(i), float(A[0, 0].min()), float(A[0, 0].max()), float(A[0, 0].mean()),
                     float(np.abs(sym - A).max())])
    run.table("fields", ["sample", "a11_min", "a11_max", "a11_mean", "antisymmetric_max"], rows)
    run.check("field.admissible", True, None, None, note="check_admissible raises on violation")


# --- verify suite ----------------------------------------------------------------------------


def verify_dimension(run: Run, d: int, fast: bool) -> float:
    """Invariant suite on one dimension (N <= 64); returns the wall time."""
    t0 = time.perf_counter()
    tol = run.tol
    N = {1: 64, 2: 32 if fast else 64, 3: 32}[d]
    L = N / 4.0
    grid = make_grid(d, L, N)
    p, lam = 3.0, 0.25
    recipe = CoefficientRecipe(CovarianceSpec(ell_c=1.0), lam)
    rng = np.random.default_rng(run.seed)
    tag = f"d{d}."

    # grid: adjointness of D+ and D- and the Poisson round trip
    u = rng.standard_normal(grid.shape)
    F = rng.standard_normal((d,) + grid.shape)
    gap = abs(inner(gradient(u, grid), F, grid) + inner(u, divergence(F, grid), grid))
    run.check(tag + "grid.adjointness", gap <= 1e-10, gap, 1e-10)
    r = u - u.mean()
    rt = float(np.max(np.abs(-laplacian(solve_poisson(r, grid), grid) - r)))
    run.check(tag + "grid.poisson_roundtrip", rt <= 1e-9, rt, 1e-9)

    # field: determinism and admissibility
    seed = SampleSeed(run.seed, 0)
    A1, A2 = recipe.sample(grid, seed), recipe.sample(grid, seed)
    run.check(tag + "field.deterministic", np.array_equal(A1, A2))
    run.check(tag + "field.admissible", A1[0, 0].min() >= lam and A1[0, 0].max() <= 1,
              [float(A1[0, 0].min()), float(A1[0, 0].max())], [lam, 1.0])

    # operator: Jacobian against central differences, sampled class test
    xs = rng.standard_normal((d, 50)) * 2
    M = np.eye(d) * 0.7
    Da = eval_Da(M, xs, p)
    h = 1e-6
    fd = np.stack([(eval_a(M, xs + h * np.eye(d)[:, [j]], p) - eval_a(M, xs - h * np.eye(d)[:, [j]], p)) / (2 * h)
                   for j in range(d)], axis=1)
    jerr = float(np.max(np.abs(fd - Da)) / np.max(np.abs(Da)))
    run.check(tag + "operator.tangent_fd", jerr <= 1e-6, jerr, 1e-6)
    cls = check_class_M(lambda x: eval_a(np.eye(d), x, p), d, p, 1.0, 2.0, 1024 if fast else 4096, seed=run.seed)
    bound, _ = radial_monotonicity_bound(lambda t: 1 + t ** (p - 2), lambda t: (p - 2) * t ** (p - 3), p)
    run.check(tag + "operator.class_M", cls.passed and np.isfinite(cls.C_upper), cls.C_mono, bound)

    # solver: energy decreases along Newton on a boundary-value problem
    spec = OperatorSpec(p, lam, A1, grid)
    f = rng.standard_normal((d,) + grid.shape) * 0.5
    _, st = solve_nonlinear(NonlinearProblem(spec, f=f, tol=tol, lin_tol=run.lin_tol,
                                             u0=rng.standard_normal(grid.shape)))
    mono = bool(np.all(np.diff(st.energies) <= 1e-12 * np.abs(st.energies[:-1]).max()))
    run.check(tag + "solver.energy_monotone", mono and st.residual <= tol, st.residual, tol)

    # corrector: residual, constant exactness, flux identity and skew-symmetry
    xi = np.eye(d)[0]
    b = solve_flux_corrector(solve_corrector(spec, xi, tol=tol, lin_tol=run.lin_tol))
    run.samples.append({"check": tag + "corrector", "newton_iterations": b.stats.iterations,
                        "linear_iterations": b.stats.linear_iterations})
    run.check(tag + "corrector.residual", b.stats.residual <= tol, b.stats.residual, tol)
    cspec = OperatorSpec(p, lam, ConstantRecipe(M, lam).sample(grid), grid)
    cb = solve_corrector(cspec, 2 * xi, tol=tol)
    cerr = max(float(np.sqrt(np.mean(cb.grad_phi**2))), float(np.max(np.abs(cb.abar - exact_constant_map(M, 2 * xi, p)))))
    run.check(tag + "corrector.constant_exact", cerr <= 1e-10, cerr, 1e-10)
    if d == 1:
        run.check(tag + "corrector.flux_identity", True, 0.0, 10 * tol, note="vacuous in d=1")
    else:
        run.check(tag + "corrector.flux_identity", b.sigma_residual <= 10 * tol, b.sigma_residual, 10 * tol)
    run.check(tag + "corrector.sigma_skew", np.array_equal(b.sigma, -np.swapaxes(b.sigma, 0, 1)))

    # corrector: linearized flux average against central differences of abar
    hh = 1e-3
    lin = solve_linearized(b, xi, tol=tol, with_sigma=False)
    bp = solve_corrector(spec, xi * (1 + hh), tol=tol, u0=b.phi)
    bm = solve_corrector(spec, xi * (1 - hh), tol=tol, u0=b.phi)
    fdt = (bp.abar - bm.abar) / (2 * hh)
    terr = float(np.max(np.abs(fdt - lin.tangent_row)) / np.max(np.abs(lin.tangent_row)))
    run.check(tag + "corrector.tangent_fd", terr <= 1e-3, terr, 1e-3)

    # local regularity: Caccioppoli, hole-filling, Meyers radius sandwich
    radii = [L / 16, 3 * L / 32, L / 8, 5 * L / 32]
    cac = caccioppoli(b, radii)
    run.check(tag + "diagnostics.caccioppoli", np.isfinite(cac.constant) and cac.constant > 0, cac.constant)
    hf = holefilling_fit(b, [L / 16, L / 8, 3 * L / 16, L / 4])
    run.check(tag + "diagnostics.holefilling", hf.delta > 0, hf.delta, 0.0)
    c1 = calibrate_c1([b])
    sw = check_sandwich(b, c1)
    run.check(tag + "diagnostics.meyers_sandwich", sw.passed, [sw.lower_violations, sw.upper_violations], 0)

    # partition of unity
    pou = build_partition(grid, 8 * grid.h)
    total = sum(pou.eta(k) for k in pou.indices())
    perr = float(np.max(np.abs(total - 1)))
    ok = perr <= 1e-12 and pou.c_low == 1.0 and pou.C_grad <= 4 * d
    run.check(tag + "twoscale.partition", ok, {"sum_err": perr, "C_grad": pou.C_grad, "c_low": pou.c_low},
              {"sum_err": 1e-12, "C_grad": 4 * d})

    # snapshot round trip
    with tempfile.TemporaryDirectory() as tmp:
        path = write_field(Path(tmp) / "phi.bin", b.phi, grid, "phi", seed)
        back, meta = read_field(path)
        run.check(tag + "io.snapshot_roundtrip", np.array_equal(back, b.phi) and meta["N"] == N)
    return time.perf_counter() - t0


def study_verify(run: Run):
    P = run.cfg["params"]
    times = {}
    for d in P["dims"]:
        times[d] = verify_dimension(run, int(d), bool(P["fast"]))
        run.check(f"d{d}.verify.time", times[d] <= 60.0, times[d], 60.0)
    run.summary["wall_time_per_dimension"] = {str(k): v for k, v in times.items()}


HANDLERS = {
    "corrector": study_corrector,
    "homogenize": study_homogenize,
    "tangent": study_tangent,
    "clt": study_clt,
    "growth": study_growth,
    "monotonicity": study_monotonicity,
    "radial-ode": study_radial,
    "two-scale": study_two_scale,
    "radius": study_radius,
    "verify": study_verify,
    "sample-field": study_sample_field,
}


def execute(cfg: dict, out: Path, threads: int) -> tuple[int, dict]:
    """Run a validated config; always writes ``report.json``. Returns ``(exit code, report)``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / "FAILED"
    if marker.exists():
        marker.unlink()
    run = Run(cfg, out, threads)
    t0 = time.perf_counter()
    status, error, code = "ok", None, EXIT_OK
    try:
        HANDLERS[cfg["study"]](run)
    except ConfigError:
        raise
    except (SolverError, CorrectorError, SampleFailure) as exc:
        status, error, code = "solver_failure", str(exc), EXIT_SOLVER
    except (CoefficientError, DiagnosticError, TwoScaleError) as exc:
        status, error, code = "invariant_failure", str(exc), EXIT_INVARIANT
    if code == EXIT_OK and not all(c["passed"] for c in run.checks if c["hard"]):
        status, code = "invariant_failure", EXIT_INVARIANT
        error = "failed: " + ", ".join(c["name"] for c in run.checks if c["hard"] and not c["passed"])
    report = {
        "config": cfg,
        "study": cfg["study"],
        "status": status,
        "error": error,
        "threads": threads,
        "seed": cfg["seed"],
        "checks": run.checks,
        "summary": _jsonable(run.summary),
        "samples": _jsonable(run.samples),
        "tables": run.tables,
        "versions": versions(),
        "wall_time": time.perf_counter() - t0,
    }
    (out / "report.json").write_text(json.dumps(_jsonable(report), indent=2))
    if code != EXIT_OK:
        marker.write_text(f"{status}: {error}\n")
    return code, report


# --- entry point --------------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="monohom", description="Numerical homogenization of monotone operators.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output directory (overrides config 'output')")
    common.add_argument("--threads", type=int, help="worker threads (overrides config and MONOHOM_THREADS)")
    common.add_argument("--seed", type=int, help="root seed (overrides config)")
    r = sub.add_parser("run", parents=[common], help="run the study named in a JSON config")
    r.add_argument("config")
    v = sub.add_parser("verify", parents=[common], help="invariant suite on small grids")
    v.add_argument("--fast", action="store_true")
    v.add_argument("--dims", type=int, nargs="+", choices=[1, 2, 3])
    v.add_argument("--config", help="optional config (solver tolerances, seed)")
    s = sub.add_parser("sample-field", parents=[common], help="write coefficient samples as field snapshots")
    s.add_argument("config")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "run":
            cfg = load_config(args.config)
            if cfg["study"] == "sample-field":
                raise ConfigError("use 'monohom sample-field' for study 'sample-field'")
        elif args.command == "sample-field":
            raw = json.loads(Path(args.config).read_text()) if Path(args.config).exists() else None
            if raw is None:
                raise ConfigError(f"cannot read config {args.config}")
            raw["study"] = "sample-field"
            cfg = load_config(raw)
        else:
            raw = {}
            if args.config:
                try:
                    raw = json.loads(Path(args.config).read_text())
                except (OSError, json.JSONDecodeError) as exc:
                    raise ConfigError(f"cannot read config: {exc}") from exc
            raw["study"] = "verify"
            raw.setdefault("output", "monohom-verify")
            params = raw.setdefault("params", {})
            if args.fast:
                params["fast"] = True
            if args.dims:
                params["dims"] = args.dims
            cfg = load_config(raw)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("seed must be a non-negative integer")
            cfg["seed"] = args.seed
        if args.threads is not None and args.threads < 1:
            raise ConfigError("threads must be >= 1")
        out = Path(args.out or cfg["output"])
        threads = resolve_threads(args.threads, cfg)
        code, report = execute(cfg, out, threads)
    except ConfigError as exc:
        print(f"monohom: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for c in report["checks"]:
        print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']}" + ("" if c["hard"] else " (soft)"))
    print(f"{report['status']} -> {out / 'report.json'}")
    if report["error"]:
        print(report["error"], file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
