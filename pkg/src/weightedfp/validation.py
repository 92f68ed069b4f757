"""Property suite over the resolvent: the checks behind ``validate``."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .discrete_ops import OperatorBundle
from .model import Grid, inner_l2_rho, mass_rho, norm_l1_rho, norm_linf
from .resolvent import (
    ResolventConfig,
    check_resolvent_identity,
    lambda_max_for,
    solve_resolvent,
)


def random_density(grid: Grid, rng: np.random.Generator, amplitude: float = 3.0) -> np.ndarray:
    """Nonnegative field: a few Gaussian bumps with multiplicative noise.

    Bumps sit in ``[-2, 2]^d``; far from them the field is (numerically) zero,
    which exercises degenerate diffusion.
    """
    pts = grid.cell_points()
    out = np.zeros(grid.shape)
    for _ in range(rng.integers(1, 4)):
        c = rng.uniform(-2.0, 2.0, grid.d)
        width = rng.uniform(0.2, 1.5)
        amp = rng.uniform(0.1, amplitude)
        out += amp * np.exp(-np.sum((pts - c) ** 2, axis=-1) / width**2)
    noise = 1.0 + 0.3 * rng.standard_normal(grid.shape)
    return np.clip(out * noise, 0.0, None)


def random_face_field(ops: OperatorBundle, rng: np.random.Generator) -> list:
    F = ops.zero_faces()
    g = ops.grid
    for k in range(g.d):
        sl = [slice(None)] * g.d
        sl[k] = slice(1, g.n)
        F[k][tuple(sl)] = rng.standard_normal(F[k][tuple(sl)].shape)
    return F


@dataclass
class Check:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "pass": bool(self.passed),
            "value": float(self.value),
            "tolerance": float(self.tolerance),
            "detail": self.detail,
        }


def sbp_checks(ops: OperatorBundle, rng: np.random.Generator, pairs: int = 50) -> list[Check]:
    g, w = ops.grid, ops.weight
    dual, sym = 0.0, 0.0
    for _ in range(pairs):
        F = random_face_field(ops, rng)
        u = rng.standard_normal(g.shape)
        v = rng.standard_normal(g.shape)
        lhs = inner_l2_rho(ops.div_rho(F), u, g, w) + ops.face_inner(F, ops.grad(u))
        scale = math.sqrt(ops.face_inner(F, F)) * math.sqrt(inner_l2_rho(u, u, g, w))
        dual = max(dual, abs(lhs) / scale)
        s = inner_l2_rho(ops.apply_L(u), v, g, w) - inner_l2_rho(u, ops.apply_L(v), g, w)
        scale = math.sqrt(inner_l2_rho(u, u, g, w) * inner_l2_rho(v, v, g, w))
        sym = max(sym, abs(s) / scale)
    return [
        Check("sbp_duality", dual <= 1e-13, dual, 1e-13),
        Check("L_symmetry", sym <= 1e-12, sym, 1e-12),
    ]


def conservation_check(ops: OperatorBundle, rng: np.random.Generator, trials: int = 10) -> Check:
    worst = 0.0
    for _ in range(trials):
        u = random_density(ops.grid, rng) - 0.5
        Au = ops.apply_A0(u)
        total = mass_rho(Au, ops.grid, ops.weight)
        scale = norm_l1_rho(Au, ops.grid, ops.weight)
        worst = max(worst, abs(total) / scale if scale else 0.0)
    return Check("A0_conservation", worst <= 1e-12, worst, 1e-12)


def resolvent_trials(
    ops: OperatorBundle,
    rng: np.random.Generator,
    trials: int,
    config: ResolventConfig | None = None,
    lam_fraction: float = 0.9,
) -> dict:
    """Random ``(f, g, lam)`` trials; returns worst-case ratios of every property."""
    g, w = ops.grid, ops.weight
    lam0 = lambda_max_for(ops)
    lam_hi = lam_fraction * lam0 if math.isfinite(lam0) else 1.0
    c_half = math.sqrt(ops.drift_bound())
    worst = {"contraction": 0.0, "linf": 0.0, "positivity": 0.0, "mass": 0.0}
    failures = {k: 0 for k in worst}
    for _ in range(trials):
        f = random_density(g, rng)
        h = random_density(g, rng)
        lam = float(rng.uniform(0.0, lam_hi))
        while lam == 0.0:
            lam = float(rng.uniform(0.0, lam_hi))
        uf = solve_resolvent(ops, f, lam, config, lam0=lam0).u
        uh = solve_resolvent(ops, h, lam, config, lam0=lam0).u
        ratio = norm_l1_rho(uf - uh, g, w) / norm_l1_rho(f - h, g, w)
        worst["contraction"] = max(worst["contraction"], ratio)
        failures["contraction"] += ratio > 1.0 + 1e-8
        for src, out in ((f, uf), (h, uh)):
            bound = (1.0 + c_half) * norm_linf(src)
            excess = norm_linf(out) - bound
            worst["linf"] = max(worst["linf"], excess)
            failures["linf"] += excess > 1e-8
            neg = max(0.0, -float(out.min())) / norm_linf(src)
            worst["positivity"] = max(worst["positivity"], neg)
            failures["positivity"] += neg > 1e-12
            m_in = mass_rho(src, g, w)
            rel = abs(mass_rho(out, g, w) - m_in) / m_in
            worst["mass"] = max(worst["mass"], rel)
            failures["mass"] += rel > 1e-10
    return {"worst": worst, "failures": failures, "trials": trials, "lam0": lam0}


def identity_checks(
    ops: OperatorBundle,
    rng: np.random.Generator,
    trials: int,
    config: ResolventConfig | None = None,
) -> Check:
    config = config or ResolventConfig()
    lam0 = lambda_max_for(ops)
    lam_hi = 0.9 * lam0 if math.isfinite(lam0) else 1.0
    worst = 0.0
    for _ in range(trials):
        f = random_density(ops.grid, rng)
        lam1, lam2 = rng.uniform(0.05 * lam_hi, lam_hi, 2)
        res = check_resolvent_identity(ops, f, lam1, lam2, config)
        tol = config.tol * (1.0 + norm_l1_rho(f, ops.grid, ops.weight))
        worst = max(worst, res / tol)
    return Check("resolvent_identity", worst <= 10.0, worst, 10.0, "residual / solver tolerance")


def smooth_compact_field(grid: Grid, center=0.5, radius: float = 1.5) -> np.ndarray:
    """``C_c^inf`` bump used for the ``|J_lam g - g| <= C lam`` check."""
    pts = grid.cell_points()
    s = np.sum((pts - center) ** 2, axis=-1) / radius**2
    inside = s < 1.0
    return np.where(inside, np.exp(-1.0 / np.where(inside, 1.0 - s, 1.0)), 0.0) * math.e


def consistency_check(
    ops: OperatorBundle,
    lams=(1e-2, 1e-3, 1e-4),
    config: ResolventConfig | None = None,
) -> Check:
    g = smooth_compact_field(ops.grid)
    lam0 = lambda_max_for(ops)
    ratios = []
    for lam in lams:
        u = solve_resolvent(ops, g, lam, config, lam0=lam0).u
        ratios.append(norm_l1_rho(u - g, ops.grid, ops.weight) / lam)
    spread = (max(ratios) - min(ratios)) / max(ratios)
    return Check(
        "J_lambda_consistency",
        spread <= 0.5,
        spread,
        0.5,
        "ratios " + ", ".join(f"{r:.6e}" for r in ratios),
    )


def run_suite(
    ops: OperatorBundle,
    trials: int,
    seed: int = 0,
    config: ResolventConfig | None = None,
    identity_trials: int | None = None,
) -> list[Check]:
    """All resolvent-level properties; ``trials`` random contraction pairs."""
    if trials < 1:
        raise ValueError("validation needs at least one trial")
    rng = np.random.default_rng(seed)
    checks = sbp_checks(ops, rng)
    checks.append(conservation_check(ops, rng))
    res = resolvent_trials(ops, rng, trials, config)
    wv, fv = res["worst"], res["failures"]
    checks += [
        Check("contraction", fv["contraction"] == 0, wv["contraction"], 1.0 + 1e-8,
              f"{fv['contraction']} of {trials} trials violate"),
        Check("linf_bound", fv["linf"] == 0, wv["linf"], 1e-8, "max excess over (1+c^1/2)|f|_inf"),
        Check("positivity", fv["positivity"] == 0, wv["positivity"], 1e-12),
        Check("mass", fv["mass"] == 0, wv["mass"], 1e-10),
    ]
    n_id = identity_trials if identity_trials is not None else max(1, min(trials, 20))
    checks.append(identity_checks(ops, rng, n_id, config))
    checks.append(consistency_check(ops, config=config))
    return checks
