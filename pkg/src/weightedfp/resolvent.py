"""The resolvent ``J_lam f``: solution of ``u + lam A0(u) = f``.

The discrete system is solved through a continuation in the regularization
parameter: each ``eps`` of a geometric schedule solves the regularized
equation ``u - lam L beta_eps~(u) + lam eps beta_eps~(u) + lam div_rho(D_eps
b*_eps(u)) = f`` by damped Newton, warm-starting the next level, and a final
Newton solve on the unregularized equation produces the answer.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .discrete_ops import FluxModel, OperatorBundle
from .model import b_sup, norm_l1_rho
from .regularize import RegularizedCoefficients

log = logging.getLogger(__name__)


class ResolventError(RuntimeError):
    """Newton did not reach the tolerance."""

    def __init__(self, msg: str, residual: float = float("nan")) -> None:
        super().__init__(msg)
        self.residual = residual


class StepSizeError(ValueError):
    """Requested ``lam`` is not below ``lam_0``."""


@dataclass(frozen=True)
class ResolventConfig:
    eps0: float = 1e-1
    eps_ratio: float = 0.25
    eps_floor: float = 1e-6
    tol: float = 1e-10
    max_newton: int = 100
    max_halvings: int = 30
    continuation: bool = True

    def schedule(self) -> list[float]:
        if not self.continuation:
            return []
        out, eps = [], self.eps0
        while eps >= self.eps_floor * (1 - 1e-12):
            out.append(eps)
            eps *= self.eps_ratio
        return out


@dataclass
class ResolventResult:
    u: np.ndarray
    residual: float
    iterations: dict = field(default_factory=dict)
    eps_floor: float | None = None
    tolerance: float = 0.0


def lambda_max(drift_bound: float, b_bound: float) -> float:
    """``lam_0 = [(c + c^{1/2}) |b|_inf]^{-1}`` with ``c = |(div_rho D)^- + |D||_inf``."""
    den = (drift_bound + np.sqrt(drift_bound)) * b_bound
    return float("inf") if den == 0.0 else 1.0 / den


def lambda_max_for(ops: OperatorBundle) -> float:
    c = ops.coefficients
    if c.b_is_zero or c.D_is_zero:
        return float("inf")
    return lambda_max(ops.drift_bound(), b_sup(c))


def _log(**rec) -> None:
    if log.isEnabledFor(logging.DEBUG):
        log.debug(json.dumps(rec, sort_keys=True))


def _newton(
    ops: OperatorBundle,
    model: FluxModel,
    f: np.ndarray,
    lam: float,
    u: np.ndarray,
    tol: float,
    config: ResolventConfig,
    eps_label: float,
) -> tuple[np.ndarray, float, int, bool]:
    """Damped Newton on ``m (u - f) + lam m A(u)`` with l1 line search."""
    m = ops.mass
    diag = sp.diags(m, format="csc")

    def residual(v):
        F = m * (v - f) + lam * ops.residual_mass(v, model)
        return F, float(np.sum(np.abs(F)))

    F, res = residual(u)
    it = 0
    polished = False
    while True:
        if not np.isfinite(res):
            return u, res, it, False
        if res <= tol:
            if polished or res == 0.0:
                return u, res, it, True
            polished = True
        if it >= config.max_newton:
            return u, res, it, res <= tol
        _, JA = ops.jacobian_mass(u, model)
        J = diag + lam * JA
        try:
            delta = spsolve(J, -F)
        except RuntimeError as exc:  # pragma: no cover - singular LU
            raise ResolventError(f"singular Jacobian at eps={eps_label}: {exc}", res) from exc
        if not np.all(np.isfinite(delta)):
            raise ResolventError(f"singular Jacobian at eps={eps_label}", res)
        t = 1.0
        for _ in range(config.max_halvings + 1):
            trial = u + t * delta
            F_new, res_new = residual(trial)
            if res_new <= (1.0 - 1e-4 * t) * res or res_new <= 0.5 * tol:
                break
            t *= 0.5
        else:
            return u, res, it, res <= tol
        it += 1
        _log(eps=eps_label, iteration=it, residual=res_new, step=t)
        if polished and res_new >= res:
            return u, res, it, True
        u, F, res = trial, F_new, res_new


def solve_resolvent_eps(
    ops: OperatorBundle,
    f: np.ndarray,
    lam: float,
    eps: float,
    config: ResolventConfig | None = None,
    u_init: np.ndarray | None = None,
) -> np.ndarray:
    """Solve the eps-regularized resolvent equation; returns the field."""
    config = config or ResolventConfig()
    f = ops.grid.check_field(f, "f")
    reg = RegularizedCoefficients(eps, ops.coefficients)
    model = ops.flux_model(reg)
    u0 = f if u_init is None else ops.grid.check_field(u_init, "u_init")
    tol = config.tol * (1.0 + norm_l1_rho(f, ops.grid, ops.weight))
    u, res, _, ok = _newton(ops, model, f.ravel(), lam, u0.ravel().copy(), tol, config, eps)
    if not ok:
        raise ResolventError(f"regularized Newton failed at eps={eps}: residual {res:.3e}", res)
    return u.reshape(ops.grid.shape)


def solve_resolvent(
    ops: OperatorBundle,
    f: np.ndarray,
    lam: float,
    config: ResolventConfig | None = None,
    lam0: float | None = None,
    u_init: np.ndarray | None = None,
) -> ResolventResult:
    """``J_lam f`` with continuation in eps and a final unregularized solve."""
    config = config or ResolventConfig()
    f = ops.grid.check_field(f, "f")
    if not np.all(np.isfinite(f)):
        raise ValueError("f must be finite")
    if lam <= 0:
        raise StepSizeError(f"lam must be positive, got {lam}")
    if lam0 is None:
        lam0 = lambda_max_for(ops)
    if lam >= lam0:
        raise StepSizeError(f"lam = {lam:.6g} is not below lam_0 = {lam0:.6g}")

    f_flat = f.ravel()
    tol = config.tol * (1.0 + norm_l1_rho(f, ops.grid, ops.weight))
    u = (f_flat if u_init is None else u_init.ravel()).copy()
    iterations: dict = {}
    floor = None
    for eps in config.schedule():
        model = ops.flux_model(RegularizedCoefficients(eps, ops.coefficients))
        u_new, res, it, ok = _newton(ops, model, f_flat, lam, u.copy(), tol, config, eps)
        iterations[eps] = it
        if ok:
            u = u_new
            floor = eps
        else:
            _log(eps=eps, event="level_not_converged", residual=res)
            if np.all(np.isfinite(u_new)):
                u = u_new
    model = ops.flux_model(None)
    u, res, it, ok = _newton(ops, model, f_flat, lam, u, tol, config, 0.0)
    iterations[0.0] = it
    if not ok:
        raise ResolventError(f"resolvent did not converge: residual {res:.3e} > {tol:.3e}", res)
    return ResolventResult(
        u=u.reshape(ops.grid.shape),
        residual=res,
        iterations=iterations,
        eps_floor=floor,
        tolerance=tol,
    )


def check_resolvent_identity(
    ops: OperatorBundle,
    f: np.ndarray,
    lam1: float,
    lam2: float,
    config: ResolventConfig | None = None,
) -> float:
    """``| J_lam2 f - J_lam1(lam1/lam2 f + (1 - lam1/lam2) J_lam2 f) |_{1,rho}``."""
    u2 = solve_resolvent(ops, f, lam2, config).u
    q = lam1 / lam2
    rhs = solve_resolvent(ops, q * f + (1.0 - q) * u2, lam1, config).u
    return norm_l1_rho(u2 - rhs, ops.grid, ops.weight)
