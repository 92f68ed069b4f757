"""Implicit Euler (Crandall-Liggett) time stepping and its monitors."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .discrete_ops import OperatorBundle
from .model import mass_rho, norm_l1_rho, norm_linf
from .resolvent import (
    ResolventConfig,
    StepSizeError,
    lambda_max_for,
    solve_resolvent,
)

MAX_STORED = 256
QUOTIENT_CUTOFF = 1e-12


@dataclass
class Trajectory:
    """Fields ``u(t_k)`` of one run plus per-step monitors.

    ``times``/``fields`` hold the stored snapshots; the monitor arrays cover
    every step ``0..n``.
    """

    h: float
    times: np.ndarray
    fields: list
    step_times: np.ndarray
    mass: np.ndarray
    linf: np.ndarray
    minimum: np.ndarray
    residuals: np.ndarray
    diagnostics: list = field(default_factory=list)
    breaches: list = field(default_factory=list)

    @property
    def final(self) -> np.ndarray:
        return self.fields[-1]

    @property
    def initial(self) -> np.ndarray:
        return self.fields[0]


def _stored_steps(n: int) -> np.ndarray:
    if n <= MAX_STORED:
        return np.arange(n + 1)
    stride = math.ceil(n / MAX_STORED)
    keep = np.arange(0, n + 1, stride)
    if keep[-1] != n:
        keep = np.append(keep, n)
    return keep


def step(
    ops: OperatorBundle,
    u: np.ndarray,
    h: float,
    config: ResolventConfig | None = None,
    lam0: float | None = None,
):
    """One implicit Euler step ``J_h u``; returns the :class:`ResolventResult`."""
    return solve_resolvent(ops, u, h, config, lam0=lam0)


def evolve(
    ops: OperatorBundle,
    u0: np.ndarray,
    T: float,
    n: int,
    config: ResolventConfig | None = None,
    linf_check: bool = True,
) -> Trajectory:
    """``n`` implicit Euler steps of size ``T / n`` from ``u0``."""
    if T <= 0 or n < 1:
        raise ValueError("need T > 0 and n >= 1")
    u = ops.grid.check_field(u0, "u0").copy()
    h = T / n
    lam0 = lambda_max_for(ops)
    if h >= lam0:
        raise StepSizeError(f"step h = {h:.6g} is not below lam_0 = {lam0:.6g}")
    keep = set(_stored_steps(n).tolist())
    g, w = ops.grid, ops.weight
    c = math.sqrt(ops.drift_bound()) if ops.coefficients is not None else 0.0
    u0_inf = norm_linf(u)

    mass = np.empty(n + 1)
    linf = np.empty(n + 1)
    mins = np.empty(n + 1)
    resid = np.zeros(n + 1)
    mass[0], linf[0], mins[0] = mass_rho(u, g, w), norm_linf(u), float(u.min())
    times, fields, diags, breaches = [0.0], [u.copy()], [], []
    for k in range(1, n + 1):
        res = solve_resolvent(ops, u, h, config, lam0=lam0, u_init=u)
        u = res.u
        mass[k] = mass_rho(u, g, w)
        linf[k] = norm_linf(u)
        mins[k] = float(u.min())
        resid[k] = res.residual
        diags.append({"step": k, "residual": res.residual, "iterations": res.iterations})
        if linf_check and linf[k] > math.exp(c * k * h) * u0_inf * (1 + 1e-6) + 1e-300:
            breaches.append({"step": k, "linf": linf[k], "bound": math.exp(c * k * h) * u0_inf})
        if k in keep:
            times.append(k * h)
            fields.append(u.copy())
    return Trajectory(
        h=h,
        times=np.asarray(times),
        fields=fields,
        step_times=np.arange(n + 1) * h,
        mass=mass,
        linf=linf,
        minimum=mins,
        residuals=resid,
        diagnostics=diags,
        breaches=breaches,
    )


def check_semigroup_property(
    ops: OperatorBundle,
    u0: np.ndarray,
    t: float,
    s: float,
    n: int,
    config: ResolventConfig | None = None,
    n_s: int | None = None,
    n_t: int | None = None,
) -> float:
    """``| S(t+s) u0 - S(t) S(s) u0 |_{1,rho}`` for the discrete flows.

    ``n`` steps cover ``[0, t + s]``; by default the split uses the same
    step size on both sides (matched resolution). Pass ``n_s``/``n_t`` to
    compare against a differently resolved composition.
    """
    g, w = ops.grid, ops.weight
    u0 = g.check_field(u0)
    full = evolve(ops, u0, t + s, n, config).final if t + s > 0 else u0
    if n_s is None:
        n_s = round(n * s / (t + s)) if t + s > 0 else 0
    if n_t is None:
        n_t = n - n_s
    mid = evolve(ops, u0, s, n_s, config).final if s > 0 else u0
    comp = evolve(ops, mid, t, n_t, config).final if t > 0 else mid
    return norm_l1_rho(full - comp, g, w)


def check_linf_growth(trajectory: Trajectory, drift_bound: float) -> float:
    """``max_k |u(t_k)|_inf / (exp(c^{1/2} t_k) |u_0|_inf)``; 0 for a zero start."""
    u0 = trajectory.linf[0]
    if u0 == 0.0:
        return 0.0
    growth = np.exp(math.sqrt(drift_bound) * trajectory.step_times) * u0
    return float(np.max(trajectory.linf / growth))


def beta_quotient(beta: Callable, dbeta: Callable, u: np.ndarray) -> np.ndarray:
    """``beta(u) / u`` with the removable singularity filled by ``beta'(0)``."""
    u = np.asarray(u, dtype=float)
    small = np.abs(u) < QUOTIENT_CUTOFF
    safe = np.where(small, 1.0, u)
    return np.where(small, dbeta(np.zeros_like(u)), beta(safe) / safe)


@dataclass(frozen=True)
class TestFunction:
    """Smooth test function with analytic gradient and Laplacian."""

    __test__ = False

    value: Callable
    gradient: Callable
    laplacian: Callable
    name: str = "phi"


def constant_test_function(c: float = 1.0) -> TestFunction:
    return TestFunction(
        lambda x: np.full(x.shape[:-1], float(c)),
        lambda x: np.zeros(x.shape),
        lambda x: np.zeros(x.shape[:-1]),
        f"const({c})",
    )


def gaussian_test_function(center, width: float = 1.0) -> TestFunction:
    """``phi(x) = exp(-|x - c|^2 / width^2)``."""
    c = np.atleast_1d(np.asarray(center, dtype=float))
    a = 1.0 / width**2

    def value(x):
        return np.exp(-a * np.sum((x - c) ** 2, axis=-1))

    def gradient(x):
        return -2.0 * a * (x - c) * value(x)[..., None]

    def laplacian(x):
        r2 = np.sum((x - c) ** 2, axis=-1)
        return (4.0 * a * a * r2 - 2.0 * a * x.shape[-1]) * value(x)

    return TestFunction(value, gradient, laplacian, f"gauss({c.tolist()},{width})")


def bump_test_function(center, radius: float = 1.0) -> TestFunction:
    """``phi(x) = exp(-1 / (1 - |x - c|^2 / radius^2))`` inside the ball, else 0."""
    c = np.atleast_1d(np.asarray(center, dtype=float))

    def _parts(x):
        y = (x - c) / radius
        s = np.sum(y * y, axis=-1)
        inside = s < 1.0
        q = np.where(inside, 1.0 - s, 1.0)
        val = np.where(inside, np.exp(-1.0 / q), 0.0)
        return y, s, q, inside, val

    def value(x):
        return _parts(x)[-1]

    def gradient(x):
        y, _, q, inside, val = _parts(x)
        fac = np.where(inside, -2.0 * val / (q * q) / radius, 0.0)
        return fac[..., None] * y

    def laplacian(x):
        y, s, q, inside, val = _parts(x)
        d = x.shape[-1]
        # phi = exp(-1/q), q = 1 - s; derivatives in scaled variable y
        lap = val * (4.0 * s / q**4 - 2.0 * d / q**2 - 8.0 * s / q**3)
        return np.where(inside, lap / radius**2, 0.0)

    return TestFunction(value, gradient, laplacian, f"bump({c.tolist()},{radius})")


def weak_form_integrand(ops: OperatorBundle, potential, u: np.ndarray, phi: TestFunction) -> float:
    """``int [beta(u)/u L phi + b(u) D . grad phi] u rho dx`` on the grid."""
    c = ops.coefficients
    pts = ops.grid.cell_points()
    grad_phi = phi.gradient(pts)
    L_phi = phi.laplacian(pts) - np.sum(potential.gradient(pts) * grad_phi, axis=-1)
    q = beta_quotient(c.beta, c.dbeta, u)
    drift = np.sum(c.D(pts) * grad_phi, axis=-1) * c.b(u)
    integrand = (q * L_phi + drift) * u * ops.weight.cells
    return float(np.sum(integrand) * ops.grid.cell_volume)


def weak_form_residual(
    trajectory: Trajectory, ops: OperatorBundle, potential, phi: TestFunction
) -> float:
    """Defect of the distributional formulation at the final stored time.

    Time integral by the trapezoid rule over the stored snapshots. ``phi``
    must have negligible gradient on the walls; its value there is free
    because the discrete fluxes vanish at the walls.
    """
    g = ops.grid
    pts = g.cell_points()
    # zero-flux walls kill the flux terms, so only grad phi must vanish there
    walls = []
    for k in range(g.d):
        fp = g.face_points(k)
        walls.append(np.take(fp, [0, g.n], axis=k).reshape(-1, g.d))
    peak = np.max(np.abs(phi.gradient(pts)))
    if peak > 0 and np.max(np.abs(phi.gradient(np.concatenate(walls)))) > 1e-10 * peak:
        raise ValueError(f"test function {phi.name} has a non-negligible gradient on the domain walls")
    phi_c = phi.value(pts)
    lhs = np.sum(phi_c * trajectory.final * ops.weight.cells) * g.cell_volume
    start = np.sum(phi_c * trajectory.initial * ops.weight.cells) * g.cell_volume
    vals = np.array([weak_form_integrand(ops, potential, u, phi) for u in trajectory.fields])
    integral = np.trapezoid(vals, trajectory.times) if len(vals) > 1 else 0.0
    return float(abs(lhs - start - integral))
