"""Particle counterpart of the PDE: the McKean-Vlasov SDE

    dX = [D(X) b(u) - beta(u)/u grad Phi(X)] dt + sqrt(2 beta(u)/u) dB,
    u = v / rho,  Law(X_t) = v(t, x) dx,

simulated by Euler-Maruyama with the density taken either from a PDE
trajectory or from a kernel density estimate of the particles themselves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats
from scipy.interpolate import RegularGridInterpolator
from scipy.ndimage import gaussian_filter

from .discrete_ops import OperatorBundle
from .model import Grid, Potential, Weight, norm_l1_rho
from .semigroup import Trajectory, beta_quotient

U_FLOOR = 1e-12


class ParticleEscape(RuntimeError):
    """A particle left the box even after reflection."""


class DegenerateKDE(RuntimeError):
    """All particles collapsed onto one point."""


class CFLViolation(ValueError):
    """Explicit step exceeds the positivity limit."""


# ---------------------------------------------------------------------------
# Ornstein-Uhlenbeck oracle


def ou_exact_marginal(m0, var0: float, sigma: float, t: float, theta: float = 1.0):
    """Mean and variance of ``dX = -theta X dt + sigma dB`` from ``N(m0, var0)``."""
    if var0 < 0 or sigma <= 0:
        raise ValueError("need var0 >= 0 and sigma > 0")
    decay = math.exp(-theta * t)
    mean = np.asarray(m0, dtype=float) * decay
    var = var0 * decay**2 + sigma**2 / (2.0 * theta) * (1.0 - decay**2)
    return mean, var


def ou_rates(beta_slope: float, potential_scale: float = 1.0) -> tuple[float, float]:
    """``(theta, sigma)`` of the OU process behind ``beta(r) = c r``, ``Phi = a|x|^2/2``."""
    return beta_slope * potential_scale, math.sqrt(2.0 * beta_slope)


def gaussian_density(points: np.ndarray, mean, var: float) -> np.ndarray:
    """Isotropic ``N(mean, var I)`` Lebesgue density at ``points[..., d]``."""
    d = points.shape[-1]
    r2 = np.sum((points - np.asarray(mean, dtype=float)) ** 2, axis=-1)
    return np.exp(-r2 / (2.0 * var)) / (2.0 * math.pi * var) ** (d / 2)


def gaussian_l1_error(grid: Grid, weight: Weight, u: np.ndarray, mean, var: float) -> float:
    """``int |u rho - N(mean, var)| dx`` with the cell-centre rule."""
    exact = gaussian_density(grid.cell_points(), mean, var)
    return float(np.sum(np.abs(u * weight.cells - exact)) * grid.cell_volume)


# ---------------------------------------------------------------------------
# ensembles and sampling


@dataclass
class ParticleEnsemble:
    positions: np.ndarray  # (N, d)
    t: float
    seed: int
    stream: np.ndarray = field(default=None)

    def __post_init__(self) -> None:
        self.positions = np.asarray(self.positions, dtype=float)
        if self.positions.ndim == 1:
            self.positions = self.positions[:, None]
        if self.positions.shape[0] < 1:
            raise ValueError("ensemble needs at least one particle")
        if self.stream is None:
            self.stream = np.arange(self.positions.shape[0])

    @property
    def N(self) -> int:
        return self.positions.shape[0]


@dataclass
class ParticleRun:
    ensembles: list
    dt: float
    diffusion_min: float = 0.0

    @property
    def times(self) -> np.ndarray:
        return np.array([e.t for e in self.ensembles])

    def at(self, t: float) -> ParticleEnsemble:
        k = int(np.argmin(np.abs(self.times - t)))
        return self.ensembles[k]


def _cdf_on_faces(grid: Grid, weight: Weight, u: np.ndarray, axis_field: np.ndarray | None = None):
    v = np.clip(u * weight.cells, 0.0, None) if axis_field is None else axis_field
    cell_mass = v * grid.dx
    cdf = np.concatenate([[0.0], np.cumsum(cell_mass)])
    if cdf[-1] <= 0:
        raise ValueError("field has no positive mass")
    return cdf / cdf[-1]


def sample_from_field(grid: Grid, weight: Weight, u: np.ndarray, N: int, rng) -> np.ndarray:
    """Draw ``N`` points from ``v = u rho`` (piecewise constant on cells)."""
    u = grid.check_field(u)
    if grid.d == 1:
        cdf = _cdf_on_faces(grid, weight, u)
        q = rng.random(N)
        return np.interp(q, cdf, grid.faces)[:, None]
    v = np.clip(u * weight.cells, 0.0, None).ravel()
    p = v / v.sum()
    cells = rng.choice(v.size, size=N, p=p)
    idx = np.stack(np.unravel_index(cells, grid.shape), axis=-1)
    return grid.centers[idx] + (rng.random((N, grid.d)) - 0.5) * grid.dx


# ---------------------------------------------------------------------------
# SDE coefficients


class FieldLookup:
    """Piecewise-linear interpolation of a cell field (flat outside the centres)."""

    def __init__(self, grid: Grid, u: np.ndarray) -> None:
        self.grid = grid
        self.u = np.asarray(u, dtype=float)
        if grid.d > 1:
            self._interp = RegularGridInterpolator(
                (grid.centers,) * grid.d, self.u, bounds_error=False, fill_value=None
            )

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if self.grid.d == 1:
            return np.interp(x[:, 0], self.grid.centers, self.u)
        c = self.grid.centers
        return self._interp(np.clip(x, c[0], c[-1]))


@dataclass
class SdeCoefficients:
    """Drift and diffusion evaluated with a density ``u`` read at the particles."""

    ops: OperatorBundle
    potential: Potential

    def evaluate(self, x: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
        c = self.ops.coefficients
        q = beta_quotient(c.beta, c.dbeta, u)
        qmin = float(np.min(q)) if q.size else 0.0
        if qmin < -1e-14:
            raise ValueError(f"negative diffusion coefficient 2 beta(u)/u = {2 * qmin:.3e}")
        drift = c.D(x) * c.b(u)[:, None] - q[:, None] * self.potential.gradient(x)
        diffusion = np.sqrt(2.0 * np.clip(q, 0.0, None))
        return drift, diffusion, qmin


def reflect(x: np.ndarray, R: float) -> np.ndarray:
    y = np.where(x > R, 2.0 * R - x, x)
    y = np.where(y < -R, -2.0 * R - y, y)
    if np.any(np.abs(y) > R):
        raise ParticleEscape("particle escaped the box after reflection; enlarge the domain")
    return y


def _noise(seed: int, step: int, N: int, d: int) -> np.ndarray:
    """Gaussian increments for one step; keyed by (seed, step) so runs are reproducible."""
    gen = np.random.Generator(np.random.Philox(key=int(seed), counter=[0, 0, 0, int(step)]))
    return gen.standard_normal((N, d))


def _em_loop(
    x: np.ndarray,
    dt: float,
    T: float,
    seed: int,
    density_at: Callable,
    sde: SdeCoefficients,
    record,
) -> ParticleRun:
    R = sde.ops.grid.R
    n = max(1, int(round(T / dt)))
    if abs(n * dt - T) > 1e-9 * max(T, 1.0):
        raise ValueError(f"T = {T} is not a multiple of dt = {dt}")
    record_steps = {int(round(t / dt)) for t in record} | {n}
    ens = [ParticleEnsemble(x.copy(), 0.0, seed)]
    qmin = math.inf
    for k in range(n):
        u = density_at(k, x)
        drift, diffusion, qm = sde.evaluate(x, u)
        qmin = min(qmin, qm)
        x = x + drift * dt + diffusion[:, None] * math.sqrt(dt) * _noise(seed, k, *x.shape)
        x = reflect(x, R)
        if k + 1 in record_steps:
            ens.append(ParticleEnsemble(x.copy(), (k + 1) * dt, seed))
    return ParticleRun(ens, dt, diffusion_min=2.0 * qmin)


def simulate_pde_driven(
    ops: OperatorBundle,
    potential: Potential,
    x0: np.ndarray,
    trajectory: Trajectory,
    dt: float,
    T: float,
    seed: int,
    record=(),
) -> ParticleRun:
    """Euler-Maruyama with ``u`` frozen from the PDE run.

    The density at time ``t`` is the latest stored PDE snapshot at or before
    ``t``, interpolated linearly in space.
    """
    if trajectory.times[-1] < T - 1e-12:
        raise ValueError("PDE trajectory does not cover [0, T]")
    if dt > trajectory.h * (1 + 1e-12):
        raise ValueError("particle step must not exceed the PDE step")
    x = np.asarray(x0, dtype=float).reshape(len(x0), -1)
    lookups = [FieldLookup(ops.grid, u) for u in trajectory.fields]
    times = trajectory.times
    sde = SdeCoefficients(ops, potential)

    def density_at(k, pos):
        j = int(np.searchsorted(times, k * dt + 1e-12 * dt, side="right") - 1)
        return lookups[max(j, 0)](pos)

    return _em_loop(x, dt, T, seed, density_at, sde, record)


def silverman_bandwidth(x: np.ndarray) -> float:
    N = x.shape[0]
    sd = float(np.min(np.std(x, axis=0, ddof=1))) if N > 1 else 0.0
    iqr = float(np.min(stats.iqr(x, axis=0))) / 1.34 if N > 1 else 0.0
    spread = min(sd, iqr) if iqr > 0 else sd
    return 0.9 * spread * N ** (-0.2)


def kde_on_grid(grid: Grid, x: np.ndarray, bandwidth: float | None = None) -> np.ndarray:
    """Binned Gaussian KDE of the particles, as a Lebesgue density on the cells."""
    N = x.shape[0]
    if bandwidth is None:
        bandwidth = silverman_bandwidth(x)
        if bandwidth <= 0:
            if N > 1:
                raise DegenerateKDE("all particles collapsed; Silverman bandwidth is zero")
            bandwidth = 2.0 * grid.dx
    counts, _ = np.histogramdd(x, bins=[grid.faces] * grid.d)
    v = counts / (N * grid.cell_volume)
    return gaussian_filter(v, sigma=bandwidth / grid.dx, mode="reflect", truncate=5.0)


def simulate_self_consistent(
    ops: OperatorBundle,
    potential: Potential,
    x0: np.ndarray,
    bandwidth: float | None,
    dt: float,
    T: float,
    seed: int,
    record=(),
) -> ParticleRun:
    """Euler-Maruyama where ``u`` is re-estimated from the particles every step."""
    if bandwidth is not None and bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    x = np.asarray(x0, dtype=float).reshape(len(x0), -1)
    sde = SdeCoefficients(ops, potential)
    rho = ops.weight.cells

    def density_at(k, pos):
        v = kde_on_grid(ops.grid, pos, bandwidth)
        u = np.clip(v / rho, U_FLOOR, None)
        return FieldLookup(ops.grid, u)(pos)

    return _em_loop(x, dt, T, seed, density_at, sde, record)


# ---------------------------------------------------------------------------
# marginal comparison


def _w1_vs_cdf(samples: np.ndarray, faces: np.ndarray, cdf: np.ndarray) -> float:
    """Exact ``int |F_N - F|`` for an empirical CDF against a piecewise-linear one."""
    s = np.sort(samples)
    N = s.size
    pts = np.union1d(faces, np.clip(s, faces[0], faces[-1]))
    a, b = pts[:-1], pts[1:]
    FN = np.searchsorted(s, a, side="right") / N
    Fa = np.interp(a, faces, cdf)
    Fb = np.interp(b, faces, cdf)
    p, q = FN - Fa, FN - Fb
    width = b - a
    same = p * q >= 0
    area_same = width * np.abs(p + q) / 2.0
    denom = np.where(same, 1.0, np.abs(p) + np.abs(q))
    area_cross = width * (p * p + q * q) / (2.0 * denom)
    return float(np.sum(np.where(same, area_same, area_cross)))


def wasserstein1_to_field(samples: np.ndarray, grid: Grid, weight: Weight, u: np.ndarray) -> float:
    """1D ``W1`` between particles and ``v = u rho``; in 2D the mean over axis marginals."""
    samples = np.asarray(samples, dtype=float).reshape(len(samples), -1)
    v = np.clip(u * weight.cells, 0.0, None)
    out = []
    for k in range(grid.d):
        marg = v if grid.d == 1 else v.sum(axis=1 - k) * grid.dx
        cdf = _cdf_on_faces(grid, weight, u, axis_field=marg)
        out.append(_w1_vs_cdf(samples[:, k], grid.faces, cdf))
    return float(np.mean(out))


def wasserstein1_samples(a, b) -> float:
    return float(stats.wasserstein_distance(np.ravel(a), np.ravel(b)))


def compare_marginals(
    ensemble: ParticleEnsemble | np.ndarray, grid: Grid, weight: Weight, u: np.ndarray
) -> tuple[float, float]:
    """``(L1, W1)`` distances between the particle law and ``v = u rho``."""
    x = ensemble.positions if isinstance(ensemble, ParticleEnsemble) else np.asarray(ensemble)
    x = x.reshape(len(x), -1)
    if x.shape[0] == 0:
        raise ValueError("empty ensemble")
    counts, _ = np.histogramdd(x, bins=[grid.faces] * grid.d)
    hist = counts / (x.shape[0] * grid.cell_volume)
    v = u * weight.cells
    l1 = float(np.sum(np.abs(hist - v)) * grid.cell_volume)
    return l1, wasserstein1_to_field(x, grid, weight, u)


def self_sampling_baseline(
    grid: Grid, weight: Weight, u: np.ndarray, N: int, seed: int, repeats: int = 5
) -> float:
    """Median ``W1`` of ``N`` exact draws from ``v`` against ``v`` itself."""
    vals = []
    for r in range(repeats):
        rng = np.random.default_rng([seed, r])
        vals.append(wasserstein1_to_field(sample_from_field(grid, weight, u, N, rng), grid, weight, u))
    return float(np.median(vals))


def moments(x: np.ndarray) -> dict:
    x = np.asarray(x, dtype=float).reshape(len(x), -1)
    N = x.shape[0]
    mean = x.mean(axis=0)
    var = x.var(axis=0, ddof=1) if N > 1 else np.zeros(x.shape[1])
    m4 = np.mean((x - mean) ** 4, axis=0)
    se_var = np.sqrt(np.maximum(m4 - var**2, 0.0) / N)
    return {"mean": mean, "var": var, "se_mean": np.sqrt(var / N), "se_var": se_var}


def field_moments(grid: Grid, weight: Weight, u: np.ndarray) -> dict:
    """Mean and variance of ``v = u rho`` (piecewise constant on cells, 1D exact)."""
    v = u * weight.cells
    pts = grid.cell_points()
    w = v * grid.cell_volume
    total = w.sum()
    mean = np.tensordot(w, pts, axes=grid.d) / total
    second = np.tensordot(w, pts**2, axes=grid.d) / total
    var = second - mean**2 + grid.dx**2 / 12.0
    return {"mean": mean, "var": var, "mass": total}


# ---------------------------------------------------------------------------
# linearized equation


@dataclass
class LinearizedFlowResult:
    residual: float
    zeta: np.ndarray
    dt: float
    steps: int


def _explicit_rates(ops: OperatorBundle, y: np.ndarray):
    """Face data of ``w -> L(a(y) w) - div_rho(b(y) D w)`` with ``a = beta(y)/y``."""
    c = ops.coefficients
    a = beta_quotient(c.beta, c.dbeta, y)
    bv = c.b(y)
    if c.b_is_zero or c.D_is_zero:
        drift = np.zeros_like(ops.face_rho)
    else:
        drift = ops.drift_weights()
    return a, bv, drift


def _explicit_step(ops: OperatorBundle, w: np.ndarray, a, bv, drift, dt) -> np.ndarray:
    i, j = ops.left, ops.right
    aw = a * w
    Q = ops.conductance * (aw[i] - aw[j])
    if np.any(drift):
        up = np.where(drift > 0, i, j)
        Q = Q + drift * bv[up] * w[up]
    return w - dt * ops._scatter(Q) / ops.mass


def explicit_dt_limit(ops: OperatorBundle, y: np.ndarray) -> float:
    """Largest ``dt`` for which the explicit update is positivity preserving."""
    a, bv, drift = _explicit_rates(ops, y)
    i, j = ops.left, ops.right
    size = ops.grid.size
    out = np.bincount(i, ops.conductance * a[i], size) + np.bincount(j, ops.conductance * a[j], size)
    out += np.bincount(i, np.where(drift > 0, drift * bv[i], 0.0), size)
    out += np.bincount(j, np.where(drift < 0, -drift * bv[j], 0.0), size)
    rate = np.max(out / ops.mass)
    return float("inf") if rate == 0 else 1.0 / rate


def linearized_flow_check(
    ops: OperatorBundle,
    trajectory: Trajectory,
    s: float,
    t: float,
    dt: float | None = None,
    cfl: float = 0.9,
    frozen: Callable | None = None,
) -> LinearizedFlowResult:
    """Solve the frozen-coefficient linear equation from ``u(s)`` to ``t`` explicitly.

    On each PDE step ``((i-1)h, ih]`` the coefficients use ``y = u^i``, the
    implicit scheme's step function. ``frozen`` may replace ``y`` (a map
    ``(index, field) -> field``) for sensitivity checks. Returns the l1(rho)
    distance between the explicit solution and the PDE field at ``t``.
    """
    h = trajectory.h
    if len(trajectory.fields) != len(trajectory.step_times):
        raise ValueError("linearized check needs an unthinned trajectory")
    i_s = int(round(s / h))
    i_t = int(round(t / h))
    if not (0 <= i_s <= i_t < len(trajectory.fields)):
        raise ValueError("need 0 <= s <= t within the trajectory")
    w = trajectory.fields[i_s].ravel().copy()
    total = 0
    used_dt = 0.0
    for i in range(i_s + 1, i_t + 1):
        y = trajectory.fields[i].ravel()
        if frozen is not None:
            y = np.asarray(frozen(i, trajectory.fields[i])).ravel()
        a, bv, drift = _explicit_rates(ops, y)
        limit = explicit_dt_limit(ops, y)
        if dt is None:
            k = max(1, math.ceil(h / (cfl * limit)))
        else:
            if dt > limit * (1 + 1e-12):
                raise CFLViolation(f"dt = {dt:.3e} exceeds the explicit limit {limit:.3e}")
            k = max(1, math.ceil(h / dt - 1e-9))
        sub = h / k
        for _ in range(k):
            w = _explicit_step(ops, w, a, bv, drift, sub)
        total += k
        used_dt = max(used_dt, sub)
    zeta = w.reshape(ops.grid.shape)
    resid = norm_l1_rho(zeta - trajectory.fields[i_t], ops.grid, ops.weight)
    return LinearizedFlowResult(resid, zeta, used_dt, total)
