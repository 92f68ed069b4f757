"""Continuous problem data, truncated grids and weighted norms.

Fields on a :class:`Grid` are plain ``numpy`` arrays of shape ``grid.shape``
holding the density ``u`` with respect to the reference measure ``rho dx``.
The Lebesgue density is ``v = u * rho``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ArrayFn = Callable[[np.ndarray], np.ndarray]

#: ``rho(boundary) / rho(0) <= 1e-8`` corresponds to this potential rise.
DEFAULT_MARGIN = float(np.log(1e8))


class HypothesisViolation(ValueError):
    """A sampled structural check on the problem data failed."""

    def __init__(self, check: str, location=None, detail: str = "") -> None:
        self.check = check
        self.location = location
        msg = f"hypothesis check '{check}' failed"
        if location is not None:
            msg += f" at {location}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


# ---------------------------------------------------------------------------
# grid


@dataclass(frozen=True)
class Grid:
    """Uniform cell-centred mesh on ``[-R, R]^d``."""

    d: int
    R: float
    n: int

    def __post_init__(self) -> None:
        if self.d not in (1, 2):
            raise ValueError(f"dimension must be 1 or 2, got {self.d}")
        if self.n < 4:
            raise ValueError(f"need at least 4 cells per axis, got {self.n}")
        if not self.R > 0:
            raise ValueError(f"half-width must be positive, got {self.R}")

    @property
    def dx(self) -> float:
        return 2.0 * self.R / self.n

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.d

    @property
    def size(self) -> int:
        return self.n**self.d

    @property
    def cell_volume(self) -> float:
        return self.dx**self.d

    @property
    def centers(self) -> np.ndarray:
        """1D cell-centre coordinates along any axis."""
        return -self.R + (np.arange(self.n) + 0.5) * self.dx

    @property
    def faces(self) -> np.ndarray:
        """1D face coordinates along any axis (``n + 1`` values)."""
        return -self.R + np.arange(self.n + 1) * self.dx

    def cell_points(self) -> np.ndarray:
        """Cell centres as an array of shape ``(*shape, d)``."""
        axes = [self.centers] * self.d
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def face_points(self, axis: int) -> np.ndarray:
        """Centres of the faces normal to ``axis``; shape has ``n + 1`` along ``axis``."""
        axes = [self.centers] * self.d
        axes[axis] = self.faces
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def check_field(self, u: np.ndarray, name: str = "field") -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if u.shape != self.shape:
            raise ValueError(f"{name} has shape {u.shape}, grid expects {self.shape}")
        return u


# ---------------------------------------------------------------------------
# potential and weight


@dataclass(frozen=True)
class Potential:
    """Convex confining potential ``Phi`` with ``rho = exp(-Phi)``.

    kinds:
        ``quadratic``  ``Phi = a |x|^2 / 2``, params ``(a,)``
        ``quartic``    ``Phi = a |x|^4 + c |x|^2 / 2``, params ``(a, c)``
        ``tabulated``  1D only, params ``(x_0, Phi_0, x_1, Phi_1, ...)``,
                       piecewise-linear interpolation
    """

    kind: str = "quadratic"
    params: tuple[float, ...] = (1.0,)
    d: int = 1

    def __post_init__(self) -> None:
        if self.kind not in ("quadratic", "quartic", "tabulated"):
            raise ValueError(f"unknown potential kind {self.kind!r}")
        if self.kind == "tabulated":
            if self.d != 1:
                raise ValueError("tabulated potentials are 1D only")
            if len(self.params) < 4 or len(self.params) % 2:
                raise ValueError("tabulated potential needs pairs (x, Phi), at least two")
            xs = np.asarray(self.params[0::2])
            if np.any(np.diff(xs) <= 0):
                raise ValueError("tabulated abscissae must be strictly increasing")

    def _table(self) -> tuple[np.ndarray, np.ndarray]:
        p = np.asarray(self.params, dtype=float)
        return p[0::2], p[1::2]

    def value(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "tabulated":
            xs, ps = self._table()
            return np.interp(x[..., 0], xs, ps)
        r2 = np.sum(x * x, axis=-1)
        if self.kind == "quadratic":
            return 0.5 * self.params[0] * r2
        a, c = (tuple(self.params) + (0.0,))[:2]
        return a * r2 * r2 + 0.5 * c * r2

    def gradient(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "tabulated":
            xs, ps = self._table()
            slopes = np.gradient(ps, xs)
            return np.interp(x[..., 0], xs, slopes)[..., None]
        if self.kind == "quadratic":
            return self.params[0] * x
        a, c = (tuple(self.params) + (0.0,))[:2]
        r2 = np.sum(x * x, axis=-1, keepdims=True)
        return (4.0 * a * r2 + c) * x

    def laplacian(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        d = x.shape[-1]
        if self.kind == "quadratic":
            return np.full(x.shape[:-1], self.params[0] * d)
        if self.kind == "quartic":
            a, c = (tuple(self.params) + (0.0,))[:2]
            r2 = np.sum(x * x, axis=-1)
            return 4.0 * a * (d + 2) * r2 + c * d
        raise NotImplementedError("laplacian of a tabulated potential")


def default_radius(potential: Potential, margin: float = DEFAULT_MARGIN) -> float:
    """Smallest half-width (to 1e-6) whose faces all sit ``margin`` above ``Phi(0)``."""
    phi0 = float(potential.value(np.zeros(potential.d)))

    def lowest_on_axes(r: float) -> float:
        pts = np.zeros((2 * potential.d, potential.d))
        for k in range(potential.d):
            pts[2 * k, k] = r
            pts[2 * k + 1, k] = -r
        return float(np.min(potential.value(pts)))

    lo, hi = 0.0, 1.0
    while lowest_on_axes(hi) < phi0 + margin:
        hi *= 2.0
        if hi > 1e6:
            raise HypothesisViolation("growth", detail="potential does not reach the margin")
    while hi - lo > 1e-6:
        mid = 0.5 * (lo + hi)
        if lowest_on_axes(mid) < phi0 + margin:
            lo = mid
        else:
            hi = mid
    return hi


def check_potential(potential: Potential, grid: Grid, margin: float = DEFAULT_MARGIN) -> None:
    """Sampled checks: ``Phi >= 0``, midpoint convexity, growth to the walls."""
    pts = grid.cell_points()
    phi = potential.value(pts)
    if not np.all(np.isfinite(phi)):
        raise HypothesisViolation("finite", detail="potential is not finite on the grid")
    bad = np.argwhere(phi < -1e-14)
    if bad.size:
        idx = tuple(bad[0])
        raise HypothesisViolation("nonnegative", pts[idx].tolist(), f"Phi = {phi[idx]:.3e}")

    tol = 1e-12 * (1.0 + np.max(np.abs(phi)))
    for axis in range(grid.d):
        left = np.take(phi, np.arange(0, grid.n - 2), axis=axis)
        mid = np.take(phi, np.arange(1, grid.n - 1), axis=axis)
        right = np.take(phi, np.arange(2, grid.n), axis=axis)
        defect = mid - 0.5 * (left + right)
        bad = np.argwhere(defect > tol)
        if bad.size:
            idx = list(bad[0])
            idx[axis] += 1
            raise HypothesisViolation(
                "convex", pts[tuple(idx)].tolist(), f"midpoint defect {defect[tuple(bad[0])]:.3e}"
            )

    phi0 = float(potential.value(np.zeros(grid.d)))
    for axis in range(grid.d):
        fp = grid.face_points(axis)
        walls = np.take(fp, [0, grid.n], axis=axis)
        low = potential.value(walls)
        k = np.unravel_index(np.argmin(low), low.shape)
        if low[k] <= phi0 + margin:
            raise HypothesisViolation(
                "growth",
                walls[k].tolist(),
                f"Phi at wall {low[k]:.4g} does not exceed Phi(0) + {margin:.4g}",
            )


@dataclass(frozen=True)
class Weight:
    """``rho`` on cells and faces plus the total mass ``Z``.

    ``faces[k]`` has ``n + 1`` entries along axis ``k``; interior entries are
    geometric means of the neighbouring cells.
    """

    cells: np.ndarray
    faces: tuple[np.ndarray, ...]
    Z: float

    @property
    def log_cells(self) -> np.ndarray:
        return np.log(self.cells)


def weight_from_potential(
    potential: Potential, grid: Grid, margin: float = DEFAULT_MARGIN, check: bool = True
) -> Weight:
    if potential.d != grid.d:
        raise ValueError(f"potential is {potential.d}D but grid is {grid.d}D")
    if check:
        check_potential(potential, grid, margin)
    phi_c = potential.value(grid.cell_points())
    cells = np.exp(-phi_c)
    faces = []
    for axis in range(grid.d):
        rho_f = np.exp(-potential.value(grid.face_points(axis)))
        lo = np.take(phi_c, np.arange(grid.n - 1), axis=axis)
        hi = np.take(phi_c, np.arange(1, grid.n), axis=axis)
        inner = np.exp(-0.5 * (lo + hi))
        sl = [slice(None)] * grid.d
        sl[axis] = slice(1, grid.n)
        rho_f[tuple(sl)] = inner
        faces.append(rho_f)
    Z = float(np.sum(cells) * grid.cell_volume)
    if not (0.0 < Z < np.inf) or np.any(cells <= 0.0) or np.any(cells > 1.0):
        raise HypothesisViolation("weight", detail="rho must lie in (0, 1] with finite mass")
    return Weight(cells=cells, faces=tuple(faces), Z=Z)


# ---------------------------------------------------------------------------
# weighted norms


def _same_shape(*arrays: np.ndarray) -> None:
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def norm_l1_rho(u: np.ndarray, grid: Grid, weight: Weight) -> float:
    u = np.asarray(u, dtype=float)
    _same_shape(u, weight.cells)
    return float(np.sum(np.abs(u) * weight.cells) * grid.cell_volume)


def mass_rho(u: np.ndarray, grid: Grid, weight: Weight) -> float:
    """Signed integral of ``u`` against ``rho dx``."""
    u = np.asarray(u, dtype=float)
    _same_shape(u, weight.cells)
    return float(np.sum(u * weight.cells) * grid.cell_volume)


def norm_linf(u: np.ndarray) -> float:
    u = np.asarray(u, dtype=float)
    return float(np.max(np.abs(u))) if u.size else 0.0


def inner_l2_rho(u: np.ndarray, w: np.ndarray, grid: Grid, weight: Weight) -> float:
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    _same_shape(u, w, weight.cells)
    return float(np.sum(u * w * weight.cells) * grid.cell_volume)


def normalize_probability(u: np.ndarray, grid: Grid, weight: Weight) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if np.any(u < 0):
        raise ValueError("normalize_probability needs a nonnegative field")
    mass = mass_rho(u, grid, weight)
    if mass <= 0.0:
        raise ValueError("cannot normalize a field with zero rho-mass")
    return u / mass


# ---------------------------------------------------------------------------
# coefficients


@dataclass(frozen=True)
class Coefficients:
    """Nonlinearity ``beta``, scalar drift factor ``b`` and vector field ``D``.

    ``D`` maps points of shape ``(..., d)`` to vectors of the same shape.
    ``div_rho_D`` is optional; when absent the discrete operator supplies it.
    """

    beta: ArrayFn
    dbeta: ArrayFn
    b: ArrayFn
    D: ArrayFn
    db: ArrayFn | None = None
    div_rho_D: ArrayFn | None = None
    beta_lipschitz: bool = False
    b_is_zero: bool = False
    D_is_zero: bool = False
    names: dict = field(default_factory=dict)


def make_beta(kind: str, params: Sequence[float] = ()) -> tuple[ArrayFn, ArrayFn, bool]:
    """Return ``(beta, beta', is_lipschitz)`` for a named nonlinearity."""
    p = [float(x) for x in params]
    if kind == "linear":
        c = p[0] if p else 1.0
        return (lambda r: c * np.asarray(r, dtype=float)), (
            lambda r: np.full(np.shape(r), c)
        ), True
    if kind == "porous_medium":
        m = p[0] if p else 2.0
        c = p[1] if len(p) > 1 else 1.0
        if m <= 1.0:
            raise ValueError("porous_medium exponent must exceed 1")

        def beta(r):
            r = np.asarray(r, dtype=float)
            return c * r * np.abs(r) ** (m - 1.0)

        def dbeta(r):
            r = np.asarray(r, dtype=float)
            return c * m * np.abs(r) ** (m - 1.0)

        return beta, dbeta, False
    if kind == "cubic":
        a = p[0] if p else 1.0
        c = p[1] if len(p) > 1 else 1.0
        return (lambda r: a * np.asarray(r, dtype=float) + c * np.asarray(r, dtype=float) ** 3), (
            lambda r: a + 3.0 * c * np.asarray(r, dtype=float) ** 2
        ), False
    raise ValueError(f"unknown beta kind {kind!r}")


def make_b(kind: str, params: Sequence[float] = ()) -> tuple[ArrayFn, ArrayFn]:
    p = [float(x) for x in params]
    if kind == "zero":
        return (lambda r: np.zeros(np.shape(r))), (lambda r: np.zeros(np.shape(r)))
    if kind == "constant":
        c = p[0] if p else 1.0
        return (lambda r: np.full(np.shape(r), c)), (lambda r: np.zeros(np.shape(r)))
    if kind == "saturating":
        # b(r) = c0 + c1 / (1 + r^2)
        c0 = p[0] if p else 1.0
        c1 = p[1] if len(p) > 1 else 0.5

        def b(r):
            r = np.asarray(r, dtype=float)
            return c0 + c1 / (1.0 + r * r)

        def db(r):
            r = np.asarray(r, dtype=float)
            return -2.0 * c1 * r / (1.0 + r * r) ** 2

        return b, db
    raise ValueError(f"unknown b kind {kind!r}")


def make_D(
    kind: str, params: Sequence[float], potential: Potential
) -> tuple[ArrayFn, ArrayFn | None]:
    """Return ``(D, div_rho D)``; ``tanh`` is ``D_k(x) = -a tanh(x_k)``."""
    p = [float(x) for x in params]
    if kind == "zero":
        return (lambda x: np.zeros(np.shape(x))), (lambda x: np.zeros(np.shape(x)[:-1]))
    if kind == "tanh":
        a = p[0] if p else 1.0

        def D(x):
            return -a * np.tanh(np.asarray(x, dtype=float))

        def div_rho(x):
            x = np.asarray(x, dtype=float)
            div = np.sum(-a / np.cosh(x) ** 2, axis=-1)
            return div - np.sum(potential.gradient(x) * D(x), axis=-1)

        return D, div_rho
    raise ValueError(f"unknown D kind {kind!r}")


def make_coefficients(
    potential: Potential,
    beta_kind: str = "linear",
    beta_params: Sequence[float] = (),
    b_kind: str = "zero",
    b_params: Sequence[float] = (),
    D_kind: str = "zero",
    D_params: Sequence[float] = (),
) -> Coefficients:
    beta, dbeta, lip = make_beta(beta_kind, beta_params)
    b, db = make_b(b_kind, b_params)
    D, div_rho = make_D(D_kind, D_params, potential)
    b_zero = b_kind == "zero" or (b_kind == "constant" and b_params and float(b_params[0]) == 0.0)
    D_zero = D_kind == "zero" or (D_kind == "tanh" and D_params and float(D_params[0]) == 0.0)
    return Coefficients(
        beta=beta,
        dbeta=dbeta,
        b=b,
        db=db,
        D=D,
        div_rho_D=div_rho,
        beta_lipschitz=lip,
        b_is_zero=bool(b_zero),
        D_is_zero=bool(D_zero),
        names={
            "beta": (beta_kind, tuple(beta_params)),
            "b": (b_kind, tuple(b_params)),
            "D": (D_kind, tuple(D_params)),
        },
    )


def check_coefficients(
    coeffs: Coefficients, r_max: float = 50.0, samples: int = 2001, seed: int = 0
) -> None:
    """Sampled checks of the structural conditions on ``beta`` and ``b``."""
    rng = np.random.default_rng(seed)
    r = np.concatenate([np.linspace(-r_max, r_max, samples), rng.uniform(-r_max, r_max, samples)])
    if abs(float(coeffs.beta(np.array(0.0)))) > 1e-14:
        raise HypothesisViolation("beta(0) = 0", 0.0)
    nz = r[r != 0.0]
    d = coeffs.dbeta(nz)
    bad = np.flatnonzero(~(d > 0.0))
    if bad.size:
        raise HypothesisViolation("beta' > 0", float(nz[bad[0]]), f"beta' = {d[bad[0]]:.3e}")
    bv = coeffs.b(r)
    if not np.all(np.isfinite(bv)):
        raise HypothesisViolation("b bounded", detail="b is not finite on samples")
    bad = np.flatnonzero(bv < 0.0)
    if bad.size:
        raise HypothesisViolation("b >= 0", float(r[bad[0]]), f"b = {bv[bad[0]]:.3e}")


def b_sup(coeffs: Coefficients, r_max: float = 1e3, samples: int = 20001) -> float:
    """Sampled ``|b|_inf`` on a log-spaced symmetric range."""
    if coeffs.b_is_zero:
        return 0.0
    pos = np.geomspace(1e-6, r_max, samples // 2)
    r = np.concatenate([-pos[::-1], [0.0], pos])
    return float(np.max(np.abs(coeffs.b(r))))


def h5_audit(coeffs: Coefficients, r_lo: float, r_hi: float, samples: int = 1001) -> dict:
    """Sampled check of ``|b'(r) r + b(r)| <= alpha |beta'(r)|`` on ``[r_lo, r_hi]``.

    Returns the smallest admissible ``alpha`` (``inf`` when ``beta'`` vanishes
    where the left side does not).
    """
    if coeffs.db is None:
        return {"ok": False, "alpha": float("inf"), "reason": "b' not supplied"}
    r = np.linspace(r_lo, r_hi, samples)
    lhs = np.abs(coeffs.db(r) * r + coeffs.b(r))
    rhs = np.abs(coeffs.dbeta(r))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(lhs == 0.0, 0.0, lhs / rhs)
    alpha = float(np.max(ratio))
    return {"ok": bool(np.isfinite(alpha)), "alpha": alpha, "reason": ""}


# ---------------------------------------------------------------------------
# problem bundle and CSV


@dataclass(frozen=True)
class ProblemSpec:
    potential: Potential
    coefficients: Coefficients
    grid: Grid
    weight: Weight


def build_problem(
    potential: Potential,
    coefficients: Coefficients,
    n: int,
    R: float | None = None,
    margin: float = DEFAULT_MARGIN,
    check: bool = True,
) -> ProblemSpec:
    if R is None:
        R = default_radius(potential, margin)
    grid = Grid(d=potential.d, R=float(R), n=int(n))
    weight = weight_from_potential(potential, grid, margin=margin, check=check)
    if check:
        check_coefficients(coefficients)
    return ProblemSpec(potential, coefficients, grid, weight)


def field_to_csv(path, u: np.ndarray, grid: Grid, weight: Weight) -> None:
    """One row per cell: coordinates, rho, u and v = u rho."""
    u = grid.check_field(u)
    pts = grid.cell_points().reshape(-1, grid.d)
    coords = ["x", "y"][: grid.d]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(coords + ["rho", "u", "v"])
        for p, r, val in zip(pts, weight.cells.ravel(), u.ravel()):
            w.writerow([f"{c:.16e}" for c in (*p, r, val, val * r)])
