"""Weighted finite-volume operators with exact discrete summation by parts.

Face fields are lists with one array per axis; the array for axis ``k`` has
``n + 1`` entries along ``k`` and its two wall layers are zero (no flux).

With ``m_i = rho_i dx^d`` the cell masses, every operator is a difference of
face fluxes divided by ``m_i``, so ``sum_i m_i (div_rho F)_i = 0`` and
``<L_h u, w>_rho = -<grad_h u, grad_h w>_faces`` hold to round-off.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .model import Coefficients, Grid, Weight
from .regularize import RegularizedCoefficients

FaceField = list


@dataclass
class FluxModel:
    """Everything the flux assembly needs for one nonlinear operator."""

    beta: Callable
    dbeta: Callable
    G: Callable  # r -> b(r) r
    dG: Callable
    drift: np.ndarray  # dx^(d-1) rho_f D_f . n_f per interior face
    eps: float = 0.0  # weight of the zero-order eps * beta(u) term
    beta_and_prime: Callable | None = None

    def beta_pair(self, u):
        if self.beta_and_prime is not None:
            return self.beta_and_prime(u)
        return self.beta(u), self.dbeta(u)


class OperatorBundle:
    """Discrete ``grad``, ``div_rho``, ``L`` and ``A0`` on one grid."""

    def __init__(
        self,
        grid: Grid,
        weight: Weight,
        coefficients: Coefficients | None = None,
        upwind: bool = True,
    ) -> None:
        self.grid = grid
        self.weight = weight
        self.coefficients = coefficients
        self.upwind = upwind
        d, n, dx = grid.d, grid.n, grid.dx
        self.mass = weight.cells.ravel() * grid.cell_volume

        idx = np.arange(grid.size).reshape(grid.shape)
        left, right, rho_f, axis_of, pts = [], [], [], [], []
        for k in range(d):
            lo = np.take(idx, np.arange(n - 1), axis=k)
            hi = np.take(idx, np.arange(1, n), axis=k)
            sl = [slice(None)] * d
            sl[k] = slice(1, n)
            left.append(lo.ravel())
            right.append(hi.ravel())
            rho_f.append(weight.faces[k][tuple(sl)].ravel())
            axis_of.append(np.full(lo.size, k))
            pts.append(grid.face_points(k)[tuple(sl)].reshape(-1, d))
        self.left = np.concatenate(left)
        self.right = np.concatenate(right)
        self.face_rho = np.concatenate(rho_f)
        self.face_axis = np.concatenate(axis_of)
        self.face_points = np.concatenate(pts)
        self.conductance = self.face_rho * dx ** (d - 2)
        self._drift = None
        self._c_D = None

    # ------------------------------------------------------------------
    # face-field operators

    def _interior(self, axis: int) -> tuple:
        sl = [slice(None)] * self.grid.d
        sl[axis] = slice(1, self.grid.n)
        return tuple(sl)

    def zero_faces(self) -> FaceField:
        g = self.grid
        out = []
        for k in range(g.d):
            shape = list(g.shape)
            shape[k] += 1
            out.append(np.zeros(shape))
        return out

    def grad(self, u: np.ndarray) -> FaceField:
        u = self.grid.check_field(u)
        out = self.zero_faces()
        for k in range(self.grid.d):
            out[k][self._interior(k)] = np.diff(u, axis=k) / self.grid.dx
        return out

    def div_rho(self, F: Sequence[np.ndarray]) -> np.ndarray:
        g = self.grid
        if len(F) != g.d:
            raise ValueError(f"face field has {len(F)} components, grid is {g.d}D")
        out = np.zeros(g.shape)
        for k in range(g.d):
            Fk = np.asarray(F[k], dtype=float)
            expect = list(g.shape)
            expect[k] += 1
            if Fk.shape != tuple(expect):
                raise ValueError(f"face component {k} has shape {Fk.shape}, expected {tuple(expect)}")
            walls = np.take(Fk, [0, g.n], axis=k)
            if np.any(walls != 0.0):
                raise ValueError("nonzero boundary flux supplied to div_rho")
            out += np.diff(self.weight.faces[k] * Fk, axis=k)
        return out / (self.weight.cells * g.dx)

    def face_inner(self, F: Sequence[np.ndarray], G: Sequence[np.ndarray]) -> float:
        tot = 0.0
        for k in range(self.grid.d):
            tot += float(np.sum(F[k] * G[k] * self.weight.faces[k]))
        return tot * self.grid.cell_volume

    def apply_L(self, u: np.ndarray) -> np.ndarray:
        return self.div_rho(self.grad(u))

    # ------------------------------------------------------------------
    # edge-list machinery (A0 and Jacobians)

    def _scatter(self, Q: np.ndarray) -> np.ndarray:
        size = self.grid.size
        return np.bincount(self.left, Q, size) - np.bincount(self.right, Q, size)

    def drift_weights(self, D: Callable | None = None) -> np.ndarray:
        """``dx^(d-1) rho_f (D . n)`` at every interior face."""
        if D is None:
            if self._drift is None:
                self._drift = self._drift_from(self.coefficients.D)
            return self._drift
        return self._drift_from(D)

    def _drift_from(self, D: Callable) -> np.ndarray:
        Dv = D(self.face_points)
        Dn = Dv[np.arange(Dv.shape[0]), self.face_axis]
        return self.grid.dx ** (self.grid.d - 1) * self.face_rho * Dn

    def flux_model(self, reg: RegularizedCoefficients | None = None) -> FluxModel:
        c = self.coefficients
        if c is None:
            raise ValueError("operator bundle has no coefficients")
        if reg is None:
            b, db = c.b, c.db

            def G(r):
                return b(r) * r

            def dG(r):
                dbr = db(r) if db is not None else 0.0
                return b(r) + dbr * r

            if c.b_is_zero or c.D_is_zero:
                drift = np.zeros_like(self.face_rho)
            else:
                drift = self.drift_weights()
            return FluxModel(c.beta, c.dbeta, G, dG, drift)
        if c.b_is_zero or c.D_is_zero:
            drift = np.zeros_like(self.face_rho)
        else:
            drift = self.drift_weights(reg.D)
        return FluxModel(
            reg.beta,
            reg.dbeta,
            reg.b_star,
            reg.b_star_prime,
            drift,
            eps=reg.eps,
            beta_and_prime=reg.beta_and_prime,
        )

    def _upwind_values(self, model: FluxModel, u: np.ndarray):
        """Face values of ``G`` and their derivatives w.r.t. the left/right cell."""
        i, j, w = self.left, self.right, model.drift
        ui, uj = u[i], u[j]
        if self.upwind:
            Gi, Gj = model.G(ui), model.G(uj)
            pos, neg = w > 0, w < 0
            zero = ~(pos | neg)
            Gf = np.where(pos, Gi, np.where(neg, Gj, 0.5 * (Gi + Gj)))
            return Gf, (pos, neg, zero)
        uf = 0.5 * (ui + uj)
        return model.G(uf), uf

    def residual_mass(self, u: np.ndarray, model: FluxModel) -> np.ndarray:
        """``m * A(u)`` on the flat cell vector (no ``m u`` term)."""
        bv, _ = model.beta_pair(u)
        Q = self.conductance * (bv[self.left] - bv[self.right])
        if np.any(model.drift):
            Gf, _ = self._upwind_values(model, u)
            Q = Q + model.drift * Gf
        out = self._scatter(Q)
        if model.eps:
            out = out + model.eps * self.mass * bv
        return out

    def jacobian_mass(self, u: np.ndarray, model: FluxModel) -> tuple[np.ndarray, sp.csc_matrix]:
        """``(m * A(u), d(m * A)/du)`` for Newton."""
        i, j = self.left, self.right
        bv, bp = model.beta_pair(u)
        kappa = self.conductance
        Q = kappa * (bv[i] - bv[j])
        dQi = kappa * bp[i]
        dQj = -kappa * bp[j]
        w = model.drift
        if np.any(w):
            if self.upwind:
                Gf, (pos, neg, zero) = self._upwind_values(model, u)
                gi, gj = model.dG(u[i]), model.dG(u[j])
                dQi = dQi + w * np.where(pos, gi, np.where(zero, 0.5 * gi, 0.0))
                dQj = dQj + w * np.where(neg, gj, np.where(zero, 0.5 * gj, 0.0))
            else:
                Gf, uf = self._upwind_values(model, u)
                gf = 0.5 * w * model.dG(uf)
                dQi = dQi + gf
                dQj = dQj + gf
            Q = Q + w * Gf
        size = self.grid.size
        val = self._scatter(Q)
        rows = np.concatenate([i, i, j, j])
        cols = np.concatenate([i, j, i, j])
        data = np.concatenate([dQi, dQj, -dQi, -dQj])
        if model.eps:
            val = val + model.eps * self.mass * bv
            rows = np.concatenate([rows, np.arange(size)])
            cols = np.concatenate([cols, np.arange(size)])
            data = np.concatenate([data, model.eps * self.mass * bp])
        J = sp.csc_matrix((data, (rows, cols)), shape=(size, size))
        return val, J

    def apply_A0(self, u: np.ndarray, reg: RegularizedCoefficients | None = None) -> np.ndarray:
        """``-L_h beta(u) + div_rho,h(D b(u) u)``; with ``reg``, the eps-regularized form."""
        u = self.grid.check_field(u)
        if not np.all(np.isfinite(u)):
            raise ValueError("non-finite values in field")
        model = self.flux_model(reg)
        out = self.residual_mass(u.ravel(), model) / self.mass
        if not np.all(np.isfinite(out)):
            raise ValueError("NaN produced by coefficients")
        return out.reshape(self.grid.shape)

    # ------------------------------------------------------------------
    # assembled matrices and bounds

    def laplacian_matrix(self) -> sp.csr_matrix:
        """Assembled ``L_h`` (acting on flat cell vectors)."""
        i, j, k = self.left, self.right, self.conductance
        size = self.grid.size
        rows = np.concatenate([i, i, j, j])
        cols = np.concatenate([i, j, i, j])
        data = np.concatenate([k, -k, -k, k])
        K = sp.csr_matrix((data, (rows, cols)), shape=(size, size))
        return (-sp.diags(1.0 / self.mass) @ K).tocsr()

    def symmetrized_laplacian(self) -> np.ndarray:
        """``M^{1/2} L_h M^{-1/2}``, symmetric iff ``L_h`` is rho-symmetric."""
        s = np.sqrt(self.mass)
        L = self.laplacian_matrix().toarray()
        return s[:, None] * L / s[None, :]

    def div_rho_D_cells(self) -> np.ndarray:
        """``div_rho D`` on cells: analytic if supplied, else flux differences of face samples."""
        c = self.coefficients
        g = self.grid
        if c.div_rho_D is not None:
            return np.asarray(c.div_rho_D(g.cell_points()), dtype=float)
        out = np.zeros(g.shape)
        for k in range(g.d):
            Dk = c.D(g.face_points(k))[..., k]
            out += np.diff(self.weight.faces[k] * Dk, axis=k)
        return out / (self.weight.cells * g.dx)

    def drift_bound(self) -> float:
        """``| (div_rho D)^- + |D| |_inf`` sampled on the cells."""
        if self._c_D is None:
            c = self.coefficients
            if c is None or c.D_is_zero:
                self._c_D = 0.0
            else:
                neg = np.maximum(-self.div_rho_D_cells(), 0.0)
                size = np.linalg.norm(c.D(self.grid.cell_points()), axis=-1)
                self._c_D = float(np.max(neg + size))
        return self._c_D


def export_triplets(matrix, path) -> None:
    """Write a sparse matrix as ``row,col,value`` lines."""
    coo = sp.coo_matrix(matrix)
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "col", "value"])
        for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
            w.writerow([int(r), int(c), f"{v:.16e}"])
