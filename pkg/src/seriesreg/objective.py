"""Variational objective for pairwise registration.

The objective is E[phi] = S[phi] + lambda * R[phi] with the data term
S[phi] = -NCC(f o phi, g) and the Dirichlet energy R of the displacement.
All integrals (energy, its first variation, and the image statistics
entering the NCC) are evaluated with one tensor Gauss quadrature rule
of order 3 over the deformation's elements, so the assembled variation
is the exact derivative of the computed energy. The standalone ncc()
works directly on pixel sums.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from ._kernels import bilinear_sample
from .deform import Deformation
from .frames import Frame

_TINY_STD = 1e-14


class DegenerateImageError(ValueError):
    """A frame is constant on the integration region."""


@dataclass(frozen=True)
class EnergyValue:
    total: float
    data: float
    regularizer: float
    lam: float


@dataclass(frozen=True)
class DualField:
    """Nodal coefficients of the weak-form first variation.

    values[j, i] is the pairing of E'[phi] with the two vector-valued
    hat functions of node (j, i).
    """

    values: np.ndarray
    extent: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        if v.ndim != 3 or v.shape[2] != 2:
            raise ValueError(f"dual field must be (ny, nx, 2), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("dual field contains non-finite values")
        object.__setattr__(self, "values", v)


def ncc(f: Frame, g: Frame) -> float:
    """Normalized cross-correlation over the common valid pixels."""
    if f.intensities.shape != g.intensities.shape:
        raise ValueError("ncc requires frames of equal size")
    m = f.valid & g.valid
    if not m.any():
        raise ValueError("ncc: no common valid region")
    a = f.intensities[m]
    b = g.intensities[m]
    ma, mb = a.mean(), b.mean()
    a = a - ma
    b = b - mb
    sa = np.sqrt((a * a).mean())
    sb = np.sqrt((b * b).mean())
    if sa <= _TINY_STD * (1.0 + abs(ma)) or sb <= _TINY_STD * (1.0 + abs(mb)):
        raise DegenerateImageError("degenerate image: zero variance on valid region")
    return float((a * b).mean() / (sa * sb))


# ---------------------------------------------------------------------------
# Bilinear finite element operators (uniform tensor grid, natural boundary)
# ---------------------------------------------------------------------------

def fe_mass_1d(n: int, h: float) -> sp.csr_matrix:
    main = np.full(n, 4.0 * h / 6.0)
    main[0] = main[-1] = 2.0 * h / 6.0
    off = np.full(n - 1, h / 6.0)
    return sp.diags([off, main, off], [-1, 0, 1], format="csr")


def fe_stiffness_1d(n: int, h: float) -> sp.csr_matrix:
    main = np.full(n, 2.0 / h)
    main[0] = main[-1] = 1.0 / h
    off = np.full(n - 1, -1.0 / h)
    return sp.diags([off, main, off], [-1, 0, 1], format="csr")


@lru_cache(maxsize=64)
def fe_operators_2d(nodes_x: int, nodes_y: int, extent: tuple):
    """(mass, stiffness) of the bilinear basis, row-major y-outer flattening."""
    hx = extent[0] / (nodes_x - 1)
    hy = extent[1] / (nodes_y - 1)
    mx, my = fe_mass_1d(nodes_x, hx), fe_mass_1d(nodes_y, hy)
    kx, ky = fe_stiffness_1d(nodes_x, hx), fe_stiffness_1d(nodes_y, hy)
    mass = sp.kron(my, mx).tocsr()
    stiffness = (sp.kron(ky, mx) + sp.kron(my, kx)).tocsr()
    return mass, stiffness


# ---------------------------------------------------------------------------
# Quadrature machinery
# ---------------------------------------------------------------------------

class _QuadGrid:
    """Tensor Gauss rule on the uniform element mesh of a node grid.

    All elements share the reference basis tables; only the point
    positions differ. Corner order is (y0x0, y0x1, y1x0, y1x1).
    """

    def __init__(self, nodes_x: int, nodes_y: int, extent, order: int):
        self.nodes_x = nodes_x
        self.nodes_y = nodes_y
        self.extent = (float(extent[0]), float(extent[1]))
        self.order = order
        nex, ney = nodes_x - 1, nodes_y - 1
        hx = self.extent[0] / nex
        hy = self.extent[1] / ney
        self.n_elements = nex * ney

        q, w = np.polynomial.legendre.leggauss(order)
        q01 = (q + 1.0) / 2.0
        w01 = w / 2.0
        a, b = np.meshgrid(q01, q01)            # a along x, b along y
        wa, wb = np.meshgrid(w01, w01)
        a, b = a.ravel(), b.ravel()
        self.weights = (wa * wb).ravel() * hx * hy   # (nq,), same per element
        self.n_qpoints = a.size

        self.basis = np.stack([(1 - a) * (1 - b), a * (1 - b),
                               (1 - a) * b, a * b], axis=1)  # (nq, 4)
        dbx = np.stack([-(1 - b), (1 - b), -b, b], axis=1) / hx
        dby = np.stack([-(1 - a), -a, (1 - a), a], axis=1) / hy
        self.basis_grad = np.stack([dbx, dby], axis=2)       # (nq, 4, 2)
        self.weighted_basis = self.weights[:, None] * self.basis
        self.weighted_basis_grad = self.weights[:, None, None] * self.basis_grad

        ex = np.arange(nex)
        ey = np.arange(ney)
        gx, gy = np.meshgrid(ex, ey)
        base = gy.ravel() * nodes_x + gx.ravel()             # node (ey, ex)
        self.corners = np.stack([base, base + 1,
                                 base + nodes_x, base + nodes_x + 1], axis=1)
        self._corner_flat = self.corners.ravel()

        px = (gx.ravel()[:, None] + a[None, :]) * hx          # (ne, nq)
        py = (gy.ravel()[:, None] + b[None, :]) * hy
        self.points = np.ascontiguousarray(
            np.stack([px.ravel(), py.ravel()], axis=-1))
        self.point_weights = np.tile(self.weights, self.n_elements)

    def eval_nodal(self, nodal: np.ndarray) -> np.ndarray:
        """Values of a (ny, nx, c) nodal field at all quadrature points,
        returned as (ne * nq, c)."""
        ncomp = nodal.shape[-1]
        flat = nodal.reshape(-1, ncomp)
        corner_vals = flat[self.corners]                      # (ne, 4, c)
        out = np.tensordot(corner_vals, self.basis, axes=([1], [1]))  # (ne, c, nq)
        return np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(-1, ncomp)

    def eval_nodal_grad(self, nodal: np.ndarray) -> np.ndarray:
        """Spatial gradient of a nodal field at quadrature points,
        returned as (ne, nq, c, 2)."""
        flat = nodal.reshape(-1, nodal.shape[-1])
        corner_vals = flat[self.corners]
        out = np.tensordot(corner_vals, self.basis_grad, axes=([1], [1]))
        return out.transpose(0, 2, 1, 3)                      # (ne, nq, c, 2)

    def scatter(self, point_vals: np.ndarray) -> np.ndarray:
        """Assemble sum_q w_q * point_vals[q] * N_i(q) into nodal (ny*nx, c)."""
        ncomp = point_vals.shape[-1]
        pv = point_vals.reshape(self.n_elements, self.n_qpoints, ncomp)
        contrib = np.tensordot(pv, self.weighted_basis, axes=([1], [0]))
        per_corner = np.ascontiguousarray(contrib.transpose(0, 2, 1)).reshape(-1, ncomp)
        out = np.empty((self.nodes_x * self.nodes_y, ncomp))
        for d in range(ncomp):
            out[:, d] = np.bincount(self._corner_flat, weights=per_corner[:, d],
                                    minlength=out.shape[0])
        return out

    def scatter_grad(self, point_grads: np.ndarray) -> np.ndarray:
        """Assemble sum_q w_q * point_grads[q, :, k] * dN_i/dx_k(q)."""
        ncomp = point_grads.shape[-2]
        pg = point_grads.reshape(self.n_elements, self.n_qpoints, ncomp, 2)
        contrib = np.einsum("qck,eqdk->ecd", self.weighted_basis_grad, pg,
                            optimize=True)
        per_corner = contrib.reshape(-1, ncomp)
        out = np.empty((self.nodes_x * self.nodes_y, ncomp))
        for d in range(ncomp):
            out[:, d] = np.bincount(self._corner_flat, weights=per_corner[:, d],
                                    minlength=out.shape[0])
        return out


@lru_cache(maxsize=32)
def _quad_grid(nodes_x: int, nodes_y: int, extent: tuple, order: int) -> _QuadGrid:
    return _QuadGrid(nodes_x, nodes_y, extent, order)


def quad_grid_for(phi: Deformation, order: int = 3) -> _QuadGrid:
    return _quad_grid(phi.nodes_x, phi.nodes_y, phi.extent, order)


def sample_with_grad(frame: Frame, points: np.ndarray):
    """Bilinear value, interpolant gradient, and mask validity at points.

    Out-of-domain points are clamped; the gradient component in a clamped
    direction is zero (the derivative of the clamped extension), which
    keeps the assembled variation the exact derivative of the clamped
    energy. Mask validity ignores the domain test: clamped points stay
    inside the integration region unless they touch masked-out pixels.
    """
    scale = float(max(frame.width, frame.height) - 1)
    vals, grad, mask_ok = bilinear_sample(
        frame.flat_intensities, frame.flat_mask, frame.width, frame.height,
        scale, points, need_grad=True)[:3]
    return vals, grad, mask_ok


def _weighted_stats(vals, weights, total):
    mean = float((weights * vals).sum() / total)
    var = float((weights * (vals - mean) ** 2).sum() / total)
    return mean, np.sqrt(max(var, 0.0))


class EnergyContext:
    """Caches the g samples and quadrature tables for one (f, g, grid).

    The regularization weight is passed per call so the same context
    serves runs with reduced lambda. The solver keeps one context alive
    per grid level.
    """

    def __init__(self, f: Frame, g: Frame, nodes_x: int, nodes_y: int,
                 order: int = 3):
        if f.intensities.shape != g.intensities.shape:
            raise ValueError("f and g must have equal size")
        if not np.allclose(f.extent, g.extent):
            raise ValueError("f and g must share the domain rectangle")
        self.f = f
        self.g = g
        self.grid = _quad_grid(nodes_x, nodes_y, f.extent, order)
        scale = float(max(g.width, g.height) - 1)
        self._g_vals, _, g_mask_ok, _ = bilinear_sample(
            g.flat_intensities, g.flat_mask, g.width, g.height, scale,
            self.grid.points, need_grad=False)
        self._g_ok = None if g.flat_mask is None else g_mask_ok
        self._f_scale = float(max(f.width, f.height) - 1)
        _, self._stiffness = fe_operators_2d(nodes_x, nodes_y, self.grid.extent)

    def _check_phi(self, phi: Deformation):
        if (phi.nodes_x, phi.nodes_y) != (self.grid.nodes_x, self.grid.nodes_y):
            raise ValueError("deformation grid does not match context grid")

    def _data_pointwise(self, phi: Deformation, need_grad: bool):
        grid = self.grid
        u_q = grid.eval_nodal(phi.displacement)
        mapped = grid.points + u_q
        f_vals, f_grad, f_mask_ok, _ = bilinear_sample(
            self.f.flat_intensities, self.f.flat_mask, self.f.width,
            self.f.height, self._f_scale, mapped, need_grad)
        f_ok = None if self.f.flat_mask is None else f_mask_ok
        if f_ok is None and self._g_ok is None:
            w = grid.point_weights
            validity = None
        else:
            validity = f_ok if self._g_ok is None else (
                self._g_ok if f_ok is None else (self._g_ok & f_ok))
            if not validity.any():
                raise ValueError("empty integration region: no valid overlap")
            w = grid.point_weights * validity
        w_total = float(w.sum())
        mf, sf = _weighted_stats(f_vals, w, w_total)
        mg, sg = _weighted_stats(self._g_vals, w, w_total)
        if sf <= _TINY_STD * (1.0 + abs(mf)) or sg <= _TINY_STD * (1.0 + abs(mg)):
            raise DegenerateImageError(
                "degenerate image: zero variance on integration region")
        corr = float((w * (f_vals - mf) * (self._g_vals - mg)).sum()
                     / (w_total * sf * sg))
        return f_vals, f_grad, validity, w, w_total, mf, sf, mg, sg, -corr

    def similarity(self, phi: Deformation) -> float:
        self._check_phi(phi)
        return self._data_pointwise(phi, need_grad=False)[-1]

    def regularizer(self, phi: Deformation) -> float:
        """Dirichlet energy through the cached stiffness operator;
        equals the order-3 quadrature sum for bilinear fields."""
        u = phi.displacement.reshape(-1, 2)
        return 0.5 * float((u * (self._stiffness @ u)).sum())

    def energy(self, phi: Deformation, lam: float) -> EnergyValue:
        self._check_phi(phi)
        s = self._data_pointwise(phi, need_grad=False)[-1]
        r = self.regularizer(phi)
        return EnergyValue(total=s + lam * r, data=s, regularizer=r, lam=lam)

    def variation(self, phi: Deformation, lam: float) -> DualField:
        self._check_phi(phi)
        grid = self.grid
        f_vals, f_grad, validity, w, w_total, mf, sf, mg, sg, s_val = \
            self._data_pointwise(phi, need_grad=True)
        bracket = ((self._g_vals - mg) / (sf * sg)
                   + (f_vals - mf) / (sf * sf) * s_val)
        coef = -bracket / w_total
        if validity is not None:
            coef = coef * validity
        data_dual = grid.scatter(coef[:, None] * f_grad)

        u = phi.displacement.reshape(-1, 2)
        reg_dual = self._stiffness @ u

        total = data_dual + lam * reg_dual
        ny, nx = grid.nodes_y, grid.nodes_x
        return DualField(total.reshape(ny, nx, 2), extent=phi.extent)


def dirichlet(phi: Deformation, order: int = 3) -> float:
    """Dirichlet energy 0.5 * integral of |D u|_F^2 by Gauss quadrature.

    Order 3 integrates the bilinear gradients exactly.
    """
    grid = quad_grid_for(phi, order)
    du = grid.eval_nodal_grad(phi.displacement)   # (ne, nq, 2, 2)
    sq = (du ** 2).sum(axis=(2, 3))
    return 0.5 * float((sq * grid.weights[None, :]).sum())


def dirichlet_variation(phi: Deformation, order: int = 3) -> DualField:
    """Assembly of the regularizer-only weak form, integral of Du : D zeta."""
    grid = quad_grid_for(phi, order)
    du = grid.eval_nodal_grad(phi.displacement)
    vals = grid.scatter_grad(du)
    return DualField(vals.reshape(phi.nodes_y, phi.nodes_x, 2), extent=phi.extent)


def similarity(f: Frame, g: Frame, phi: Deformation, order: int = 3) -> float:
    """Data term S[phi] = -NCC(f o phi, g), quadrature-discretized."""
    ctx = EnergyContext(f, g, phi.nodes_x, phi.nodes_y, order)
    return ctx.similarity(phi)


def energy(f: Frame, g: Frame, phi: Deformation, lam: float,
           order: int = 3) -> EnergyValue:
    """Full objective E = S + lambda * R."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    ctx = EnergyContext(f, g, phi.nodes_x, phi.nodes_y, order)
    s = ctx.similarity(phi)
    r = dirichlet(phi, order)
    return EnergyValue(total=s + lam * r, data=s, regularizer=r, lam=lam)


def first_variation(f: Frame, g: Frame, phi: Deformation, lam: float,
                    order: int = 3) -> DualField:
    """Weak-form first variation of E against every nodal basis function."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    ctx = EnergyContext(f, g, phi.nodes_x, phi.nodes_y, order)
    return ctx.variation(phi, lam)
