"""Piecewise-bilinear deformations of the image domain.

A deformation phi maps domain positions to domain positions and is
stored as nodal displacement u(x) = phi(x) - x on a regular node grid,
interpolated bilinearly in between. Node grids conform to pixel grids
by carrying one more node per side than the image has pixels.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .frames import Frame, sample_bilinear_many, sample_nearest_many


class GridMismatchError(ValueError):
    """Operands live on different node grids."""


class InversionError(RuntimeError):
    """Fixed-point inversion did not reach the requested tolerance."""

    def __init__(self, residual: float, iterations: int):
        self.residual = residual
        self.iterations = iterations
        super().__init__(
            f"deformation inversion stalled at residual {residual:.3e} "
            f"after {iterations} iterations (folding field?)")


@dataclass(frozen=True)
class Deformation:
    """Displacement field on a node grid over [0, w] x [0, h].

    displacement : (nodes_y, nodes_x, 2) array, components (u_x, u_y) in
                   domain units.
    extent       : (w, h) of the covered rectangle; (1, 1) for square
                   frames.
    """

    displacement: np.ndarray
    extent: tuple[float, float] = field(default=(1.0, 1.0))

    def __post_init__(self):
        u = np.ascontiguousarray(np.asarray(self.displacement, dtype=np.float64))
        if u.ndim != 3 or u.shape[2] != 2:
            raise ValueError(f"displacement must be (ny, nx, 2), got {u.shape}")
        if u.shape[0] < 2 or u.shape[1] < 2:
            raise ValueError("node grid must be at least 2x2")
        if not np.all(np.isfinite(u)):
            raise ValueError("displacement contains non-finite values")
        object.__setattr__(self, "displacement", u)
        object.__setattr__(self, "extent", (float(self.extent[0]), float(self.extent[1])))

    @property
    def nodes_x(self) -> int:
        return self.displacement.shape[1]

    @property
    def nodes_y(self) -> int:
        return self.displacement.shape[0]

    @property
    def node_spacing(self) -> tuple[float, float]:
        return (self.extent[0] / (self.nodes_x - 1),
                self.extent[1] / (self.nodes_y - 1))

    def node_points(self) -> np.ndarray:
        """(ny, nx, 2) array of undeformed node positions."""
        hx, hy = self.node_spacing
        xs = np.arange(self.nodes_x) * hx
        ys = np.arange(self.nodes_y) * hy
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx, gy], axis=-1)

    def same_grid(self, other: "Deformation") -> bool:
        return (self.displacement.shape == other.displacement.shape
                and np.allclose(self.extent, other.extent))


def identity(nodes_x: int, nodes_y: int, extent=(1.0, 1.0)) -> Deformation:
    """Zero-displacement deformation on the given node grid."""
    if nodes_x < 2 or nodes_y < 2:
        raise ValueError("node counts must be at least 2")
    return Deformation(np.zeros((nodes_y, nodes_x, 2)), extent)


def identity_for(frame: Frame) -> Deformation:
    """Identity on the node grid conforming to the frame's pixel grid."""
    return identity(frame.width + 1, frame.height + 1, frame.extent)


def displacement_at(phi: Deformation, points: np.ndarray) -> np.ndarray:
    """Bilinear evaluation of the displacement at (n, 2) points.

    Points outside the node grid are clamped to it, so the field extends
    continuously beyond the boundary.
    """
    hx, hy = phi.node_spacing
    px = np.clip(points[:, 0] / hx, 0.0, phi.nodes_x - 1.0)
    py = np.clip(points[:, 1] / hy, 0.0, phi.nodes_y - 1.0)
    x0 = np.minimum(np.floor(px).astype(np.intp), phi.nodes_x - 2)
    y0 = np.minimum(np.floor(py).astype(np.intp), phi.nodes_y - 2)
    fx = (px - x0)[:, None]
    fy = (py - y0)[:, None]
    u = phi.displacement
    return (u[y0, x0] * (1 - fx) * (1 - fy) + u[y0, x0 + 1] * fx * (1 - fy)
            + u[y0 + 1, x0] * (1 - fx) * fy + u[y0 + 1, x0 + 1] * fx * fy)


def apply_at(phi: Deformation, points: np.ndarray) -> np.ndarray:
    """phi(points) = points + u(points)."""
    return points + displacement_at(phi, points)


def compose(outer: Deformation, inner: Deformation) -> Deformation:
    """Nodal composition (outer o inner)(x) = outer(inner(x)).

    outer is evaluated bilinearly with boundary clamping at the positions
    inner sends the nodes to.
    """
    if not outer.same_grid(inner):
        raise GridMismatchError("compose requires a common node grid")
    pts = inner.node_points().reshape(-1, 2)
    u_in = inner.displacement.reshape(-1, 2)
    u_out = displacement_at(outer, pts + u_in)
    u = (u_in + u_out).reshape(inner.displacement.shape)
    return Deformation(u, inner.extent)


def invert(phi: Deformation, tol: float = 1e-8, max_iter: int = 100) -> Deformation:
    """Numerical inverse psi with max-node-norm(phi o psi - id) <= tol.

    Plain fixed-point iteration v <- v - (v + u(x + v)), halving the
    damping factor whenever the residual grows.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    pts = phi.node_points().reshape(-1, 2)
    v = np.zeros_like(pts)

    def residual_field(v):
        return v + displacement_at(phi, pts + v)

    r = residual_field(v)
    res = float(np.max(np.linalg.norm(r, axis=1)))
    best_v, best_res = v, res
    alpha = 1.0
    for it in range(max_iter):
        if best_res <= tol:
            break
        v_new = best_v - alpha * residual_field(best_v)
        r_new = residual_field(v_new)
        res_new = float(np.max(np.linalg.norm(r_new, axis=1)))
        if res_new < best_res:
            best_v, best_res = v_new, res_new
            alpha = 1.0
        else:
            alpha *= 0.5
            if alpha < 1e-6:
                break
    if best_res > tol:
        raise InversionError(best_res, max_iter)
    return Deformation(best_v.reshape(phi.displacement.shape), phi.extent)


def conforms(frame: Frame, phi: Deformation) -> bool:
    return (phi.nodes_x == frame.width + 1 and phi.nodes_y == frame.height + 1
            and np.allclose(phi.extent, frame.extent))


def warp(frame: Frame, phi: Deformation, mode: str = "bilinear") -> Frame:
    """Resample the frame through phi: out(p) = frame(phi(p)).

    Output pixels are invalid where phi(p) leaves the domain or hits
    invalid input pixels.
    """
    if not conforms(frame, phi):
        raise GridMismatchError(
            f"deformation grid {(phi.nodes_x, phi.nodes_y)} does not conform to "
            f"frame {(frame.width, frame.height)}")
    if mode not in ("bilinear", "nearest"):
        raise ValueError(f"unknown interpolation mode {mode!r}")
    s = frame.pixel_spacing
    xs = np.arange(frame.width) * s
    ys = np.arange(frame.height) * s
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=-1)
    mapped = apply_at(phi, pts)
    sampler = sample_bilinear_many if mode == "bilinear" else sample_nearest_many
    vals, ok = sampler(frame, mapped)
    return Frame(vals.reshape(frame.height, frame.width),
                 ok.reshape(frame.height, frame.width))


def constant(frame: Frame, shift_px) -> Deformation:
    """Constant-displacement deformation, shift given in pixel units."""
    s = frame.pixel_spacing
    u = np.empty((frame.height + 1, frame.width + 1, 2))
    u[..., 0] = shift_px[0] * s
    u[..., 1] = shift_px[1] * s
    return Deformation(u, frame.extent)


def _shift_ncc(f: Frame, g: Frame, dx: int, dy: int) -> float:
    """NCC of f shifted by (dx, dy) px against g on the valid overlap."""
    h, w = g.intensities.shape
    x0, x1 = max(0, -dx), min(w, w - dx)
    y0, y1 = max(0, -dy), min(h, h - dy)
    if x1 - x0 < 2 or y1 - y0 < 2:
        return -np.inf
    fv = f.intensities[y0 + dy:y1 + dy, x0 + dx:x1 + dx]
    gv = g.intensities[y0:y1, x0:x1]
    m = f.valid[y0 + dy:y1 + dy, x0 + dx:x1 + dx] & g.valid[y0:y1, x0:x1]
    if m.sum() < 2:
        return -np.inf
    a = fv[m] - fv[m].mean()
    b = gv[m] - gv[m].mean()
    denom = np.sqrt((a * a).mean() * (b * b).mean())
    if denom <= 0:
        return -np.inf
    return float((a * b).mean() / denom)


def fit_rigid(f: Frame, g: Frame, search: int, rotations=()) -> Deformation:
    """Exhaustive integer-pixel alignment of f to g maximizing NCC.

    search gives the translation radius in pixels; shifts are scanned in
    order of increasing magnitude so zero wins ties. An optional list of
    rotation angles (radians, about the domain center) widens the search;
    by default only translations are tried.
    """
    if f.intensities.shape != g.intensities.shape:
        raise GridMismatchError("fit_rigid requires frames of equal size")
    radius = int(search)
    if radius < 0:
        raise ValueError("empty search range")
    shifts = [(dx, dy) for dx in range(-radius, radius + 1)
              for dy in range(-radius, radius + 1)]
    shifts.sort(key=lambda d: (abs(d[0]) + abs(d[1]), d))

    candidates = [0.0] + [float(t) for t in rotations]
    best_score = -np.inf
    best = None
    for theta in candidates:
        fr = f if theta == 0.0 else _rotated(f, theta)
        for dx, dy in shifts:
            score = _shift_ncc(fr, g, dx, dy)
            if score > best_score:
                best_score = score
                best = (theta, dx, dy)
    if best is None or not np.isfinite(best_score):
        raise ValueError("rigid search found no admissible alignment")
    theta, dx, dy = best
    if theta == 0.0:
        return constant(f, (dx, dy))
    return _rigid_deformation(f, theta, (dx, dy))


def _rigid_deformation(frame: Frame, theta: float, shift_px) -> Deformation:
    """phi(x) = R_theta(x + t - c) + c for the scanned rotate-then-shift."""
    s = frame.pixel_spacing
    c = np.asarray(frame.extent) / 2.0
    t = np.asarray([shift_px[0] * s, shift_px[1] * s])
    rot = np.array([[np.cos(theta), -np.sin(theta)],
                    [np.sin(theta), np.cos(theta)]])
    phi0 = identity_for(frame)
    pts = phi0.node_points().reshape(-1, 2)
    mapped = (pts + t - c) @ rot.T + c
    return Deformation((mapped - pts).reshape(phi0.displacement.shape), frame.extent)


def _rotated(frame: Frame, theta: float) -> Frame:
    return warp(frame, _rigid_deformation(frame, theta, (0, 0)))


# ---------------------------------------------------------------------------
# File format
# ---------------------------------------------------------------------------

_DEF_MAGIC = b"DEF1"


def write_deformation(phi: Deformation, path) -> None:
    """Little-endian: magic 'DEF1', u32 nodes_x, u32 nodes_y, then
    row-major float64 (u_x, u_y) pairs."""
    with open(path, "wb") as fh:
        fh.write(_DEF_MAGIC)
        fh.write(struct.pack("<II", phi.nodes_x, phi.nodes_y))
        fh.write(phi.displacement.astype("<f8").tobytes())


def read_deformation(path, extent=(1.0, 1.0)) -> Deformation:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _DEF_MAGIC:
            raise ValueError(f"not a deformation file: bad magic {magic!r}")
        nx, ny = struct.unpack("<II", fh.read(8))
        data = np.frombuffer(fh.read(16 * nx * ny), dtype="<f8")
    return Deformation(data.reshape(ny, nx, 2).copy(), extent)


def restrict_deformation(phi: Deformation) -> Deformation:
    """Mesh-centered restriction of the displacement field."""
    from .frames import restrict_nodal

    return Deformation(restrict_nodal(phi.displacement), phi.extent)


def prolongate_deformation(phi: Deformation) -> Deformation:
    """Mesh-centered prolongation of the displacement field."""
    from .frames import prolongate_nodal

    return Deformation(prolongate_nodal(phi.displacement), phi.extent)
