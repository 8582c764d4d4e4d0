"""Scalar frames on regular pixel grids.

A frame is a 2D array of intensities with a per-pixel validity mask,
extended to a continuous function on the unit-normalized domain by
bilinear interpolation. This module also provides the grid hierarchy
used by the coarse-to-fine solver: cell-centered transfers for images
(2^d per side) and mesh-centered transfers for nodal fields
((2^d + 1) per side).

Domain convention: pixel (row j, col i) sits at (i*s, j*s) with
s = 1 / (max(width, height) - 1), so the longest image side spans
exactly [0, 1].
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from PIL import Image

from ._kernels import bilinear_sample


class EmptyDomainError(ValueError):
    """Raised when an operation needs valid pixels and none exist."""


@dataclass(frozen=True)
class Frame:
    """Scalar intensity image with validity mask.

    intensities : (height, width) float array, arbitrary linear units.
    valid       : (height, width) bool array, True where measured.

    Treated as immutable after construction; all operations return new
    frames.
    """

    intensities: np.ndarray
    valid: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.intensities, dtype=np.float64))
        if arr.ndim != 2:
            raise ValueError(f"intensities must be 2D, got shape {arr.shape}")
        if arr.shape[0] < 2 or arr.shape[1] < 2:
            raise ValueError(f"frame must be at least 2x2, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("intensities contain non-finite values")
        if self.valid is None:
            mask = np.ones(arr.shape, dtype=bool)
        else:
            mask = np.ascontiguousarray(np.asarray(self.valid, dtype=bool))
            if mask.shape != arr.shape:
                raise ValueError("valid mask shape does not match intensities")
        object.__setattr__(self, "intensities", arr)
        object.__setattr__(self, "valid", mask)

    @property
    def width(self) -> int:
        return self.intensities.shape[1]

    @property
    def height(self) -> int:
        return self.intensities.shape[0]

    @property
    def pixel_spacing(self) -> float:
        """Distance between pixel nodes; the longest side spans [0, 1]."""
        return 1.0 / (max(self.width, self.height) - 1)

    @property
    def extent(self) -> tuple[float, float]:
        """(w, h) of the domain rectangle [0, w] x [0, h]."""
        s = self.pixel_spacing
        return ((self.width - 1) * s, (self.height - 1) * s)

    @cached_property
    def all_valid(self) -> bool:
        return bool(self.valid.all())

    @cached_property
    def flat_intensities(self) -> np.ndarray:
        return self.intensities.ravel()

    @cached_property
    def flat_mask(self):
        """Row-major uint8 mask for the sampling kernels, or None when
        every pixel is valid."""
        if self.all_valid:
            return None
        return self.valid.ravel().astype(np.uint8)

    def with_intensities(self, intensities: np.ndarray) -> "Frame":
        return Frame(intensities, self.valid.copy())


@dataclass(frozen=True)
class FrameStats:
    mean: float
    std_dev: float


def _prepare_points(x) -> tuple[np.ndarray, bool]:
    pts = np.asarray(x, dtype=np.float64)
    scalar = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[-1] != 2:
        raise ValueError("points must have shape (..., 2)")
    if not np.all(np.isfinite(pts)):
        raise ValueError("sample points must be finite")
    return pts, scalar


def pixel_coords(frame: Frame, points: np.ndarray):
    """Map domain points to clamped fractional pixel coordinates.

    Coordinates within 1e-9 px of an integer node are snapped onto it so
    that node hits survive the floating-point unit round trip. Returns
    (px, py, inside).
    """
    w, h = frame.extent
    x = points[:, 0]
    y = points[:, 1]
    inside = (x >= 0.0) & (x <= w) & (y >= 0.0) & (y <= h)
    scale = float(max(frame.width, frame.height) - 1)
    px = np.clip(x * scale, 0.0, frame.width - 1.0)
    py = np.clip(y * scale, 0.0, frame.height - 1.0)
    rx = np.round(px)
    ry = np.round(py)
    px = np.where(np.abs(px - rx) < 1e-9, rx, px)
    py = np.where(np.abs(py - ry) < 1e-9, ry, py)
    return px, py, inside


def sample_bilinear_many(frame: Frame, points: np.ndarray):
    """Bilinear samples of the frame at an (n, 2) array of (x, y) points.

    Points outside the domain are clamped to the boundary. Returns
    (values, valid) where valid is False outside the domain or where any
    contributing pixel (nonzero weight) is masked invalid.
    """
    scale = float(max(frame.width, frame.height) - 1)
    vals, _, mask_ok, inside = bilinear_sample(
        frame.flat_intensities, frame.flat_mask, frame.width, frame.height,
        scale, points, need_grad=False)
    return vals, mask_ok & inside


def sample_bilinear(frame: Frame, x) -> tuple[float, bool]:
    """Bilinear interpolation at a single point (x, y) in domain units."""
    pts, _ = _prepare_points(x)
    vals, ok = sample_bilinear_many(frame, pts)
    return float(vals[0]), bool(ok[0])


def sample_nearest_many(frame: Frame, points: np.ndarray):
    """Nearest-node samples; ties break toward the smaller index."""
    px, py, inside = pixel_coords(frame, points)
    # ceil(p - 0.5) rounds exact midpoints down to the smaller index
    ix = np.ceil(px - 0.5).astype(np.intp)
    iy = np.ceil(py - 0.5).astype(np.intp)
    vals = frame.intensities[iy, ix]
    return vals, inside & frame.valid[iy, ix]


def sample_nearest(frame: Frame, x) -> tuple[float, bool]:
    pts, _ = _prepare_points(x)
    vals, ok = sample_nearest_many(frame, pts)
    return float(vals[0]), bool(ok[0])


def stats(frame: Frame) -> FrameStats:
    """Mean and population standard deviation over valid pixels."""
    vals = frame.intensities[frame.valid]
    if vals.size == 0:
        raise EmptyDomainError("empty domain: frame has no valid pixels")
    mean = float(vals.mean())
    std = float(np.sqrt(np.mean((vals - mean) ** 2)))
    return FrameStats(mean=mean, std_dev=std)


# ---------------------------------------------------------------------------
# Grid transfers
# ---------------------------------------------------------------------------

def restrict(frame: Frame) -> Frame:
    """Cell-centered restriction: each coarse pixel is the mean of its
    2x2 fine children; coarse pixel valid iff all four children are."""
    h, w = frame.intensities.shape
    if h % 2 or w % 2 or h < 4 or w < 4:
        raise ValueError(f"cannot restrict cell-centered grid of shape {(h, w)}")
    blocks = frame.intensities.reshape(h // 2, 2, w // 2, 2)
    coarse = blocks.mean(axis=(1, 3))
    vblocks = frame.valid.reshape(h // 2, 2, w // 2, 2)
    return Frame(coarse, vblocks.all(axis=(1, 3)))


def prolongate(frame: Frame) -> Frame:
    """Cell-centered prolongation: copy each coarse pixel to its 2x2
    children."""
    fine = np.repeat(np.repeat(frame.intensities, 2, axis=0), 2, axis=1)
    vfine = np.repeat(np.repeat(frame.valid, 2, axis=0), 2, axis=1)
    return Frame(fine, vfine)


def prolongate_nodal(values: np.ndarray) -> np.ndarray:
    """Mesh-centered prolongation of a nodal array.

    (n+1, m+1, ...) -> (2n+1, 2m+1, ...): coarse node values are copied,
    new nodes are filled by linear interpolation of coarse neighbors.
    """
    v = np.asarray(values, dtype=np.float64)
    v = _prolong_axis(v, axis=0)
    v = _prolong_axis(v, axis=1)
    return v


def restrict_nodal(values: np.ndarray) -> np.ndarray:
    """Mesh-centered restriction: transpose of prolongation, rescaled
    row-wise so constants map to constants.

    (2n+1, 2m+1, ...) -> (n+1, m+1, ...).
    """
    v = np.asarray(values, dtype=np.float64)
    v = _restrict_axis(v, axis=0)
    v = _restrict_axis(v, axis=1)
    return v


def _prolong_axis(v: np.ndarray, axis: int) -> np.ndarray:
    v = np.moveaxis(v, axis, 0)
    n = v.shape[0]
    out = np.empty((2 * n - 1,) + v.shape[1:], dtype=v.dtype)
    out[0::2] = v
    out[1::2] = 0.5 * (v[:-1] + v[1:])
    return np.moveaxis(out, 0, axis)


def _restrict_axis(v: np.ndarray, axis: int) -> np.ndarray:
    v = np.moveaxis(v, axis, 0)
    n = v.shape[0]
    if n % 2 == 0 or n < 3:
        raise ValueError(f"cannot restrict mesh-centered axis of length {n}")
    m = (n - 1) // 2
    out = np.empty((m + 1,) + v.shape[1:], dtype=v.dtype)
    # interior weights (1, 2, 1)/4; boundary (2, 1)/3, from the transposed
    # hat-function stencil normalized per row
    out[1:-1] = (v[1:-2:2] + 2.0 * v[2:-1:2] + v[3::2]) / 4.0
    out[0] = (2.0 * v[0] + v[1]) / 3.0
    out[-1] = (2.0 * v[-1] + v[-2]) / 3.0
    return np.moveaxis(out, 0, axis)


def level_of(frame: Frame) -> int:
    """Grid level d of a 2^d x 2^d frame."""
    h, w = frame.intensities.shape
    if h != w:
        raise ValueError(f"frame is not square: {(h, w)}")
    d = int(round(np.log2(w)))
    if 2 ** d != w:
        raise ValueError(f"frame side {w} is not a power of two")
    return d


@dataclass(frozen=True)
class Pyramid:
    """Grid hierarchy holding one entry per level, coarse to fine."""

    levels: tuple
    m0: int
    m1: int

    def __post_init__(self):
        if len(self.levels) != self.m1 - self.m0 + 1:
            raise ValueError("pyramid level count does not match level range")

    def at(self, m: int):
        return self.levels[m - self.m0]


def build_pyramid(frame: Frame, m0: int, m1: int) -> Pyramid:
    """Restrict a 2^m1 frame down to level m0, keeping all levels."""
    if m0 > m1:
        raise ValueError(f"m0={m0} exceeds m1={m1}")
    d = level_of(frame)
    if d != m1:
        raise ValueError(f"frame is level {d}, expected m1={m1}")
    levels = [frame]
    for _ in range(m1 - m0):
        levels.append(restrict(levels[-1]))
    levels.reverse()
    return Pyramid(levels=tuple(levels), m0=m0, m1=m1)


def pad_to_pow2(frame: Frame) -> tuple[Frame, tuple[int, int]]:
    """Embed a frame into the smallest enclosing 2^d x 2^d canvas.

    Padding pixels are filled with the valid-region mean and masked
    invalid. Returns (padded_frame, (col_offset, row_offset)); offsets
    locate the original frame inside the canvas.
    """
    side = max(frame.width, frame.height)
    d = max(1, int(np.ceil(np.log2(side))))
    n = 2 ** d
    if n == frame.width and n == frame.height:
        return frame, (0, 0)
    fill = stats(frame).mean
    canvas = np.full((n, n), fill, dtype=np.float64)
    mask = np.zeros((n, n), dtype=bool)
    oy = (n - frame.height) // 2
    ox = (n - frame.width) // 2
    canvas[oy:oy + frame.height, ox:ox + frame.width] = frame.intensities
    mask[oy:oy + frame.height, ox:ox + frame.width] = frame.valid
    return Frame(canvas, mask), (ox, oy)


def crop(frame: Frame, offset: tuple[int, int], size: tuple[int, int]) -> Frame:
    ox, oy = offset
    w, h = size
    return Frame(frame.intensities[oy:oy + h, ox:ox + w].copy(),
                 frame.valid[oy:oy + h, ox:ox + w].copy())


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

_RAW_MAGIC = b"FRM1"


def write_frame_raw(frame: Frame, path) -> None:
    """Raw format: magic 'FRM1', u32 width, u32 height (little endian),
    row-major float32 intensities, then a packed validity bitmap."""
    with open(path, "wb") as fh:
        fh.write(_RAW_MAGIC)
        fh.write(struct.pack("<II", frame.width, frame.height))
        fh.write(frame.intensities.astype("<f4").tobytes())
        fh.write(np.packbits(frame.valid.ravel(), bitorder="little").tobytes())


def read_frame_raw(path) -> Frame:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _RAW_MAGIC:
            raise ValueError(f"not a raw frame file: bad magic {magic!r}")
        w, h = struct.unpack("<II", fh.read(8))
        n = w * h
        data = np.frombuffer(fh.read(4 * n), dtype="<f4").astype(np.float64)
        bits = np.frombuffer(fh.read((n + 7) // 8), dtype=np.uint8)
        mask = np.unpackbits(bits, count=n, bitorder="little").astype(bool)
    return Frame(data.reshape(h, w), mask.reshape(h, w))


def write_frame_image(frame: Frame, path) -> None:
    """16-bit grayscale PNG or TIFF with a JSON sidecar recording the
    intensity scale (and the mask when not all pixels are valid)."""
    lo = float(frame.intensities.min())
    hi = float(frame.intensities.max())
    span = hi - lo
    if span <= 0:
        span = 1.0
    scaled = np.round((frame.intensities - lo) / span * 65535.0).astype(np.uint16)
    Image.fromarray(scaled, mode="I;16").save(path)
    sidecar = {"lo": lo, "hi": hi, "width": frame.width, "height": frame.height}
    if not frame.valid.all():
        packed = np.packbits(frame.valid.ravel(), bitorder="little")
        sidecar["valid_bitmap_hex"] = packed.tobytes().hex()
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=1, sort_keys=True)


def read_frame_image(path) -> Frame:
    img = Image.open(path)
    arr = np.asarray(img, dtype=np.float64)
    with open(str(path) + ".json") as fh:
        sidecar = json.load(fh)
    lo, hi = sidecar["lo"], sidecar["hi"]
    span = hi - lo
    if span <= 0:
        span = 1.0
    data = arr / 65535.0 * span + lo
    if "valid_bitmap_hex" in sidecar:
        bits = np.frombuffer(bytes.fromhex(sidecar["valid_bitmap_hex"]), dtype=np.uint8)
        mask = np.unpackbits(bits, count=arr.size, bitorder="little").astype(bool)
        mask = mask.reshape(arr.shape)
    else:
        mask = np.ones(arr.shape, dtype=bool)
    return Frame(data, mask)


def read_frame(path) -> Frame:
    """Dispatch on extension: .frm raw, otherwise PNG/TIFF with sidecar."""
    p = str(path)
    if p.endswith(".frm"):
        return read_frame_raw(p)
    return read_frame_image(p)


def write_frame(frame: Frame, path) -> None:
    p = str(path)
    if p.endswith(".frm"):
        write_frame_raw(frame, p)
    else:
        write_frame_image(frame, p)
