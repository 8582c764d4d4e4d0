"""Objective quality measures for registration results.

The central object is the residual d between the last acquired frame
and the reconstruction warped back onto it; if registration and
averaging were perfect, d is pure noise. Patch averages of d, their
block means, and the spot contrast of the residual's power spectrum
(an inverted IQ factor: low is good) quantify how close to noise d is.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import maximum_filter

from .deform import Deformation, invert, warp
from .frames import Frame
from .solver import RegistrationParams, multilevel_register


@dataclass(frozen=True)
class QualityReport:
    residual: Frame
    dp_curve: tuple           # ((p, mean of d_p), ...)
    local_grid: np.ndarray    # (L, L) block means of d_p at local_p
    local_p: int
    iq_spots: tuple           # (((u, v), iq), ...)
    iq_max: float
    spectrum: Frame

    def __post_init__(self):
        for p, m in self.dp_curve:
            if m < 0:
                raise ValueError("d_p means must be nonnegative")
        for _, iq in self.iq_spots:
            if iq <= 0:
                raise ValueError("IQ values must be positive")


def residual(f_n: Frame, f_0: Frame, phi_0n: Deformation) -> Frame:
    """d = f_n - f_0 o phi_0n with nearest-neighbor evaluation of f_0.

    Nearest sampling avoids smoothing the reconstruction before the
    comparison; pixels whose deformed position leaves the domain are
    invalid.
    """
    if f_n.intensities.shape != f_0.intensities.shape:
        raise ValueError("frames must share geometry")
    warped = warp(f_0, phi_0n, mode="nearest")
    d = f_n.intensities - warped.intensities
    return Frame(d, f_n.valid & warped.valid)


def residual_deformation(f_0: Frame, f_n: Frame, phi_n0: Deformation,
                         params: RegistrationParams = RegistrationParams(),
                         invert_tol: float = 1e-6):
    """phi_0n by registering the reconstruction to the last frame,
    seeded with the numerical inverse of the already known phi_n0."""
    guess = invert(phi_n0, tol=invert_tol, max_iter=200)
    phi, report = multilevel_register(f_0, f_n, guess, params)
    return phi, report


def _window_sums(arr: np.ndarray, size: int) -> np.ndarray:
    """Sums over all size x size windows via padded double cumsums."""
    c = np.cumsum(np.cumsum(arr, axis=0), axis=1)
    c = np.pad(c, ((1, 0), (1, 0)))
    return (c[size:, size:] - c[:-size, size:]
            - c[size:, :-size] + c[:-size, :-size])


def patch_metric(d: Frame, p: int):
    """Absolute patch means d_p over all (2p+1)^2 patches.

    Returns (d_p frame of size (H-2p) x (W-2p), scalar mean). Patches
    touching invalid pixels are marked invalid and excluded from the
    scalar.
    """
    if p < 1:
        raise ValueError("patch radius must be at least 1")
    size = 2 * p + 1
    h, w = d.intensities.shape
    if size > min(h, w):
        raise ValueError(f"patch size {size} exceeds frame size {(h, w)}")
    sums = _window_sums(np.where(d.valid, d.intensities, 0.0), size)
    counts = _window_sums(d.valid.astype(np.float64), size)
    dp = np.abs(sums) / size ** 2
    ok = counts > size ** 2 - 0.5
    if not ok.any():
        raise ValueError("no fully valid patch")
    dp_frame = Frame(np.where(ok, dp, 0.0), ok)
    return dp_frame, float(dp[ok].mean())


def local_quality_grid(dp: Frame, blocks: int) -> np.ndarray:
    """Arithmetic mean of d_p over an L x L partition.

    When the size is not divisible by L, pixels near the boundary are
    dropped symmetrically. Blocks without valid pixels come out NaN.
    """
    if blocks < 1:
        raise ValueError("block count must be at least 1")
    h, w = dp.intensities.shape
    bh, bw = h // blocks, w // blocks
    if bh < 1 or bw < 1:
        raise ValueError(f"cannot split {(h, w)} into {blocks}x{blocks} blocks")
    oy, ox = (h - bh * blocks) // 2, (w - bw * blocks) // 2
    vals = dp.intensities[oy:oy + bh * blocks, ox:ox + bw * blocks]
    mask = dp.valid[oy:oy + bh * blocks, ox:ox + bw * blocks]
    vals = (vals * mask).reshape(blocks, bh, blocks, bw).sum(axis=(1, 3))
    counts = mask.reshape(blocks, bh, blocks, bw).sum(axis=(1, 3))
    with np.errstate(invalid="ignore"):
        return np.where(counts > 0, vals / np.maximum(counts, 1), np.nan)


def power_spectrum(d: Frame) -> Frame:
    """Modulus of the DFT of the mean-subtracted residual, DC centered.

    Invalid pixels are zeroed after mean subtraction; no window function
    is applied so the spot amplitudes stay comparable.
    """
    vals = d.intensities[d.valid]
    mean = vals.mean() if vals.size else 0.0
    x = np.where(d.valid, d.intensities - mean, 0.0)
    spec = np.abs(np.fft.fftshift(np.fft.fft2(x)))
    return Frame(spec)


def _annulus_mean(spec: np.ndarray, cy: int, cx: int,
                  r_in: float = 2.0, r_out: float = 6.0) -> float:
    h, w = spec.shape
    y0, y1 = max(0, cy - 6), min(h, cy + 7)
    x0, x1 = max(0, cx - 6), min(w, cx + 7)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    r = np.hypot(yy - cy, xx - cx)
    ring = (r >= r_in) & (r <= r_out)
    ring &= ~((np.abs(yy - cy) <= 1) & (np.abs(xx - cx) <= 1))
    if not ring.any():
        raise ValueError(f"empty background annulus at spot pixel {(cy, cx)}")
    return float(spec[yy[ring], xx[ring]].mean())


def iq_factor(spectrum: Frame, spots) -> list:
    """Spot contrast of the power spectrum.

    For each frequency index pair (u, v) relative to DC: the maximum
    modulus over the 3x3 spot neighborhood divided by the mean modulus
    over the surrounding annulus (radii 2 to 6, spot excluded). For a
    residual, low values mean little structured signal is left.
    """
    spec = spectrum.intensities
    h, w = spec.shape
    cy, cx = h // 2, w // 2
    out = []
    for u, v in spots:
        sy, sx = cy + int(v), cx + int(u)
        if not (0 <= sy < h and 0 <= sx < w):
            raise ValueError(f"spot {(u, v)} outside the spectrum")
        y0, y1 = max(0, sy - 1), min(h, sy + 2)
        x0, x1 = max(0, sx - 1), min(w, sx + 2)
        peak = float(spec[y0:y1, x0:x1].max())
        background = _annulus_mean(spec, sy, sx)
        if background <= 0.0:
            iq = np.inf if peak > 0 else 1.0
        else:
            iq = peak / background
        out.append(((int(u), int(v)), float(iq)))
    return out


def find_spots(spectrum: Frame, max_spots: int = 10, min_ratio: float = 3.0,
               dc_radius: float = 3.0) -> list:
    """Auto-detect candidate lattice spots in a power spectrum.

    Local maxima whose peak exceeds min_ratio times their annulus
    background, excluding a disk around DC, strongest first.
    """
    spec = spectrum.intensities
    h, w = spec.shape
    cy, cx = h // 2, w // 2
    is_max = spec == maximum_filter(spec, size=3, mode="nearest")
    yy, xx = np.nonzero(is_max)
    r_dc = np.hypot(yy - cy, xx - cx)
    edge_ok = (yy >= 7) & (yy < h - 7) & (xx >= 7) & (xx < w - 7)
    keep = (r_dc > dc_radius) & edge_ok
    order = np.argsort(spec[yy[keep], xx[keep]])[::-1]
    found = []
    for idx in order[:max_spots * 8]:
        sy, sx = int(yy[keep][idx]), int(xx[keep][idx])
        background = _annulus_mean(spec, sy, sx)
        if background > 0 and spec[sy, sx] / background >= min_ratio:
            found.append((sx - cx, sy - cy))
            if len(found) >= max_spots:
                break
    return found


def build_quality_report(f_n: Frame, f_0: Frame, phi_0n: Deformation,
                         spots, p_max: int = 12, local_p: int = 2,
                         grid_blocks: int = 9) -> QualityReport:
    """Residual, d_p curve for p = 1..p_max, local grid, and IQ table."""
    d = residual(f_n, f_0, phi_0n)
    curve = []
    dp_local = None
    for p in range(1, p_max + 1):
        dp_frame, mean = patch_metric(d, p)
        curve.append((p, mean))
        if p == local_p:
            dp_local = dp_frame
    if dp_local is None:
        dp_local, _ = patch_metric(d, local_p)
    grid = local_quality_grid(dp_local, grid_blocks)
    spec = power_spectrum(d)
    spot_iqs = iq_factor(spec, spots) if spots else []
    iq_max = max((iq for _, iq in spot_iqs), default=0.0)
    return QualityReport(residual=d, dp_curve=tuple(curve), local_grid=grid,
                         local_p=local_p, iq_spots=tuple(spot_iqs),
                         iq_max=float(iq_max), spectrum=spec)


# ---------------------------------------------------------------------------
# Artifact output
# ---------------------------------------------------------------------------

def _render_png(arr: np.ndarray, path, log_scale: bool = False) -> None:
    a = np.log1p(np.abs(arr)) if log_scale else np.asarray(arr, dtype=np.float64)
    lo, hi = float(a.min()), float(a.max())
    span = hi - lo if hi > lo else 1.0
    img = np.round((a - lo) / span * 255.0).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path)


def write_quality_artifacts(report: QualityReport, outdir) -> None:
    """CSV tables plus PNG renderings of d, d_p, and the spectrum."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "dp_curve.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["p", "mean_dp"])
        for p, m in report.dp_curve:
            writer.writerow([p, repr(m)])
    with open(outdir / "local_grid.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in report.local_grid:
            writer.writerow([repr(float(v)) for v in row])
    with open(outdir / "iq_spots.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["u", "v", "radius", "iq"])
        for (u, v), iq in report.iq_spots:
            writer.writerow([u, v, repr(float(np.hypot(u, v))), repr(iq)])
    _render_png(report.residual.intensities, outdir / "residual.png")
    dp_frame, _ = patch_metric(report.residual, report.local_p)
    _render_png(dp_frame.intensities, outdir / "patch_metric.png")
    _render_png(report.spectrum.intensities, outdir / "spectrum.png", log_scale=True)
