"""Synthetic ground-truth data for end-to-end validation.

Generates periodic lattice images (Gaussian bumps, optional pore
holes), distorts them with known smooth motion, scan drift, and noise,
and measures recovered deformations and reconstructions against the
known truth. All generation is reproducible per seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .deform import Deformation, identity_for, warp
from .frames import Frame
from .series import DriftModel, drift_matrix


@dataclass(frozen=True)
class LatticeSpec:
    """Periodic bump lattice standing in for a crystal projection.

    Lengths are in domain units (the longest image side spans 1).
    Pores are Gaussian holes at the cell centers, active when
    pore_amplitude > 0.
    """

    size: int = 256
    basis1: tuple[float, float] = (13.0 / 255.0, 0.0)
    basis2: tuple[float, float] = (0.0, 13.0 / 255.0)
    atom_amplitude: float = 1.0
    atom_width: float = 2.5 / 255.0
    background: float = 0.25
    pore_amplitude: float = 0.0
    pore_width: float = 3.0 / 255.0

    def __post_init__(self):
        b = np.array([self.basis1, self.basis2], dtype=float)
        if abs(np.linalg.det(b)) < 1e-12:
            raise ValueError("lattice basis vectors are linearly dependent")
        if self.atom_width <= 0 or self.size < 2:
            raise ValueError("invalid lattice geometry")


@dataclass(frozen=True)
class MotionSpec:
    """Per-frame motion and noise of a synthetic series.

    translation_px : step translation per frame (cumulative across the
                     series; frame 1 is unmoved).
    warp_amplitude_px / warp_frequency : smooth sinusoidal displacement
                     with random per-frame phases, zero on frame 1.
    drift          : optional raster drift applied in scan coordinates.
    noise / noise_level : "none", or "gaussian" (additive sigma), or
                     "poisson" (dose = expected counts per pixel at the
                     mean intensity).
    """

    translation_px: tuple[float, float] = (0.0, 0.0)
    warp_amplitude_px: float = 0.0
    warp_frequency: int = 2
    drift: DriftModel | None = None
    noise: str = "none"
    noise_level: float = 0.0

    def __post_init__(self):
        if self.noise not in ("none", "gaussian", "poisson"):
            raise ValueError(f"unknown noise kind {self.noise!r}")
        if self.noise == "poisson" and self.noise_level <= 0:
            raise ValueError("poisson dose must be positive")
        if not np.all(np.isfinite(self.translation_px)):
            raise ValueError("translation must be finite")
        if self.warp_frequency < 1:
            raise ValueError("warp_frequency must be at least 1")


def render_lattice(spec: LatticeSpec) -> Frame:
    """Sum of Gaussian bumps at the lattice sites minus pore holes,
    clipped at zero. Deterministic in the spec."""
    n = spec.size
    s = 1.0 / (n - 1)
    xs = np.arange(n) * s
    gx, gy = np.meshgrid(xs, xs)
    img = np.full((n, n), spec.background, dtype=np.float64)

    basis = np.array([spec.basis1, spec.basis2], dtype=float).T  # columns
    half_cell = 0.5 * (basis[:, 0] + basis[:, 1])
    margin = 4.0 * max(spec.atom_width, spec.pore_width)
    corners = np.array([[-margin, -margin], [1 + margin, -margin],
                        [-margin, 1 + margin], [1 + margin, 1 + margin]]).T
    lattice_coords = np.linalg.solve(basis, corners)
    lo = np.floor(lattice_coords.min(axis=1)).astype(int) - 1
    hi = np.ceil(lattice_coords.max(axis=1)).astype(int) + 1

    def splat(center, amplitude, width):
        cx, cy = center
        if not (-margin <= cx <= 1 + margin and -margin <= cy <= 1 + margin):
            return
        r = 4.0 * width
        i0 = max(0, int(np.floor((cx - r) / s)))
        i1 = min(n, int(np.ceil((cx + r) / s)) + 1)
        j0 = max(0, int(np.floor((cy - r) / s)))
        j1 = min(n, int(np.ceil((cy + r) / s)) + 1)
        if i0 >= i1 or j0 >= j1:
            return
        dx = gx[j0:j1, i0:i1] - cx
        dy = gy[j0:j1, i0:i1] - cy
        img[j0:j1, i0:i1] += amplitude * np.exp(-(dx * dx + dy * dy)
                                                / (2.0 * width * width))

    for m1 in range(lo[0], hi[0] + 1):
        for m2 in range(lo[1], hi[1] + 1):
            site = basis @ np.array([m1, m2], dtype=float)
            splat(site, spec.atom_amplitude, spec.atom_width)
            if spec.pore_amplitude > 0:
                splat(site + half_cell, -spec.pore_amplitude, spec.pore_width)

    return Frame(np.maximum(img, 0.0))


def lattice_spot_indices(spec: LatticeSpec, size: int | None = None,
                         orders: int = 1) -> list:
    """Nominal FFT bin indices (u, v) of the lattice reflections.

    One representative of each +-symmetric pair, up to the given order
    of integer reciprocal combinations.
    """
    n = size if size is not None else spec.size
    basis = np.array([spec.basis1, spec.basis2], dtype=float).T
    recip = np.linalg.inv(basis).T / (n - 1) * n  # columns: bins per order
    # recip columns b_j satisfy b_j . a_i = n/(n-1) delta_ij in bin units
    spots = set()
    for m1 in range(-orders, orders + 1):
        for m2 in range(-orders, orders + 1):
            if (m1, m2) == (0, 0):
                continue
            k = recip @ np.array([m1, m2], dtype=float)
            u, v = int(round(k[0])), int(round(k[1]))
            if (u, v) == (0, 0):
                continue
            if (u, -v) in spots or (-u, v) in spots or (-u, -v) in spots:
                continue
            spots.add((u, v))
    return sorted(spots)


def _smooth_warp(rng: np.random.Generator, amplitude: float, frequency: int):
    """Random low-order sinusoidal displacement field as a closure."""
    ka = rng.integers(1, frequency + 1, size=2)
    kb = rng.integers(1, frequency + 1, size=2)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=4)
    signs = rng.choice([-1.0, 1.0], size=2)

    def field_fn(pts: np.ndarray) -> np.ndarray:
        x, y = pts[:, 0], pts[:, 1]
        ux = np.sin(np.pi * ka[0] * x + phases[0]) * np.sin(np.pi * kb[0] * y + phases[1])
        uy = np.sin(np.pi * ka[1] * x + phases[2]) * np.sin(np.pi * kb[1] * y + phases[3])
        return amplitude * np.stack([signs[0] * ux, signs[1] * uy], axis=-1)

    return field_fn


def synth_series(gt: Frame, motion: MotionSpec, n: int, seed: int):
    """Distorted, noisy frames plus the exact per-frame deformations.

    Frame i (1-based) samples gt through chi_i(x) = psi_i(M x): the
    scan-drift map followed by cumulative translation and that frame's
    smooth warp. Returns (frames, truths) with truths[i] the nodal
    displacement of chi_i on the conforming grid.
    """
    if n < 1:
        raise ValueError("need at least one frame")
    s = gt.pixel_spacing
    m = drift_matrix(motion.drift) if motion.drift is not None else np.eye(2)
    step = np.array(motion.translation_px, dtype=float) * s
    amp = motion.warp_amplitude_px * s

    phi0 = identity_for(gt)
    pts = phi0.node_points().reshape(-1, 2)
    drifted = pts @ m.T

    seeds = np.random.SeedSequence(seed).spawn(n)
    frames = []
    truths = []
    for i in range(n):
        rng = np.random.default_rng(seeds[i])
        # frame 1 anchors the reference geometry: no warp there
        warp_fn = _smooth_warp(rng, 0.0 if i == 0 else amp, motion.warp_frequency)
        mapped = drifted + i * step + warp_fn(drifted)
        truth = Deformation((mapped - pts).reshape(phi0.displacement.shape),
                            gt.extent)
        clean = warp(gt, truth)
        noisy = _apply_noise(clean, motion, rng)
        frames.append(noisy)
        truths.append(truth)
    return frames, truths


def _apply_noise(frame: Frame, motion: MotionSpec,
                 rng: np.random.Generator) -> Frame:
    if motion.noise == "none":
        return frame
    if motion.noise == "gaussian":
        vals = frame.intensities + rng.normal(0.0, motion.noise_level,
                                              frame.intensities.shape)
        return Frame(vals, frame.valid)
    # poisson: dose = expected counts per pixel at the mean intensity
    mean = float(frame.intensities[frame.valid].mean())
    if mean <= 0:
        raise ValueError("poisson noise needs a positive mean intensity")
    scale = motion.noise_level / mean
    counts = rng.poisson(np.maximum(frame.intensities * scale, 0.0))
    return Frame(counts.astype(np.float64), frame.valid)


def poisson_snr(gt: Frame, dose: float) -> float:
    """Signal-to-noise of a Poisson acquisition at the given dose:
    intensity standard deviation over the RMS shot noise."""
    vals = gt.intensities[gt.valid]
    mean = float(vals.mean())
    scale = dose / mean
    signal = float(vals.std()) * scale
    noise = np.sqrt(dose)
    return signal / noise


def dose_for_snr(gt: Frame, snr: float) -> float:
    """Dose giving the requested Poisson SNR for this ground truth."""
    vals = gt.intensities[gt.valid]
    contrast = float(vals.std()) / float(vals.mean())
    return (snr / contrast) ** 2


def deformation_error(estimated: Deformation, truth: Deformation,
                      region: np.ndarray | None = None):
    """Mean and max nodal endpoint error in pixel units."""
    if estimated.displacement.shape != truth.displacement.shape:
        raise ValueError("deformation grids do not match")
    err = np.linalg.norm(estimated.displacement - truth.displacement, axis=-1)
    px_scale = (max(estimated.nodes_x, estimated.nodes_y) - 2) / max(estimated.extent)
    err = err * px_scale
    if region is not None:
        if region.shape != err.shape:
            raise ValueError("region mask does not match the node grid")
        err = err[region]
        if err.size == 0:
            raise ValueError("region mask selects no nodes")
    return float(err.mean()), float(err.max())


def interior_mask(phi: Deformation, fraction: float = 0.8) -> np.ndarray:
    """Boolean node mask selecting the central fraction of the domain."""
    pts = phi.node_points()
    w, h = phi.extent
    mx = (1.0 - fraction) / 2.0
    return ((pts[..., 0] >= mx * w) & (pts[..., 0] <= (1 - mx) * w)
            & (pts[..., 1] >= mx * h) & (pts[..., 1] <= (1 - mx) * h))


# ---------------------------------------------------------------------------
# Scenario files
# ---------------------------------------------------------------------------

def save_scenario(path, lattice: LatticeSpec, motion: MotionSpec,
                  n_frames: int, seed: int) -> None:
    """Flat key = value description of a synthetic series."""

    def fmt(v):
        if isinstance(v, tuple):
            return ", ".join(repr(float(c)) for c in v)
        return repr(v)

    lines = [
        ("size", lattice.size), ("basis1", lattice.basis1),
        ("basis2", lattice.basis2), ("atom_amplitude", lattice.atom_amplitude),
        ("atom_width", lattice.atom_width), ("background", lattice.background),
        ("pore_amplitude", lattice.pore_amplitude),
        ("pore_width", lattice.pore_width),
        ("n_frames", n_frames), ("seed", seed),
        ("translation_px", motion.translation_px),
        ("warp_amplitude_px", motion.warp_amplitude_px),
        ("warp_frequency", motion.warp_frequency),
        ("noise", motion.noise), ("noise_level", motion.noise_level),
    ]
    if motion.drift is not None:
        lines += [("drift_v", motion.drift.v), ("drift_t", motion.drift.t),
                  ("drift_tf", motion.drift.tf), ("drift_h", motion.drift.h)]
    with open(path, "w") as fh:
        for key, val in lines:
            fh.write(f"{key} = {fmt(val)}\n")


def load_scenario(path):
    """Parse a scenario file; returns (lattice, motion, n_frames, seed)."""
    raw = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, val = line.split("=", 1)
            raw[key.strip()] = val.strip()

    def get(key, conv, default=None):
        if key not in raw:
            if default is None:
                raise ValueError(f"scenario is missing required key {key!r}")
            return default
        return conv(raw[key])

    def pair(text):
        parts = [float(p) for p in text.split(",")]
        if len(parts) != 2:
            raise ValueError(f"expected two comma-separated numbers, got {text!r}")
        return (parts[0], parts[1])

    lattice = LatticeSpec(
        size=get("size", int, 256),
        basis1=get("basis1", pair, LatticeSpec.basis1),
        basis2=get("basis2", pair, LatticeSpec.basis2),
        atom_amplitude=get("atom_amplitude", float, LatticeSpec.atom_amplitude),
        atom_width=get("atom_width", float, LatticeSpec.atom_width),
        background=get("background", float, LatticeSpec.background),
        pore_amplitude=get("pore_amplitude", float, LatticeSpec.pore_amplitude),
        pore_width=get("pore_width", float, LatticeSpec.pore_width))
    drift = None
    if "drift_v" in raw:
        drift = DriftModel(v=get("drift_v", pair), t=get("drift_t", float),
                           tf=get("drift_tf", float), h=get("drift_h", float))
    motion = MotionSpec(
        translation_px=get("translation_px", pair, (0.0, 0.0)),
        warp_amplitude_px=get("warp_amplitude_px", float, 0.0),
        warp_frequency=get("warp_frequency", int, 2),
        drift=drift,
        noise=get("noise", str, "none"),
        noise_level=get("noise_level", float, 0.0))
    return lattice, motion, get("n_frames", int, 9), get("seed", int, 0)


def psnr(reference: Frame, image: Frame, affine_fit: bool = True) -> float:
    """Peak signal-to-noise ratio of image against reference (dB).

    Computed over the common valid region; with affine_fit the image is
    first mapped through the least-squares a*x + b, so arbitrary linear
    intensity units compare fairly.
    """
    m = reference.valid & image.valid
    if not m.any():
        raise ValueError("no common valid region")
    ref = reference.intensities[m]
    img = image.intensities[m]
    if affine_fit:
        a, b = np.polyfit(img, ref, 1)
        img = a * img + b
    peak = float(ref.max() - ref.min())
    if peak <= 0:
        raise ValueError("reference has no dynamic range")
    mse = float(np.mean((img - ref) ** 2))
    if mse == 0:
        return np.inf
    return 10.0 * np.log10(peak ** 2 / mse)
