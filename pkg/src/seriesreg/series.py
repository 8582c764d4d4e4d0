"""Whole-series registration and fusion.

Consecutive frames are registered pairwise first; chained compositions
of those deformations then seed the registration of every frame to a
common reference, which is refined over K outer rounds by re-averaging
(the regularization weight drops to lambda_reduction * lambda once the
reference is an average rather than a raw frame). Robust per-pixel
fusion and a first-order scan-drift model round out the pipeline.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .deform import Deformation, compose, constant, fit_rigid, identity_for, warp
from .frames import Frame
from .solver import RegistrationParams, multilevel_register, with_lambda


class SeriesRegistrationError(RuntimeError):
    """A pair registration inside the series loop failed."""


@dataclass(frozen=True)
class SeriesRegistration:
    """State of a finished series run.

    consecutive[i] maps frame i+2 onto frame i+1 (0-based list over the
    n-1 consecutive pairs); to_reference[i] maps frame i+1 onto the final
    reference. round_lambdas records the regularization weight used in
    each outer round.
    """

    frames: tuple
    consecutive: tuple
    to_reference: tuple
    reference: Frame
    outer_round: int
    consecutive_reports: tuple
    round_reports: tuple
    round_lambdas: tuple
    pair_registrations: int


def fuse(warped: list[Frame] | tuple, mode: str = "median") -> Frame:
    """Per-pixel mean or median over the frames valid at each pixel.

    A pixel of the result is invalid only where no input frame is valid.
    The median of an even count averages the two middle values.
    """
    if len(warped) == 0:
        raise ValueError("fuse needs at least one frame")
    if mode not in ("mean", "median"):
        raise ValueError(f"unknown fusion mode {mode!r}")
    shape = warped[0].intensities.shape
    for fr in warped:
        if fr.intensities.shape != shape:
            raise ValueError("fuse requires frames of common geometry")
    stack = np.stack([fr.intensities for fr in warped])
    masks = np.stack([fr.valid for fr in warped])
    any_valid = masks.any(axis=0)
    data = np.where(masks, stack, np.nan)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", category=RuntimeWarning)
        if mode == "mean":
            fused = np.nanmean(data, axis=0)
        else:
            fused = np.nanmedian(data, axis=0)
    fused = np.where(any_valid, fused, 0.0)
    return Frame(fused, any_valid)


def _register(f: Frame, g: Frame, guess, params, counter: dict,
              what: str):
    counter["pair_registrations"] = counter.get("pair_registrations", 0) + 1
    try:
        return multilevel_register(f, g, guess, params)
    except Exception as exc:
        raise SeriesRegistrationError(f"registration failed while {what}") from exc


def register_series(frames, params: RegistrationParams = RegistrationParams(),
                    fuse_mode: str = "median", counters: dict | None = None):
    """Register a frame series to an iteratively refined reference.

    Steps: (a) register every consecutive pair with an identity guess;
    (b) start from the first frame as reference; (c) in each of K rounds
    register every frame to the current reference, seeding frame i with
    the composition of its consecutive deformation and frame i-1's
    result, then fuse the warped originals into the next reference. The
    reference itself is never averaged in. Rounds after the first use
    the reduced regularization weight.

    Returns (reconstruction, SeriesRegistration).
    """
    frames = list(frames)
    n = len(frames)
    if n < 2:
        raise ValueError("series registration needs at least two frames")
    shape = frames[0].intensities.shape
    for fr in frames:
        if fr.intensities.shape != shape:
            raise ValueError("frames must share a common geometry")
    counter = counters if counters is not None else {}

    consecutive = []
    consecutive_reports = []
    for i in range(1, n):
        phi, rep = _register(frames[i], frames[i - 1], None, params, counter,
                             f"matching consecutive frames {i + 1} -> {i}")
        consecutive.append(phi)
        consecutive_reports.append(rep)

    reference = frames[0]
    to_reference: list[Deformation] = []
    round_reports = []
    round_lambdas = []
    for k in range(1, params.outer_rounds + 1):
        lam_k = params.lam if k == 1 else params.lambda_reduction * params.lam
        params_k = with_lambda(params, lam_k)
        round_lambdas.append(lam_k)
        phis = []
        reports = []
        phi, rep = _register(frames[0], reference, None, params_k, counter,
                             f"matching frame 1 to the round-{k} reference")
        phis.append(phi)
        reports.append(rep)
        for i in range(1, n):
            guess = compose(consecutive[i - 1], phis[i - 1])
            phi, rep = _register(frames[i], reference, guess, params_k, counter,
                                 f"matching frame {i + 1} to the round-{k} reference")
            phis.append(phi)
            reports.append(rep)
        warped = [warp(frames[i], phis[i]) for i in range(n)]
        reference = fuse(warped, fuse_mode)
        to_reference = phis
        round_reports.append(tuple(reports))

    reg = SeriesRegistration(
        frames=tuple(frames), consecutive=tuple(consecutive),
        to_reference=tuple(to_reference), reference=reference,
        outer_round=params.outer_rounds,
        consecutive_reports=tuple(consecutive_reports),
        round_reports=tuple(round_reports), round_lambdas=tuple(round_lambdas),
        pair_registrations=counter.get("pair_registrations", 0))
    return reference, reg


def register_series_rigid(frames, search_px: int, fuse_mode: str = "median"):
    """Translation-only baseline: align every frame to the first by
    exhaustive NCC search and fuse. Returns (reconstruction, shifts)."""
    frames = list(frames)
    if len(frames) < 2:
        raise ValueError("series registration needs at least two frames")
    to_ref = [constant(frames[0], (0, 0))]
    for fr in frames[1:]:
        to_ref.append(fit_rigid(fr, frames[0], search_px))
    warped = [warp(fr, phi) for fr, phi in zip(frames, to_ref)]
    return fuse(warped, fuse_mode), to_ref


# ---------------------------------------------------------------------------
# Extended variant: denoise every frame first, then re-register
# ---------------------------------------------------------------------------

def _chain_to_reference(frames, j: int, indices, params, counter):
    """Register frames[indices] to frames[j] by consecutive chaining.

    indices walk away from j one step at a time; each frame is first
    matched to its neighbor toward j (identity guess) and the chained
    composition seeds its registration to frame j.
    """
    phis = {j: identity_for(frames[j])}
    prev = j
    for i in indices:
        cons, _ = _register(frames[i], frames[prev], None, params, counter,
                            f"matching neighbors {i + 1} -> {prev + 1}")
        guess = compose(cons, phis[prev])
        phis[i], _ = _register(frames[i], frames[j], guess, params, counter,
                               f"matching frame {i + 1} to frame {j + 1}")
        prev = i
    return phis


def register_series_extended(frames, params: RegistrationParams = RegistrationParams(),
                             fuse_mode: str = "median", force: bool = False,
                             counters: dict | None = None) -> Frame:
    """Denoise every frame against all others, register the denoised
    frames with reduced regularization, and fuse the original frames
    through the resulting deformations.

    Costs about (n+1) times the plain algorithm in pair registrations,
    so series longer than 16 frames are refused unless force is set.
    """
    frames = list(frames)
    n = len(frames)
    if n < 2:
        raise ValueError("series registration needs at least two frames")
    if n > 16 and not force:
        raise ValueError(
            f"extended averaging of {n} frames costs ~(n+1)x the plain "
            "algorithm; pass force=True to run anyway")
    counter = counters if counters is not None else {}

    denoised = []
    for j in range(n):
        phis = {j: identity_for(frames[j])}
        phis.update(_chain_to_reference(frames, j, range(j - 1, -1, -1),
                                        params, counter))
        phis.update(_chain_to_reference(frames, j, range(j + 1, n),
                                        params, counter))
        warped = [warp(frames[i], phis[i]) for i in range(n)]
        denoised.append(fuse(warped, fuse_mode))

    # the denoised frames are clean enough for the reduced weight
    params_final = replace(params, lam=params.lambda_reduction * params.lam,
                           outer_rounds=1)
    _, reg = register_series(denoised, params_final, fuse_mode, counters=counter)
    warped = [warp(frames[i], reg.to_reference[i]) for i in range(n)]
    if counters is not None:
        counters.update(counter)
    return fuse(warped, fuse_mode)


# ---------------------------------------------------------------------------
# First-order scan drift
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DriftModel:
    """Raster timing and constant specimen velocity.

    v  : translation velocity (domain units per unit time).
    t  : time to scan one line.
    tf : flyback time between lines.
    h  : line height as fraction of the domain, 1/(N-1) for N lines.
    """

    v: tuple[float, float]
    t: float
    tf: float
    h: float

    def __post_init__(self):
        if self.t <= 0:
            raise ValueError("line time t must be positive")
        if self.tf < 0:
            raise ValueError("flyback time must be nonnegative")
        if not 0.0 < self.h <= 1.0:
            raise ValueError("line height h must lie in (0, 1]")
        object.__setattr__(self, "v", (float(self.v[0]), float(self.v[1])))


def drift_matrix(model: DriftModel) -> np.ndarray:
    """Linear map distorting the image domain under constant drift.

    Scanning position (x1, x2) happens a time t*x1 + (t+tf)*x2/h into
    the frame, by which the specimen has moved that long times v.
    """
    v1, v2 = model.v
    a = model.t
    b = (model.t + model.tf) / model.h
    return np.array([[1.0 - a * v1, -b * v1],
                     [-a * v2, 1.0 - b * v2]])


def _linear_deformation(frame: Frame, matrix: np.ndarray) -> Deformation:
    phi0 = identity_for(frame)
    pts = phi0.node_points().reshape(-1, 2)
    mapped = pts @ matrix.T
    return Deformation((mapped - pts).reshape(phi0.displacement.shape),
                       frame.extent)


def apply_drift(frame: Frame, model: DriftModel) -> Frame:
    """Forward distortion: the acquired image shows frame(M x)."""
    return warp(frame, _linear_deformation(frame, drift_matrix(model)))


def undrift(frame: Frame, model: DriftModel) -> Frame:
    """Remove the first-order drift distortion by resampling through
    the inverse of the drift matrix."""
    m = drift_matrix(model)
    det = float(np.linalg.det(m))
    if abs(det) < 1e-12:
        raise ValueError("drift matrix is singular; cannot undistort")
    return warp(frame, _linear_deformation(frame, np.linalg.inv(m)))


def estimate_drift_velocity(frames, model: DriftModel, search_px: int = 10):
    """Apparent specimen velocity from rigid consecutive-frame shifts.

    The shift recovered between consecutive frames divided by the frame
    time (N lines of t plus flybacks) estimates v for undrifting; use a
    measured velocity instead when one is available.
    """
    frames = list(frames)
    if len(frames) < 2:
        raise ValueError("velocity estimation needs at least two frames")
    lines = int(round(1.0 / model.h)) + 1
    frame_time = lines * model.t + (lines - 1) * model.tf
    shifts = []
    for a, b in zip(frames[1:], frames[:-1]):
        phi = fit_rigid(a, b, search_px)
        shifts.append(phi.displacement[0, 0])
    mean_shift = np.mean(shifts, axis=0)
    return (float(mean_shift[0] / frame_time), float(mean_shift[1] / frame_time))
