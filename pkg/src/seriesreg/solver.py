"""Sobolev-preconditioned gradient flow with a multilevel driver.

The descent direction is the weak-form first variation mapped through
the inverse of the H1 metric operator A = M + (sigma^2/2) K (mass and
stiffness of the bilinear nodal basis, natural Neumann boundary), which
acts like one implicit heat step of size sigma^2/2. Steps are chosen by
the Armijo rule with widening; the outer loop runs coarse to fine over
the grid hierarchy.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import cg

from .deform import (Deformation, identity_for, prolongate_deformation,
                     restrict_deformation)
from .objective import DualField, EnergyContext, fe_operators_2d
from .frames import Frame, build_pyramid, level_of

TAU_MIN = 1e-12
MAX_WIDENINGS = 10


class StepUnderflowError(RuntimeError):
    """Armijo search found no admissible step above TAU_MIN."""


class SolverError(RuntimeError):
    """Inner linear solve failed to converge."""


@dataclass(frozen=True)
class RegistrationParams:
    """Knobs of the pairwise registration.

    lam        : regularization weight lambda.
    sigma      : smoothing scale of the descent metric in domain units;
                 None picks twice the fine-grid node spacing.
    rho        : Armijo threshold in (0, 1).
    tau0       : initial trial step.
    max_iters_per_level : iteration cap per grid level.
    stop_decay : stop when the relative energy decay falls below this.
    m0, m1     : coarsest / finest grid level; m1=None derives it from
                 the frame resolution.
    lambda_reduction : factor applied to lam from the second outer
                 round of series registration on.
    outer_rounds : K, number of reference-refinement rounds.
    """

    lam: float = 0.05
    sigma: float | None = None
    rho: float = 0.25
    tau0: float = 1.0
    max_iters_per_level: int = 200
    stop_decay: float = 1e-6
    m0: int = 4
    m1: int | None = None
    lambda_reduction: float = 0.1
    outer_rounds: int = 3

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lam must be positive")
        if self.sigma is not None and self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if not 0.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (0, 1)")
        if self.tau0 <= 0:
            raise ValueError("tau0 must be positive")
        if self.stop_decay <= 0:
            raise ValueError("stop_decay must be positive")
        if not 0.0 < self.lambda_reduction <= 1.0:
            raise ValueError("lambda_reduction must lie in (0, 1]")
        if self.m1 is not None and self.m0 > self.m1:
            raise ValueError("m0 must not exceed m1")
        if self.outer_rounds < 1:
            raise ValueError("outer_rounds must be at least 1")


@dataclass(frozen=True)
class StepRecord:
    level: int
    iteration: int
    tau: float
    data: float
    regularizer: float
    energy: float
    ratio: float


@dataclass(frozen=True)
class SolveReport:
    """Per-step trace of one registration run."""

    records: tuple
    level_iterations: dict
    final_energy: float
    termination: str
    lam: float
    sigma: float

    def __post_init__(self):
        by_level: dict[int, float] = {}
        for rec in self.records:
            if rec.level in by_level and rec.energy >= by_level[rec.level]:
                raise ValueError("energy trace is not strictly decreasing")
            by_level[rec.level] = rec.energy


def write_report(report: SolveReport, path) -> None:
    """Structured text: one record per accepted step."""
    with open(path, "w") as fh:
        fh.write(f"# lambda = {report.lam!r}\n")
        fh.write(f"# sigma = {report.sigma!r}\n")
        fh.write(f"# termination = {report.termination}\n")
        fh.write(f"# final_energy = {report.final_energy!r}\n")
        fh.write("# columns: level iter tau data reg energy ratio\n")
        for r in report.records:
            fh.write(f"{r.level} {r.iteration} {r.tau!r} {r.data!r} "
                     f"{r.regularizer!r} {r.energy!r} {r.ratio!r}\n")


# ---------------------------------------------------------------------------
# Sobolev metric
# ---------------------------------------------------------------------------

@lru_cache(maxsize=64)
def _metric_operator(nodes_x: int, nodes_y: int, extent: tuple,
                     sigma: float):
    mass, stiffness = fe_operators_2d(nodes_x, nodes_y, extent)
    a = (mass + 0.5 * sigma ** 2 * stiffness).tocsr()
    jacobi = sp.diags(1.0 / a.diagonal())
    return a, jacobi


def sobolev_apply_inverse(dual: DualField, sigma: float,
                          x0: np.ndarray | None = None) -> Deformation:
    """Riesz representation of the dual field in the scaled H1 metric.

    Solves (M + (sigma^2/2) K) u = dual componentwise with conjugate
    gradients to relative residual 1e-10. The sigma -> 0 limit returns
    the mass-matrix solve of the dual.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    ny, nx = dual.values.shape[:2]
    a, jacobi = _metric_operator(nx, ny, dual.extent, float(sigma))
    out = np.empty_like(dual.values)
    for comp in range(2):
        b = dual.values[..., comp].ravel()
        guess = None if x0 is None else x0[..., comp].ravel()
        if not b.any():
            out[..., comp] = 0.0
            continue
        u, info = cg(a, b, x0=guess, rtol=1e-10, atol=0.0, M=jacobi,
                     maxiter=20 * nx * ny)
        if info != 0:
            raise SolverError(
                f"metric solve did not converge (info={info}, sigma={sigma})")
        out[..., comp] = u.reshape(ny, nx)
    return Deformation(out, dual.extent)


# ---------------------------------------------------------------------------
# Line search
# ---------------------------------------------------------------------------

def armijo_step(phi, direction, energy_fn, rho: float, tau_start: float,
                slope0: float, energy0: float | None = None):
    """Armijo rule with widening on Phi(tau) = energy_fn(phi + tau*dir).

    Accepts the largest tau from the doubling/halving schedule whose
    secant slope satisfies (Phi(tau) - Phi(0)) / tau <= rho * slope0,
    i.e. the achieved decay is at least rho times the predicted decay.
    Returns (tau, new_phi, new_energy, ratio).
    """
    if not 0.0 < rho < 1.0:
        raise ValueError("rho must lie in (0, 1)")
    if tau_start <= 0:
        raise ValueError("tau_start must be positive")
    if not slope0 < 0:
        raise ValueError("direction is not a descent direction")
    e0 = energy_fn(phi) if energy0 is None else energy0

    def probe(tau):
        cand = phi + tau * direction
        e = energy_fn(cand)
        return (e - e0) / tau <= rho * slope0, cand, e

    tau = tau_start
    ok, cand, e = probe(tau)
    if ok:
        for _ in range(MAX_WIDENINGS):
            ok2, cand2, e2 = probe(2.0 * tau)
            if not ok2:
                break
            tau, cand, e = 2.0 * tau, cand2, e2
    else:
        while not ok:
            tau *= 0.5
            if tau < TAU_MIN:
                raise StepUnderflowError(
                    "no admissible step: local minimum or non-descent direction")
            ok, cand, e = probe(tau)
    ratio = ((e - e0) / tau) / slope0
    return tau, cand, e, ratio


# ---------------------------------------------------------------------------
# Single-level flow and multilevel driver
# ---------------------------------------------------------------------------

def _resolve_sigma(params: RegistrationParams, m1: int) -> float:
    if params.sigma is not None:
        return params.sigma
    return 2.0 / 2 ** m1


def gradient_flow_level(f: Frame, g: Frame, phi0: Deformation,
                        params: RegistrationParams, level: int | None = None,
                        sigma: float | None = None):
    """Explicit gradient flow on one grid level until the energy stalls.

    Returns (deformation, records, termination) with one record per
    accepted step; the energy trace is strictly decreasing by
    construction of the line search.
    """
    if level is None:
        level = level_of(f)
    if sigma is None:
        sigma = _resolve_sigma(params, level)
    ctx = EnergyContext(f, g, phi0.nodes_x, phi0.nodes_y)
    lam = params.lam
    extent = phi0.extent
    probes: dict[int, tuple] = {}

    def energy_total(v):
        ev = ctx.energy(Deformation(v, extent), lam)
        probes[id(v)] = (v, ev)    # keep v alive so its id stays unique
        return ev.total

    u = phi0.displacement
    ev = ctx.energy(phi0, lam)
    records = []
    tau = params.tau0
    termination = "max-iters"
    increment = None
    for it in range(1, params.max_iters_per_level + 1):
        dual = ctx.variation(Deformation(u, extent), lam)
        warm = None if increment is None else increment.displacement
        increment = sobolev_apply_inverse(dual, sigma, x0=warm)
        direction = -increment.displacement
        slope0 = float((dual.values * direction).sum())
        if slope0 >= -1e-14 * (1.0 + abs(ev.total)):
            termination = "converged"
            break
        try:
            tau, u_new, _, ratio = armijo_step(
                u, direction, energy_total, params.rho, tau,
                slope0, energy0=ev.total)
        except StepUnderflowError:
            # cannot make progress here; treat as converged on this level
            termination = "step-underflow"
            break
        ev_new = probes[id(u_new)][1]
        probes.clear()
        records.append(StepRecord(level=level, iteration=it, tau=tau,
                                  data=ev_new.data, regularizer=ev_new.regularizer,
                                  energy=ev_new.total, ratio=ratio))
        decay = (ev.total - ev_new.total) / max(abs(ev.total), 1e-30)
        u, ev = u_new, ev_new
        if decay < params.stop_decay:
            termination = "converged"
            break
    return Deformation(u, extent), records, termination


def multilevel_register(f: Frame, g: Frame,
                        phi_init: Deformation | None = None,
                        params: RegistrationParams = RegistrationParams()):
    """Coarse-to-fine registration of f onto g (finds f o phi ~ g).

    Restricts images and the initial deformation down to level m0, runs
    the gradient flow per level, and prolongates the result upward until
    the native resolution is reached.
    """
    m1 = level_of(f)
    if level_of(g) != m1:
        raise ValueError("f and g must share the grid level")
    if params.m1 is not None and params.m1 != m1:
        raise ValueError(f"params.m1={params.m1} but frames are level {m1}")
    m0 = min(params.m0, m1)
    if phi_init is None:
        phi_init = identity_for(f)
    if (phi_init.nodes_x, phi_init.nodes_y) != (f.width + 1, f.height + 1):
        raise ValueError("phi_init does not conform to the frame grid")
    sigma = _resolve_sigma(params, m1)

    f_pyr = build_pyramid(f, m0, m1)
    g_pyr = build_pyramid(g, m0, m1)
    phis = [phi_init]
    for _ in range(m1 - m0):
        phis.append(restrict_deformation(phis[-1]))
    phi = phis[-1]

    records: list[StepRecord] = []
    level_iterations: dict[int, int] = {}
    termination = "converged"
    final_energy = np.nan
    for m in range(m0, m1 + 1):
        phi, recs, termination = gradient_flow_level(
            f_pyr.at(m), g_pyr.at(m), phi, params, level=m, sigma=sigma)
        records.extend(recs)
        level_iterations[m] = len(recs)
        if recs:
            final_energy = recs[-1].energy
        if m < m1:
            phi = prolongate_deformation(phi)
    if not np.isfinite(final_energy):
        ctx = EnergyContext(f, g, phi.nodes_x, phi.nodes_y)
        final_energy = ctx.energy(phi, params.lam).total
    report = SolveReport(records=tuple(records),
                         level_iterations=level_iterations,
                         final_energy=float(final_energy),
                         termination=termination,
                         lam=params.lam, sigma=sigma)
    return phi, report


def with_lambda(params: RegistrationParams, lam: float) -> RegistrationParams:
    return replace(params, lam=lam)
