"""Implicit-Euler / projected SOR solver for the parabolic obstacle problem.

Each step solves, for the integrated temperature u >= 0,

    c (u - u_old)/dt - L u - f >= 0,   u >= 0,   complementarity,

with u = s*t on the source set K and u = 0 on the box boundary.  The
weak solution (temperature) is the backward difference v = (u - u_old)/dt.
Setting c = lambda^{(2-n)/n}, s = lambda^{(n-2)/n}, sampling coefficients at
lambda^{1/n} x and shrinking K by lambda^{1/n} gives the rescaled problem.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import _kernels as kern
from .grid import (DomainMasks, Grid, StencilOperator, assemble_operator, color_order, embed_ball_boundary,
                   mask_ball_source)
from .media import CoefficientField

log = logging.getLogger(__name__)

FB_THRESHOLD = 1e-10


class SolverError(RuntimeError):
    pass


class DomainTooSmallError(SolverError):
    pass


@dataclass
class ProblemSetup:
    grid: Grid
    masks: DomainMasks
    op: StencilOperator
    f: np.ndarray
    v0: np.ndarray
    g_field: np.ndarray
    dt: float
    T: float
    lam: float = 1.0
    omega: float | None = None       # None: estimate from the size of the positive set
    tol: float = 1e-9                # relative to max|f|
    max_sweeps: int | None = None

    @property
    def n(self) -> int:
        return self.grid.dim

    @property
    def time_coef(self) -> float:
        return self.lam ** ((2.0 - self.n) / self.n)

    @property
    def boundary_scale(self) -> float:
        return self.lam ** ((self.n - 2.0) / self.n)

    @property
    def f_norm(self) -> float:
        return float(np.abs(self.f).max())


@dataclass
class StepStats:
    sweeps: int
    residual: float
    omega: float
    band_cells: int


@dataclass
class ObstacleState:
    u: np.ndarray
    t_now: float
    u_prev: np.ndarray | None = None
    t_prev: float = 0.0
    history: list[tuple[float, np.ndarray]] = field(default_factory=list)

    @property
    def v(self) -> np.ndarray:
        if self.u_prev is None:
            raise SolverError("no previous step stored")
        return np.maximum((self.u - self.u_prev) / (self.t_now - self.t_prev), 0.0)


@dataclass
class FreeBoundarySnapshot:
    t: float
    boundary_cells: np.ndarray   # (k, n) coordinates of boundary cell centres
    min_radius: float
    max_radius: float


@dataclass
class RunDiagnostics:
    max_complementarity: float = 0.0
    min_u: float = 0.0
    min_increment: float = 0.0      # most negative u_new - u_old over all steps
    nested: bool = True
    steps: int = 0
    total_sweeps: int = 0


@dataclass
class RunResult:
    setup: ProblemSetup
    times: list[float]
    u: list[np.ndarray]
    v: list[np.ndarray]
    snapshots: list[FreeBoundarySnapshot]
    diagnostics: RunDiagnostics
    u_pairs: list[tuple[float, np.ndarray, float, np.ndarray]] = field(default_factory=list)


# --------------------------------------------------------------- setup helpers

def initial_profile(grid: Grid, r_K: float, r_omega: float) -> np.ndarray:
    """v0 = psi((r_omega - |x|)/(r_omega - r_K)) with psi(s) = sin(pi s/2) on [0,1], 1 above, 0 below.

    v0 = 1 on K, v0 > 0 exactly on |x| < r_omega and |D v0| = pi/(2(r_omega - r_K)) on the rim.
    """
    if not r_omega > r_K:
        raise ValueError("initial support radius must exceed the source radius")
    s = (r_omega - grid.radius) / (r_omega - r_K)
    return np.where(s >= 1.0, 1.0, np.where(s > 0.0, np.sin(0.5 * np.pi * np.clip(s, 0, 1)), 0.0))


def sample_g(grid: Grid, fld: CoefficientField, shift: float = 1.0) -> np.ndarray:
    if fld.g0 is not None:
        return np.full(grid.shape, fld.g0)
    out = np.empty(grid.shape)
    flat = out.reshape(grid.cells, -1)
    for i, x1 in enumerate(grid.axis):
        sub = np.stack(np.meshgrid(*([grid.axis] * (grid.dim - 1)), indexing="ij"), axis=-1)
        pts = np.concatenate([np.full(sub.shape[:-1] + (1,), x1), sub], axis=-1)
        flat[i] = fld.g(pts * shift).ravel()
    return out


def source_term(v0: np.ndarray, g: np.ndarray) -> np.ndarray:
    return np.where(v0 > 0.0, v0, -1.0 / g)


def make_setup(grid: Grid, fld: CoefficientField, r_K: float, r_omega: float, dt: float, T: float,
               lam: float = 1.0, v0_scale: float = 1.0, op: StencilOperator | None = None,
               tol: float = 1e-9, omega: float | None = None) -> ProblemSetup:
    """Unscaled (lam = 1) or rescaled problem with ball source and the sine-rim initial profile.

    For lam > 1 the source set and initial support shrink by lam^{1/n}, the
    coefficients are sampled at lam^{1/n} x and f(x) is the unscaled f at lam^{1/n} x.
    """
    n = grid.dim
    s = lam ** (1.0 / n)
    masks = mask_ball_source(grid, r_K / s)
    if op is None:
        op = embed_ball_boundary(assemble_operator(grid, fld, shift=s if lam != 1.0 else None), masks)
    v0 = v0_scale * initial_profile(grid, r_K / s, r_omega / s)
    v0[masks.k_mask] = 1.0
    g = sample_g(grid, fld, s)
    f = source_term(v0, g)
    return ProblemSetup(grid=grid, masks=masks, op=op, f=f, v0=v0, g_field=g, dt=dt, T=T,
                        lam=lam, tol=tol, omega=omega)


# ------------------------------------------------------------------ stepping

def _estimate_omega(setup: ProblemSetup, band_radius: float, shift: float, dbar: float, abar: float) -> float:
    # Jacobi spectral radius for a ball of the band's radius: first Dirichlet eigenvalue (pi/rho)^2
    lam1 = abar * (math.pi / max(band_radius, 3 * setup.grid.h)) ** 2
    rho = 1.0 - (shift + lam1) / (shift + dbar)
    rho = min(max(rho, 0.0), 1.0 - 1e-12)
    return 2.0 / (1.0 + math.sqrt(1.0 - rho * rho))


class _Stepper:
    """Caches per-setup data (diagonal, band orderings) across steps."""

    def __init__(self, setup: ProblemSetup):
        self.setup = setup
        op = setup.op
        self.free = setup.masks.free_idx
        self.diag = op.diagonal(self.free)
        self.dbar = float(self.diag[self.free].mean())
        n = setup.n
        self.abar = self.dbar * setup.grid.h ** 2 / (2 * n)
        self.mixed = op.pairs.shape[0] > 0
        self.free_mask = setup.masks.active
        self.k_flat = np.flatnonzero(setup.masks.k_mask.ravel())
        self.outer_flat = np.flatnonzero(setup.masks.outer_mask.ravel())
        self.near_outer = ndimage.binary_dilation(setup.masks.outer_mask, iterations=1) & self.free_mask
        self.band_width = 3
        self.total_sweeps = 0

    def step(self, u_old: np.ndarray, v_pred: np.ndarray | None, t_new: float) -> tuple[np.ndarray, StepStats]:
        s = self.setup
        op = s.op
        shift = s.time_coef / s.dt
        b = (s.f + shift * u_old).ravel()
        u = u_old + (s.dt * v_pred if v_pred is not None else 0.0)
        u = np.maximum(u, 0.0).ravel()
        u[self.k_flat] = s.boundary_scale * t_new
        u[self.outer_flat] = 0.0
        tol = s.tol * s.f_norm
        max_sweeps = s.max_sweeps or int(50 * s.grid.size ** (1.0 / 3.0) * 10)

        while True:
            pos = (u.reshape(s.grid.shape) > 0.0) | s.masks.k_mask
            band = ndimage.binary_dilation(pos, iterations=self.band_width) & self.free_mask
            band_idx = np.flatnonzero(band.ravel())
            order = color_order(s.grid, band_idx, self.mixed)
            r_band = float(s.grid.radius[band].max()) if band_idx.size else s.grid.h
            omega = s.omega or _estimate_omega(s, r_band, shift, self.dbar, self.abar)
            sweeps = 0
            res = np.inf
            while sweeps < max_sweeps:
                for _ in range(10):
                    kern.psor_sweep(u, b, self.diag, order, op.strides, op.T, op.W, op.pairs, shift, omega)
                sweeps += 10
                res, _ = kern.complementarity(u, b, band_idx, op.strides, op.T, op.W, op.pairs, shift)
                if res <= tol:
                    break
            self.total_sweeps += sweeps
            if res > tol:
                raise SolverError(f"PSOR did not converge in {sweeps} sweeps (residual {res:.3e}, omega {omega:.3f}); "
                                  "check dt / omega")
            full_res, umin = kern.complementarity(u, b, self.free, op.strides, op.T, op.W, op.pairs, shift)
            if full_res <= tol:
                break
            # positivity reached the band edge: widen and continue from the current iterate
            self.band_width *= 2
            log.debug("widening PSOR band to %d cells", self.band_width)
        u = u.reshape(s.grid.shape)
        if np.any(u[self.near_outer] > FB_THRESHOLD):
            raise DomainTooSmallError(f"support reached the box boundary at t = {t_new:.4g}; enlarge R_box")
        return u, StepStats(sweeps=sweeps, residual=full_res, omega=omega, band_cells=band_idx.size)


def step_obstacle(state: ObstacleState, setup: ProblemSetup, stepper: _Stepper | None = None) -> ObstacleState:
    stepper = stepper or _Stepper(setup)
    t_new = state.t_now + setup.dt
    v_pred = state.v if state.u_prev is not None else None
    u_new, _ = stepper.step(state.u, v_pred, t_new)
    return ObstacleState(u=u_new, t_now=t_new, u_prev=state.u, t_prev=state.t_now, history=state.history)


def complementarity_residual(setup: ProblemSetup, u_new: np.ndarray, u_old: np.ndarray) -> tuple[float, float]:
    """(max |min(u, c(u-u_old)/dt - L u - f)|, min u) over the free cells."""
    op = setup.op
    shift = setup.time_coef / setup.dt
    b = (setup.f + shift * u_old).ravel()
    return kern.complementarity(np.ascontiguousarray(u_new).ravel(), b, setup.masks.free_idx,
                                op.strides, op.T, op.W, op.pairs, shift)


# ------------------------------------------------------------ free boundary

def positive_set(u: np.ndarray, threshold: float = FB_THRESHOLD) -> np.ndarray:
    return u > threshold


def extract_free_boundary(grid: Grid, field_: np.ndarray, t: float, exclude: np.ndarray | None = None,
                          threshold: float = FB_THRESHOLD) -> FreeBoundarySnapshot:
    """Positive cells with at least one non-positive face neighbour."""
    pos = field_ > threshold
    if exclude is not None:
        pos_all = pos | exclude
    else:
        pos_all = pos
    interior = ndimage.binary_erosion(pos_all, structure=ndimage.generate_binary_structure(grid.dim, 1),
                                      border_value=0)
    bnd = pos & ~interior
    if exclude is not None:
        bnd &= ~exclude
    pts = np.stack([np.broadcast_to(grid.coords(k), grid.shape)[bnd] for k in range(grid.dim)], axis=-1)
    if pts.shape[0] == 0:
        return FreeBoundarySnapshot(t=t, boundary_cells=pts, min_radius=float("nan"), max_radius=float("nan"))
    r = np.linalg.norm(pts, axis=-1)
    return FreeBoundarySnapshot(t=t, boundary_cells=pts, min_radius=float(r.min()), max_radius=float(r.max()))


# ---------------------------------------------------------------------- run

def run(setup: ProblemSetup, output_times, keep_all_radii: bool = False) -> RunResult:
    output_times = sorted(float(t) for t in output_times)
    if output_times and (output_times[0] <= 0 or output_times[-1] > setup.T + 1e-12):
        raise ValueError("output times must lie in (0, T]")
    stepper = _Stepper(setup)
    diag = RunDiagnostics()
    u = np.zeros(setup.grid.shape)
    u[setup.masks.k_mask] = 0.0
    t = 0.0
    v_pred = None
    prev_pos = setup.v0 > 0
    nsteps = int(round(setup.T / setup.dt))
    out_steps = {int(round(tt / setup.dt)): tt for tt in output_times}
    res = RunResult(setup=setup, times=[], u=[], v=[], snapshots=[], diagnostics=diag)
    res.radius_series = []
    for k in range(1, nsteps + 1):
        t_new = k * setup.dt
        u_new, stats = stepper.step(u, v_pred, t_new)
        cres, umin = complementarity_residual(setup, u_new, u)
        inc = u_new - u
        free = setup.masks.active
        diag.min_increment = min(diag.min_increment, float(inc[free].min()))
        diag.max_complementarity = max(diag.max_complementarity, cres)
        diag.min_u = min(diag.min_u, float(u_new.min()))
        pos = (u_new > FB_THRESHOLD) & free
        if k > 1 and np.any(prev_pos & free & ~pos):
            diag.nested = False
        prev_pos = pos
        v = np.maximum(inc / setup.dt, 0.0)
        v[setup.masks.k_mask] = setup.boundary_scale
        if keep_all_radii:
            snap = extract_free_boundary(setup.grid, u_new, t_new, exclude=setup.masks.k_mask)
            res.radius_series.append((t_new, snap.min_radius, snap.max_radius))
        if k in out_steps:
            res.times.append(out_steps[k])
            res.u.append(u_new.copy())
            res.v.append(v)
            res.u_pairs.append((t, u.copy(), t_new, u_new.copy()))
            res.snapshots.append(extract_free_boundary(setup.grid, u_new, t_new, exclude=setup.masks.k_mask))
        v_pred = inc / setup.dt
        u = u_new
        t = t_new
        diag.steps = k
        log.debug("t=%.4g sweeps=%d omega=%.3f band=%d res=%.2e", t_new, stats.sweeps, stats.omega,
                  stats.band_cells, stats.residual)
    diag.total_sweeps = stepper.total_sweeps
    return res


def weak_solution(history: list[tuple[float, np.ndarray]], clip_tol: float = 0.0) -> list[tuple[float, np.ndarray]]:
    """Backward differences v_k = (u_k - u_{k-1})/(t_k - t_{k-1}) of a stored (t, u) history."""
    if len(history) < 2:
        raise ValueError("need at least two stored times")
    out = []
    for (t0, u0), (t1, u1) in zip(history[:-1], history[1:]):
        v = (u1 - u0) / (t1 - t0)
        v = np.where(v < clip_tol, np.maximum(v, 0.0), v)
        out.append((t1, v))
    return out


# ------------------------------------------------------------------ checks

@dataclass
class ComparisonReport:
    max_u_violation: float
    max_v_violation: float
    worst_cell: tuple[int, ...] | None
    passed: bool


def comparison_test(run_low: RunResult, run_high: RunResult, slack: float = 1e-10) -> ComparisonReport:
    """Cellwise u_low <= u_high and v_low <= v_high at every stored time."""
    worst_u = 0.0
    worst_v = 0.0
    worst_cell = None
    for ul, uh, vl, vh in zip(run_low.u, run_high.u, run_low.v, run_high.v):
        du = ul - uh
        dv = vl - vh
        if du.max() > worst_u:
            worst_u = float(du.max())
            worst_cell = tuple(int(i) for i in np.unravel_index(np.argmax(du), du.shape))
        worst_v = max(worst_v, float(dv.max()))
    return ComparisonReport(worst_u, worst_v, worst_cell, worst_u <= slack and worst_v <= slack)


@dataclass
class WeakMonotonicityReport:
    times: list[float]
    C1_hat: list[float]    # max v0 / v over the positive set
    C2_hat: list[float]    # max u / (t v) over the positive set
    finite: bool


def weak_monotonicity_check(result: RunResult, threshold: float = 1e-8) -> WeakMonotonicityReport:
    s = result.setup
    c1s, c2s, ts = [], [], []
    for t, u, v in zip(result.times, result.u, result.v):
        pos = (v > threshold) & s.masks.active
        if not np.any(pos):
            continue
        mask0 = pos & (s.v0 > 0)
        c1 = float((s.v0[mask0] / v[mask0]).max()) if np.any(mask0) else 0.0
        c2 = float((u[pos] / (t * v[pos])).max())
        ts.append(t)
        c1s.append(c1)
        c2s.append(c2)
    finite = all(np.isfinite(c1s)) and all(np.isfinite(c2s))
    return WeakMonotonicityReport(ts, c1s, c2s, finite)
