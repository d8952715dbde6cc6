"""Limit objects: the self-similar point-source solution, the near-field profile
P with its far-field constant C*, rescaling sweeps and Hausdorff distances.

In the metric y = P^-1 x (Q = P^2) the limit solution is radial,

    V~(y,t) = C~ (|y|^{2-n} - R(t)^{2-n})_+,   R(t) = (n (n-2) C~ t / L)^{1/n},
    C~ = C* / ((n-2) |S^{n-1}| sqrt(det Q)),

so that V = C* F0 - C~ R(t)^{2-n} near the origin and V, U share the barrier
form [C1 F0 - C2 t^{(2-n)/n}]_+ with C1 = C*, C2 = C~ (n (n-2) C~ / L)^{(2-n)/n}.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.spatial import cKDTree

from .barriers import SuperBarrier, explicit_evaluator, integrate_barrier
from .greens import eval_F0, sphere_area
from .grid import DomainMasks, Grid, StencilOperator, assemble_operator, build_grid, embed_ball_boundary
from .linsolve import cg_solve
from .media import CoefficientField, HomogenizedData
from .vi_solver import make_setup, run

log = logging.getLogger(__name__)


# ------------------------------------------------------------ self-similar

@dataclass
class SelfSimilarSolution:
    C_star: float
    L_avg: float
    hom: HomogenizedData

    @property
    def n(self) -> int:
        return self.hom.Q.shape[0]

    @property
    def C_tilde(self) -> float:
        n = self.n
        return self.C_star / ((n - 2) * sphere_area(n) * math.sqrt(np.linalg.det(self.hom.Q)))

    def R(self, t) -> np.ndarray:
        n = self.n
        return (n * (n - 2) * self.C_tilde * np.asarray(t, dtype=float) / self.L_avg) ** (1.0 / n)

    def dRdt(self, t) -> np.ndarray:
        n = self.n
        return self.R(t) / (n * np.asarray(t, dtype=float))

    def y(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) @ np.linalg.inv(self.hom.P_sqrt)

    def V(self, x, t) -> np.ndarray:
        n = self.n
        ry = np.linalg.norm(self.y(x), axis=-1)
        with np.errstate(divide="ignore"):
            val = self.C_tilde * (ry ** (2.0 - n) - self.R(t) ** (2.0 - n))
        return np.maximum(val, 0.0)

    def as_barrier(self) -> SuperBarrier:
        n = self.n
        a = n * (n - 2) * self.C_tilde / self.L_avg
        return SuperBarrier(self.C_star, self.C_tilde * a ** ((2.0 - n) / n), explicit_evaluator(self.hom.Q))

    def U(self, x, t) -> np.ndarray:
        """int_0^t V ds, closed form with the same support logic as the barrier integral."""
        x = np.asarray(x, dtype=float)
        Fx = eval_F0(self.hom, x)
        return integrate_barrier(self.as_barrier(), x, float(t), Fx=Fx)

    def free_boundary_points(self, t: float, count: int = 2000) -> np.ndarray:
        """Quasi-uniform points on the ellipsoid {|P^-1 x| = R(t)} (Fibonacci sphere mapped by P)."""
        if self.n != 3:
            d = np.random.default_rng(0).standard_normal((count, self.n))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
        else:
            k = np.arange(count) + 0.5
            z = 1.0 - 2.0 * k / count
            phi = math.pi * (1.0 + math.sqrt(5.0)) * k
            s = np.sqrt(1.0 - z**2)
            d = np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=-1)
        return (float(self.R(t)) * d) @ self.hom.P_sqrt.T

    # identity checks
    def velocity_residual(self, t) -> float:
        """L R'(t) - |D_y V~|(R(t), t) from the closed forms."""
        n = self.n
        R = self.R(t)
        return float(np.max(np.abs(self.L_avg * self.dRdt(t) - self.C_tilde * (n - 2) * R ** (1 - n))))

    def velocity_residual_fd(self, t: float, dt: float = 1e-5, dr: float = 1e-6) -> float:
        """Same residual with R' and the radial derivative by central differences."""
        n = self.n
        Rp = (self.R(t + dt) - self.R(t - dt)) / (2 * dt)
        R = float(self.R(t))
        # radial profile in y along e_1, mapped back to x by P
        e = np.zeros(n)
        e[0] = 1.0
        xs = np.array([(R - 2 * dr) * e, (R - dr) * e]) @ self.hom.P_sqrt.T
        vs = self.V(xs, t)
        # V vanishes beyond R, so use a second-order one-sided difference at R: (3 f(R) - 4 f(R-dr) + f(R-2dr)) / (2 dr), f(R) = 0
        slope = (-4 * vs[1] + vs[0]) / (2 * dr)
        return abs(float(self.L_avg * Rp + slope))

    def rescale(self, x, t, lam) -> np.ndarray:
        """lam^{(n-2)/n} V(lam^{1/n} x, lam t)."""
        n = self.n
        return lam ** ((n - 2.0) / n) * self.V(lam ** (1.0 / n) * np.asarray(x, dtype=float), lam * t)


def build_selfsimilar(C_star: float, hom: HomogenizedData, L_avg: float | None = None) -> SelfSimilarSolution:
    if not C_star > 0:
        raise ValueError("C_star must be positive")
    np.linalg.cholesky(hom.Q)
    L = hom.L_avg if L_avg is None else L_avg
    if not L > 0:
        raise ValueError("L_avg must be positive")
    return SelfSimilarSolution(float(C_star), float(L), hom)


# ------------------------------------------------------------- near field

@dataclass
class NearFieldResult:
    grid: Grid
    P_field: np.ndarray
    C_star_estimate: float
    shells: np.ndarray            # rows (r_mid, median P/F)
    matching_coefficient: float   # weight of the far-field correction
    monotone: bool
    method: str = "matched"


def _shell_medians(grid: Grid, ratio: np.ndarray, mask: np.ndarray, r_in: float, r_out: float, count: int = 8):
    r = grid.radius
    edges = np.linspace(r_in, r_out, count + 1)
    rows = []
    for a, b in zip(edges[:-1], edges[1:]):
        sel = mask & (r >= a) & (r < b)
        if np.any(sel):
            rows.append((0.5 * (a + b), float(np.median(ratio[sel]))))
    return np.array(rows)


def near_field(fld: CoefficientField, grid: Grid, masks: DomainMasks, F=None, hom: HomogenizedData | None = None,
               method: str = "matched", op: StencilOperator | None = None, tol: float = 1e-11) -> NearFieldResult:
    """L P = 0 outside K, P = 1 on K, P/F -> C* at infinity.

    "zero": P = 0 on the box (the truncated problem).  "matched": P = P1 + c P2
    where P1 is the zero-data solution, P2 solves L P2 = 0 with P2 = 0 on K and
    P2 = F on the box, and c is the least-squares solution of P1 = c (F - P2)
    on the fitting annulus.  The matched P carries far-field data c F, which
    removes the box truncation for a ball in identity media exactly.
    ``F`` is a callable (defaults to F0 of ``hom``).
    """
    if grid.R_box < 8 * masks.r_K:
        raise ValueError("near field needs R_box >= 8 r_K")
    if F is None:
        if hom is None:
            raise ValueError("need F or homogenized data")
        F = lambda x: eval_F0(hom, x)
    op = op or embed_ball_boundary(assemble_operator(grid, fld), masks)
    idx = masks.free_idx
    P1 = np.where(masks.k_mask, 1.0, 0.0).ravel()
    b = np.zeros(grid.size)
    cg_solve(op, P1, b, idx, tol=tol)
    P1 = P1.reshape(grid.shape)
    pts = grid.centers()
    r = grid.radius
    Fg = np.full(grid.shape, np.nan)
    nz = r > 0
    Fg[nz] = F(pts[nz])
    r_in, r_out = grid.R_box / 4, grid.R_box / 2
    ann = masks.active & (r >= r_in) & (r <= r_out)
    if method == "zero":
        Pf, c = P1, 0.0
    elif method == "matched":
        P2 = np.where(masks.outer_mask, Fg, 0.0).ravel()
        cg_solve(op, P2, b, idx, tol=tol * float(np.nanmax(Fg[masks.outer_mask])))
        P2 = P2.reshape(grid.shape)
        d = Fg[ann] - P2[ann]
        c = float(np.dot(P1[ann], d) / np.dot(d, d))
        Pf = P1 + c * P2
    else:
        raise ValueError(f"unknown method {method!r}")
    ratio = np.where(nz, Pf / np.where(nz, Fg, 1.0), np.nan)
    shells = _shell_medians(grid, ratio, ann, r_in, r_out)
    C = float(np.median(ratio[ann]))
    prof = _shell_medians(grid, Pf, masks.active, masks.r_K + grid.h, r_out, 16)[:, 1]
    monotone = bool(np.all(np.diff(prof) <= 1e-12))
    return NearFieldResult(grid, Pf, C, shells, c, monotone, method)


def near_field_for_ball(fld: CoefficientField, r_K: float, R_box: float, cells: int, hom: HomogenizedData,
                        F=None, method: str = "matched") -> NearFieldResult:
    from .grid import mask_ball_source
    g = build_grid(fld.dim, R_box, cells)
    return near_field(fld, g, mask_ball_source(g, r_K), F=F, hom=hom, method=method)


@dataclass
class TimeLimitReport:
    times: list
    distances: list
    decreasing: bool


def near_field_time_limit(result, near: NearFieldResult, r_compact: float) -> TimeLimitReport:
    """sup over {v > 0} within |x| <= r_compact of |v(t) - P| at each stored time of a run."""
    g = result.setup.grid
    if g.shape != near.grid.shape or g.R_box != near.grid.R_box:
        interp = RegularGridInterpolator((near.grid.axis,) * g.dim, near.P_field, bounds_error=False, fill_value=0.0)
        P = interp(g.centers().reshape(-1, g.dim)).reshape(g.shape)
    else:
        P = near.P_field
    comp = (g.radius <= r_compact) & result.setup.masks.active
    ds = []
    for v in result.v:
        sel = comp & (v > 0)
        ds.append(float(np.abs(v[sel] - P[sel]).max()) if np.any(sel) else float("nan"))
    dec = all(b < a for a, b in zip(ds[:-1], ds[1:]))
    return TimeLimitReport(list(result.times), ds, dec)


# -------------------------------------------------------------- rescaling

def rescale_field(grid: Grid, field_: np.ndarray, lam: float, points: np.ndarray | None = None,
                  kind: str = "v", already_rescaled: bool = False) -> np.ndarray:
    """v^lam(x) = lam^{(n-2)/n} v(lam^{1/n} x)  (kind "v") or u^lam(x) = lam^{-2/n} u(lam^{1/n} x)  (kind "u").

    The time argument is the caller's: pass the snapshot taken at lam*t.
    For runs solved directly in rescaled form the field is returned as is.
    """
    n = grid.dim
    if already_rescaled or lam == 1.0:
        if points is None:
            return field_
        interp = RegularGridInterpolator((grid.axis,) * n, field_, bounds_error=False, fill_value=0.0)
        return interp(points)
    if points is None:
        points = grid.centers().reshape(-1, n)
        shape = grid.shape
    else:
        shape = points.shape[:-1]
    s = lam ** (1.0 / n)
    src = s * points.reshape(-1, n)
    if np.any(np.abs(src) > grid.R_box + 1e-12):
        raise ValueError("rescaled points fall outside the run's box")
    interp = RegularGridInterpolator((grid.axis,) * n, field_)
    factor = lam ** ((n - 2.0) / n) if kind == "v" else lam ** (-2.0 / n)
    return (factor * interp(src)).reshape(shape)


def hausdorff(A, B) -> float:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.size == 0 or B.size == 0:
        raise ValueError("Hausdorff distance of an empty set")
    dab = cKDTree(B).query(A)[0].max()
    dba = cKDTree(A).query(B)[0].max()
    return float(max(dab, dba))


# ------------------------------------------------------------------ sweep

@dataclass
class SweepRow:
    lam: float
    t: float
    sup_v: float
    sup_u: float
    hausdorff: float
    singularity_ratio: float      # u / (C* t F0) at the innermost reliable shell
    ratio_to_U: float             # u / U at the same shell
    shell_radius: float
    fb_min_radius: float
    fb_max_radius: float
    steps: int
    complementarity: float


@dataclass
class SweepReport:
    lambdas: list
    rows: list
    C_star: float
    verdicts: dict = field(default_factory=dict)
    profiles: list = field(default_factory=list)   # (lam, t, rows of (r, mean v, mean V))

    def series(self, t: float, key: str) -> list:
        return [getattr(r, key) for r in self.rows if abs(r.t - t) < 1e-12]


@dataclass
class SweepConfig:
    fld: CoefficientField
    hom: HomogenizedData
    C_star: float
    lambdas: tuple
    r_K: float = 0.5
    r_omega_factor: float = 1.5
    R_box: float = 2.25
    cells: int = 145
    dt: float = 0.05
    times: tuple = (1.0,)
    annulus: tuple = (0.5, 2.0)
    tol: float = 1e-9
    thresholds: dict = field(default_factory=dict)


def _innermost_shell(grid: Grid, r_inner: float) -> np.ndarray:
    r = grid.radius
    return (r >= r_inner + grid.h) & (r < r_inner + 2 * grid.h)


def _radial_pair(grid: Grid, v: np.ndarray, V: np.ndarray, mask: np.ndarray, r_max: float,
                 shells: int = 32) -> np.ndarray:
    r = grid.radius
    edges = np.linspace(0.0, r_max, shells + 1)
    rows = []
    for a, b in zip(edges[:-1], edges[1:]):
        sel = mask & (r >= a) & (r < b)
        if np.any(sel):
            rows.append((float(r[sel].mean()), float(v[sel].mean()), float(V[sel].mean())))
    return np.array(rows)


def run_sweep(cfg: SweepConfig, progress=None) -> SweepReport:
    lams = list(cfg.lambdas)
    if any(b <= a for a, b in zip(lams[:-1], lams[1:])):
        raise ValueError("lambda list must be strictly increasing")
    n = cfg.fld.dim
    grid = build_grid(n, cfg.R_box, cfg.cells)
    for lam in lams:
        if grid.h > lam ** (-1.0 / n) / 8 + 1e-12:
            raise ValueError(f"lambda = {lam} violates h <= lambda^(-1/n)/8 (h = {grid.h:.4g})")
        if grid.h > cfg.r_K * lam ** (-1.0 / n) / 3 + 1e-12:
            raise ValueError(f"lambda = {lam} violates h <= r_K lambda^(-1/n)/3 (h = {grid.h:.4g})")
    ss = build_selfsimilar(cfg.C_star, cfg.hom)
    pts = grid.centers()
    r = grid.radius
    rows = []
    profiles = []
    T = max(cfg.times)
    for lam in lams:
        setup = make_setup(grid, cfg.fld, cfg.r_K, cfg.r_omega_factor * cfg.r_K, cfg.dt, T, lam=lam, tol=cfg.tol)
        res = run(setup, list(cfg.times))
        rK = cfg.r_K / lam ** (1.0 / n)
        shell = _innermost_shell(grid, rK) & setup.masks.active
        for t, u, v, snap in zip(res.times, res.u, res.v, res.snapshots):
            ann = setup.masks.active & (r >= cfg.annulus[0]) & (r <= cfg.annulus[1])
            Vx = ss.V(pts[ann], t)
            Ux = ss.U(pts[ann], t)
            # the rescaled run uses unit-scale time: u^lam is already the rescaled integral
            sup_v = float(np.abs(v[ann] - Vx).max())
            sup_u = float(np.abs(u[ann] - Ux).max())
            ell = ss.free_boundary_points(t)
            hd = hausdorff(snap.boundary_cells, ell) if snap.boundary_cells.size else float("inf")
            Fs = eval_F0(cfg.hom, pts[shell])
            sing = float(np.mean(u[shell] / (cfg.C_star * t * Fs)))
            toU = float(np.mean(u[shell] / ss.U(pts[shell], t)))
            rows.append(SweepRow(lam, t, sup_v, sup_u, hd, sing, toU, float(r[shell].mean()),
                                 snap.min_radius, snap.max_radius, res.diagnostics.steps,
                                 res.diagnostics.max_complementarity / setup.f_norm))
            profiles.append((lam, t, _radial_pair(grid, v, ss.V(pts, t), setup.masks.active, cfg.annulus[1])))
            if progress:
                progress(rows[-1])
    rep = SweepReport(lams, rows, cfg.C_star, profiles=profiles)
    for t in cfg.times:
        for key in ("sup_v", "hausdorff"):
            s = rep.series(t, key)
            rep.verdicts[f"{key}_decreasing_t{t:g}"] = all(b < a for a, b in zip(s[:-1], s[1:]))
        sr = rep.series(t, "singularity_ratio")
        rep.verdicts[f"singularity_ratio_t{t:g}"] = 0.8 <= sr[-1] <= 1.2
    for key, thr in cfg.thresholds.items():
        s = [getattr(r_, key) for r_ in rows if r_.lam == lams[-1]]
        rep.verdicts[f"{key}_below_{thr:g}"] = all(x < thr for x in s)
    return rep
