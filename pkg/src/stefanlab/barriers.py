"""Explicit super- and subsolutions built from a fundamental solution.

Supersolution  theta = [C1 F - C2 t^{(2-n)/n}]_+.
Subsolution    theta = [c1 F + c2 h/t - c3 t^{(2-n)/n}]_+ restricted to E = {|x| < r0(t)},
with L h = n and c|x|^2 <= h <= c~|x|^2.

Admissibility is checked at sampled points from closed-form derivatives; the
constants entering the coefficient conditions are measured, not assumed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import ndimage
from scipy.interpolate import RegularGridInterpolator

from .greens import GreensTable, eval_F0, grad_F0, gradient_bound_check
from .grid import Grid, StencilOperator, assemble_operator, outer_layer
from .linsolve import cg_solve
from .media import CoefficientField, HomogenizedData
from .vi_solver import RunResult, extract_free_boundary


class BarrierError(RuntimeError):
    pass


# ------------------------------------------------------------ F evaluators

@dataclass
class GreensEvaluator:
    """F, DF and the constants C^-1|x|^{2-n} <= F <= C_upper|x|^{2-n}, |DF| <= C_grad |x|^{1-n}."""
    n: int
    value: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    C_lower: float      # F >= |x|^{2-n} / C_lower
    C_upper: float
    C_grad: float

    @property
    def C(self) -> float:
        return max(self.C_lower, self.C_upper, self.C_grad)


def _safe_value(F: "GreensEvaluator", x) -> np.ndarray:
    """F at x with +inf at the pole."""
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(x, axis=-1)
    out = np.full(r.shape, np.inf)
    nz = r > 0
    out[nz] = F.value(x[nz])
    return out


def _unit_directions(n: int, count: int = 2000, seed: int = 0) -> np.ndarray:
    d = np.random.default_rng(seed).standard_normal((count, n))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def explicit_evaluator(Q: np.ndarray) -> GreensEvaluator:
    Q = np.asarray(Q, dtype=float)
    n = Q.shape[0]
    # F0 is homogeneous, so the constants are extrema over the unit sphere (plus eigen-directions)
    _, V = np.linalg.eigh(Q)
    dirs = np.concatenate([_unit_directions(n), V.T, -V.T])
    f = eval_F0(Q, dirs)
    gnorm = np.linalg.norm(grad_F0(Q, dirs), axis=1)
    return GreensEvaluator(n, lambda x: eval_F0(Q, x), lambda x: grad_F0(Q, x),
                           C_lower=float(1.0 / f.min()), C_upper=float(f.max()), C_grad=float(gnorm.max()))


def table_evaluator(table: GreensTable) -> GreensEvaluator:
    g = table.grid
    ax = (g.axis,) * g.dim
    interp = RegularGridInterpolator(ax, table.G, bounds_error=False, fill_value=None)
    grads = np.gradient(table.G, g.h)
    ginterp = [RegularGridInterpolator(ax, d, bounds_error=False, fill_value=None) for d in grads]
    m = table.annulus(2 * g.h, g.R_box / 2)
    ratio = table.G[m] * g.radius[m] ** (g.dim - 2)
    gr = gradient_bound_check(table, r_in=2 * g.h)

    def value(x):
        x = np.asarray(x, dtype=float)
        return interp(x.reshape(-1, g.dim)).reshape(x.shape[:-1])

    def grad(x):
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, g.dim)
        return np.stack([gi(flat) for gi in ginterp], axis=-1).reshape(x.shape)

    return GreensEvaluator(g.dim, value, grad, C_lower=float(1.0 / ratio.min()), C_upper=float(ratio.max()),
                           C_grad=gr.max_scaled)


# ------------------------------------------------------- quadratic barrier

@dataclass
class QuadraticBarrierField:
    grid: Grid | None
    h: np.ndarray | None
    c_low: float
    c_high: float
    value: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    residual: float = 0.0     # max |L_h h - n| / n on the check region


def build_quadratic_barrier(fld: CoefficientField, grid: Grid, hom: HomogenizedData | None = None,
                            fit_radius: float = 2.0, op: StencilOperator | None = None) -> QuadraticBarrierField:
    n = grid.dim
    if fld.A0 is not None:
        Ai = np.linalg.inv(fld.A0)
        w = np.linalg.eigvalsh(Ai)

        def value(x):
            return 0.5 * np.einsum("...i,ij,...j->...", x, Ai, x)

        def grad(x):
            return np.asarray(x) @ Ai

        return QuadraticBarrierField(None, None, 0.5 * w.min(), 0.5 * w.max(), value, grad)
    if hom is None:
        raise BarrierError("variable media need homogenized Q for the boundary data")
    op = op or assemble_operator(grid, fld)
    Qi = np.linalg.inv(hom.Q)
    pts = grid.centers()
    h = 0.5 * np.einsum("...i,ij,...j->...", pts, Qi, pts)
    outer = outer_layer(grid)
    hf = np.where(outer, h, 0.0).ravel()
    idx = np.flatnonzero(~outer.ravel())
    b = np.full(grid.size, -float(n))
    cg_solve(op, hf, b, idx, tol=1e-9 * n)
    hf = hf.reshape(grid.shape)
    r = grid.radius
    sel = (r >= fit_radius) & ~outer
    ratio = hf[sel] / r[sel] ** 2
    c_low, c_high = float(ratio.min()), float(ratio.max())
    if c_low <= 0:
        raise BarrierError("quadratic barrier fit gave c_low <= 0; enlarge the box")
    Lh = op.apply(hf)
    inner = r <= 0.75 * grid.R_box
    res = float(np.abs(Lh[inner & ~outer] - n).max() / n)
    ax = (grid.axis,) * n
    interp = RegularGridInterpolator(ax, hf, bounds_error=False, fill_value=None)
    ginterp = [RegularGridInterpolator(ax, d, bounds_error=False, fill_value=None) for d in np.gradient(hf, grid.h)]

    def value(x):
        x = np.asarray(x, dtype=float)
        return interp(x.reshape(-1, n)).reshape(x.shape[:-1])

    def grad(x):
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, n)
        return np.stack([gi(flat) for gi in ginterp], axis=-1).reshape(x.shape)

    return QuadraticBarrierField(grid, hf, c_low, c_high, value, grad, residual=res)


# ------------------------------------------------------------ supersolution

@dataclass
class SuperBarrier:
    C1: float
    C2: float
    F: GreensEvaluator

    def __post_init__(self):
        if self.C2 <= 0:
            raise BarrierError("C2 = 0 gives a barrier without free boundary")

    @property
    def n(self) -> int:
        return self.F.n

    def evaluate(self, x, t) -> np.ndarray:
        Fx = _safe_value(self.F, x)
        return np.maximum(self.C1 * Fx - self.C2 * t ** ((2.0 - self.n) / self.n), 0.0)

    def support_time(self, Fx) -> np.ndarray:
        """s(x): the barrier is positive at x exactly for t > s(x)."""
        return (self.C1 / self.C2 * Fx) ** (self.n / (2.0 - self.n))

    def support_constant(self) -> float:
        """|x| >= t^{1/n} / K on the free boundary, K = (C1/(C C2))^{1/(2-n)}."""
        return (self.C1 / (self.F.C_lower * self.C2)) ** (1.0 / (2.0 - self.n))


@dataclass
class SuperReport:
    barrier: SuperBarrier
    fb_margin: float             # min over sampled points of theta_t - M beta |D theta|^2 (scaled)
    dominates_snapshot: bool
    above_one_on_K: bool
    iterations: int
    support_bound: float


def _c2_max(C1: float, Fx: np.ndarray, dF2: np.ndarray, n: int, Mb: float) -> float:
    e = 2.0 * (n - 1) / (n - 2)
    vals = ((n - 2.0) / n * C1 ** (e - 2.0) * Fx ** e / (Mb * dF2)) ** ((n - 2.0) / n)
    return float(vals.min())


def choose_supersolution(fld: CoefficientField, F: GreensEvaluator, grid: Grid, v_t0: np.ndarray, t0: float,
                         k_mask: np.ndarray, safety: float = 0.5, max_iter: int = 200) -> SuperReport:
    """Grow C1 until theta(t0) >= v(t0) and theta > 1 on K; C2 from the free-boundary inequality."""
    n = grid.dim
    Mb = fld.M_g * fld.beta
    pts = grid.centers()
    r = grid.radius
    sample = (r >= 2 * grid.h) & ~outer_layer(grid)
    xs = pts[sample]
    Fx = F.value(xs)
    dF2 = np.sum(F.grad(xs) ** 2, axis=-1)
    keep = Fx > 0
    Fk, dFk = Fx[keep], dF2[keep]
    Fgrid = np.zeros(grid.shape)
    Fgrid[sample] = Fx
    C1 = 1.0
    for it in range(1, max_iter + 1):
        C2 = safety * _c2_max(C1, Fk, dFk, n, Mb)
        theta = np.where(sample, np.maximum(C1 * Fgrid - C2 * t0 ** ((2.0 - n) / n), 0.0), np.inf)
        dom = bool(np.all(theta[~k_mask] >= v_t0[~k_mask]))
        onK = bool(np.all(theta[k_mask & sample] > 1.0)) and bool(np.all(
            C1 * F.value(_k_surface(grid, k_mask)) - C2 * t0 ** ((2.0 - n) / n) > 1.0))
        if dom and onK:
            b = SuperBarrier(C1, C2, F)
            margin = _super_margin(b, Fk, dFk, Mb)
            return SuperReport(b, margin, dom, onK, it, b.support_constant())
        C1 *= 1.25
    raise BarrierError("no admissible supersolution within the search budget "
                       f"(C1 = {C1:.3g}: dominates snapshot {dom}, above 1 on K {onK})")


def _k_surface(grid: Grid, k_mask: np.ndarray) -> np.ndarray:
    r_K = float(grid.radius[k_mask].max()) if np.any(k_mask) else grid.h
    return r_K * _unit_directions(grid.dim, 500, seed=1)


def _super_margin(b: SuperBarrier, Fx, dF2, Mb) -> float:
    # at a free-boundary point t^{(2-n)/n} = C1 F / C2; relative margin of theta_t >= M beta |D theta|^2
    n = b.n
    t_pow = b.C1 * Fx / b.C2
    theta_t = b.C2 * (n - 2.0) / n * t_pow ** (2.0 * (n - 1) / (n - 2))
    rhs = Mb * b.C1**2 * dF2
    return float(((theta_t - rhs) / theta_t).min())


# --------------------------------------------------------- time integral

def integrate_barrier(b: SuperBarrier, x, t: float, Fx: np.ndarray | None = None) -> np.ndarray:
    """Theta(x,t) = int_0^t theta(x,s) ds in closed form."""
    if t <= 0:
        raise ValueError("t must be positive")
    n = b.n
    Fx = b.F.value(x) if Fx is None else np.asarray(Fx, dtype=float)
    s = b.support_time(Fx)
    val = (b.C1 * Fx * t - 0.5 * b.C2 * n * t ** (2.0 / n)
           + 0.5 * (n - 2.0) * b.C1 ** (2.0 / (2.0 - n)) * b.C2 ** (-n / (2.0 - n)) * Fx ** (2.0 / (2.0 - n)))
    return np.where(t > s, val, 0.0)


def integrate_barrier_quadrature(b: SuperBarrier, Fx: float, t: float, points: int = 20001) -> float:
    """Trapezoid rule on a geometric grid over (s(x), t]; independent oracle for integrate_barrier."""
    n = b.n
    s0 = float(b.support_time(Fx))
    if t <= s0:
        return 0.0
    lo = max(s0, 1e-300)
    ss = np.geomspace(lo, t, points) if lo > 0 else np.linspace(0, t, points)
    vals = np.maximum(b.C1 * Fx - b.C2 * ss ** ((2.0 - n) / n), 0.0)
    return float(np.trapezoid(vals, ss))


# ------------------------------------------------------------ subsolution

@dataclass
class SubBarrier:
    c1: float
    c2: float
    c3: float
    F: GreensEvaluator
    hq: QuadraticBarrierField
    t0: float = 1.0

    @property
    def n(self) -> int:
        return self.F.n

    def r0(self, t) -> float:
        n = self.n
        return (self.F.C_upper * self.c1 * (n - 2) / (2 * self.c2 * self.hq.c_high)) ** (1.0 / n) * t ** (1.0 / n)

    def raw(self, x, t) -> np.ndarray:
        n = self.n
        return self.c1 * _safe_value(self.F, x) + self.c2 * self.hq.value(x) / t - self.c3 * t ** ((2.0 - n) / n)

    def evaluate(self, x, t) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        inside = np.linalg.norm(x, axis=-1) < self.r0(t)
        return np.where(inside, np.maximum(self.raw(x, t), 0.0), 0.0)

    def C_Fb(self) -> float:
        n = self.n
        return ((self.F.C_upper * self.c1) ** (2.0 / n) * (self.c2 * self.hq.c_high) ** ((n - 2.0) / n)
                * ((n - 2.0) / 2.0) ** (2.0 / n) * n / (n - 2.0) - self.c3)


@dataclass
class FeasibilityInterval:
    c1: float
    c2: float
    lower: float       # C0 c1^{2/n} c2^{(n-2)/n}
    upper: float       # C0^1 c2^2 - C0^2 c1 c2
    constants: dict = field(default_factory=dict)

    @property
    def nonempty(self) -> bool:
        return self.upper > self.lower


def subsolution_constants(fld: CoefficientField, F: GreensEvaluator, hq: QuadraticBarrierField,
                          C_tilde: float) -> dict:
    n = F.n
    alpha_t = 1.0 / fld.beta**2     # |A^-1 x|^2 >= alpha~ |x|^2
    C_A = 1.0 / fld.alpha           # |A^-1 x| <= C_A |x|
    C0 = F.C_upper ** (2.0 / n) * hq.c_high ** ((n - 2.0) / n) * ((n - 2.0) / 2.0) ** (2.0 / n) * n / (n - 2.0)
    C01 = fld.m_g * fld.alpha * alpha_t * C_tilde**2
    C02 = fld.m_g * fld.alpha * 2.0 * F.C_grad * C_A * C_tilde ** (2.0 - n)
    return dict(C0=C0, C0_1=C01, C0_2=C02, alpha_tilde=alpha_t, C_A=C_A, C_tilde=C_tilde,
                C_F=F.C_upper, C_grad=F.C_grad, c_tilde=hq.c_high, c_low=hq.c_low)


def feasibility_interval(consts: dict, c1: float, c2: float, n: int) -> FeasibilityInterval:
    lo = consts["C0"] * c1 ** (2.0 / n) * c2 ** ((n - 2.0) / n)
    hi = consts["C0_1"] * c2**2 - consts["C0_2"] * c1 * c2
    return FeasibilityInterval(c1, c2, lo, hi, consts)


def find_c2(consts: dict, c1: float, n: int, c2_start: float = 1.0, max_doublings: int = 200) -> FeasibilityInterval:
    c2 = c2_start
    for _ in range(max_doublings):
        iv = feasibility_interval(consts, c1, c2, n)
        if iv.nonempty:
            return iv
        c2 *= 2.0
    raise BarrierError(f"empty (c2, c3) interval up to c2 = {c2:.3g}: lower {iv.lower:.3g}, upper {iv.upper:.3g}")


@dataclass
class SubReport:
    barrier: SubBarrier
    interval: FeasibilityInterval
    t0: float
    pde_margin: float          # max over sampled {theta > 0}, t >= t0 of theta_t - L theta (should be < 0)
    fb_margin: float           # min over sampled free-boundary points of m alpha |D theta|^2 - theta_t
    fb_points: int
    continuous_across_E: bool  # C_Fb < 0
    below_snapshot: bool
    below_one_on_K: bool
    r0_ratio: float            # r0(2t)/r0(t)

    @property
    def verified(self) -> bool:
        return (self.pde_margin < 0 and self.fb_margin >= 0 and self.continuous_across_E
                and self.below_snapshot and self.below_one_on_K)


def choose_subsolution(fld: CoefficientField, F: GreensEvaluator, hq: QuadraticBarrierField, grid: Grid,
                       v_t0: np.ndarray, t0: float, k_mask: np.ndarray, C_tilde: float | None = None,
                       c1: float = 1e3, sample_times=None) -> SubReport:
    """Follow the recipe: fix c1, grow c2 until the interval is nonempty, pick c3 inside, then shrink c1.

    ``C_tilde`` (the lower support constant |x| >= C~ t^{1/n} of the free
    boundary) defaults to min |x| / t0^{1/n} over the snapshot's free boundary.
    """
    n = grid.dim
    if not np.any(v_t0[~k_mask] > 0):
        raise BarrierError("snapshot positivity set does not extend beyond K")
    if C_tilde is None:
        snap = extract_free_boundary(grid, v_t0, t0, exclude=k_mask)
        C_tilde = snap.min_radius / t0 ** (1.0 / n)
    consts = subsolution_constants(fld, F, hq, C_tilde)
    pts = grid.centers()
    sample = (grid.radius >= 2 * grid.h) & ~outer_layer(grid)
    xs = pts[sample]
    Fx, hx = F.value(xs), hq.value(xs)
    vs = v_t0[sample]
    kx = _k_surface(grid, k_mask)
    # shrink c1 from a large start until theta(t0) <= v(t0) and theta < 1 on dK, redoing the
    # c2 search and placing c3 at the geometric mean of the interval each time
    for _ in range(400):
        iv = find_c2(consts, c1, n)
        c2 = iv.c2
        c3 = math.sqrt(iv.lower * iv.upper)
        b = SubBarrier(c1, c2, c3, F, hq, t0)
        inside = np.linalg.norm(xs, axis=-1) < b.r0(t0)
        th = np.where(inside, np.maximum(c1 * Fx + c2 * hx / t0 - c3 * t0 ** ((2.0 - n) / n), 0.0), 0.0)
        below = bool(np.all(th <= vs))
        onK = bool(np.all(b.evaluate(kx, t0) < 1.0))
        if below and onK:
            break
        c1 *= 0.8
    else:
        raise BarrierError("no c1 places the subsolution below the snapshot")
    iv2 = iv
    b = SubBarrier(c1, c2, c3, F, hq, t0)
    times = sample_times if sample_times is not None else t0 * np.geomspace(1.0, 10.0, 6)
    pde = _sub_pde_margin(b, xs, Fx, hx, times)
    fbm, count = _sub_fb_margin(fld, b, times)
    return SubReport(b, iv2, t0, pde, fbm, count, b.C_Fb() < 0, below, onK, b.r0(2.0) / b.r0(1.0))


def _sub_pde_margin(b: SubBarrier, xs, Fx, hx, times) -> float:
    # theta_t - L theta = -c2 h/t^2 + c3 (n-2)/n t^{(2-2n)/n} - c2 n / t on {theta > 0}
    n = b.n
    worst = -np.inf
    for t in times:
        inside = np.linalg.norm(xs, axis=-1) < b.r0(t)
        pos = inside & (b.c1 * Fx + b.c2 * hx / t - b.c3 * t ** ((2.0 - n) / n) > 0)
        if not np.any(pos):
            continue
        val = -b.c2 * hx[pos] / t**2 + b.c3 * (n - 2.0) / n * t ** ((2.0 - 2.0 * n) / n) - b.c2 * n / t
        worst = max(worst, float(val.max()))
    return worst


def _sub_fb_margin(fld: CoefficientField, b: SubBarrier, times, rays: int = 400) -> tuple[float, int]:
    n = b.n
    dirs = _unit_directions(n, rays, seed=2)
    worst = np.inf
    count = 0
    ma = fld.m_g * fld.alpha
    for t in times:
        r_hi = b.r0(t)
        rs = np.linspace(1e-3 * r_hi, r_hi * (1 - 1e-9), 400)
        for d in dirs:
            x = rs[:, None] * d[None, :]
            f = b.raw(x, t)
            idx = np.flatnonzero((f[:-1] > 0) & (f[1:] <= 0))
            for i in idx:
                lo, hi = rs[i], rs[i + 1]
                for _ in range(60):
                    mid = 0.5 * (lo + hi)
                    if b.raw(mid * d[None, :], t)[0] > 0:
                        lo = mid
                    else:
                        hi = mid
                xp = (0.5 * (lo + hi) * d)[None, :]
                th_t = -b.c2 * b.hq.value(xp) / t**2 + b.c3 * (n - 2.0) / n * t ** ((2.0 - 2.0 * n) / n)
                Dth = b.c1 * b.F.grad(xp) + b.c2 * b.hq.grad(xp) / t
                margin = ma * np.sum(Dth**2, axis=-1) - th_t
                scale = abs(th_t) + ma * np.sum(Dth**2, axis=-1)
                worst = min(worst, float((margin / scale)[0]))
                count += 1
    return (worst if count else float("nan")), count


# ---------------------------------------------------------- envelope check

@dataclass
class EnvelopeReport:
    times: list
    sub_violation: float       # max (sub - v) outside the slack band
    super_violation: float     # max (v - super) outside the slack band
    slope: float
    slope_window: tuple
    decay_constant: float      # max v |x|^{n-2} outside K
    passed_ordering: bool


def growth_fit(times, radii, last_decade: bool = True) -> tuple[float, tuple[float, float]]:
    t = np.asarray(times, dtype=float)
    r = np.asarray(radii, dtype=float)
    ok = np.isfinite(r) & (r > 0)
    t, r = t[ok], r[ok]
    if last_decade:
        sel = t >= t.max() / 10.0
        t, r = t[sel], r[sel]
    slope = np.polyfit(np.log(t), np.log(r), 1)[0]
    return float(slope), (float(t.min()), float(t.max()))


def envelope_check(run: RunResult, sub: SubBarrier | None, sup: SuperBarrier, t0: float,
                   tol: float = 1e-10) -> EnvelopeReport:
    s = run.setup
    grid = s.grid
    pts = grid.centers()
    free = s.masks.active
    struct = ndimage.generate_binary_structure(grid.dim, grid.dim)
    sub_v, sup_v = 0.0, 0.0
    times = []
    for t, v in zip(run.times, run.v):
        if t < t0:
            continue
        times.append(t)
        pos = v > 1e-10
        band = ndimage.binary_dilation(pos, struct) & ~ndimage.binary_erosion(pos, struct)
        th_sup = sup.evaluate(pts, t)
        band_sup = (th_sup > 0)
        band |= ndimage.binary_dilation(band_sup, struct) & ~ndimage.binary_erosion(band_sup, struct)
        chk = free & ~band
        sup_v = max(sup_v, float((v - th_sup)[chk].max()))
        if sub is not None:
            th_sub = sub.evaluate(pts, t)
            bs = th_sub > 0
            b2 = band | (ndimage.binary_dilation(bs, struct) & ~ndimage.binary_erosion(bs, struct))
            chk2 = free & ~b2
            sub_v = max(sub_v, float((th_sub - v)[chk2].max()))
    radii = getattr(run, "radius_series", None)
    if radii:
        ts = [a for a, _, _ in radii]
        rs = [c for _, _, c in radii]
    else:
        ts = [sn.t for sn in run.snapshots]
        rs = [sn.max_radius for sn in run.snapshots]
    slope, win = growth_fit(ts, rs)
    r = grid.radius
    dec = 0.0
    for v in run.v:
        m = free & (r > 0)
        dec = max(dec, float((v[m] * r[m] ** (grid.dim - 2)).max()))
    return EnvelopeReport(times, sub_v, sup_v, slope, win, dec, sub_v <= tol and sup_v <= tol)
