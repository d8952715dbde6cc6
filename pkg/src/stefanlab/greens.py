"""Fundamental solutions of -L: the explicit constant-coefficient F0 and numerical tables.

F0(x) = kappa_n (x^T Q^-1 x)^{(2-n)/2} / sqrt(det Q),  kappa_n = 1/((n-2) |S^{n-1}|).

Numerical tables solve -L_h G = delta_h (mass 1/h^n in the centre cell) on a
box.  The box boundary carries either zero data or the far-field value F0 of
the homogenized operator; the latter removes the O(R_box^{2-n}) truncation
offset that a zero-data box leaves at every x.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.special import gamma

from .grid import Grid, GridError, StencilOperator, assemble_operator, outer_layer
from .linsolve import cg_solve
from .media import CoefficientField, HomogenizedData


def sphere_area(n: int) -> float:
    """Surface area of the unit sphere S^{n-1} in R^n."""
    return 2.0 * math.pi ** (n / 2.0) / gamma(n / 2.0)


def kappa(n: int) -> float:
    if n < 3:
        raise ValueError("fundamental solutions are implemented for n >= 3")
    return 1.0 / ((n - 2) * sphere_area(n))


def _quad_form(Q: np.ndarray, x: np.ndarray) -> np.ndarray:
    Qi = np.linalg.inv(Q)
    return np.einsum("...i,ij,...j->...", x, Qi, x)


def eval_F0(hom: HomogenizedData | np.ndarray, x) -> np.ndarray:
    """F0 at points x of shape (..., n); the origin is rejected."""
    Q = hom.Q if isinstance(hom, HomogenizedData) else np.asarray(hom, dtype=float)
    n = Q.shape[0]
    x = np.asarray(x, dtype=float)
    s = _quad_form(Q, x)
    if np.any(s <= 0.0):
        raise ValueError("F0 is singular at x = 0")
    return kappa(n) * s ** ((2.0 - n) / 2.0) / math.sqrt(np.linalg.det(Q))


def grad_F0(hom: HomogenizedData | np.ndarray, x) -> np.ndarray:
    Q = hom.Q if isinstance(hom, HomogenizedData) else np.asarray(hom, dtype=float)
    n = Q.shape[0]
    x = np.asarray(x, dtype=float)
    Qi = np.linalg.inv(Q)
    s = _quad_form(Q, x)
    coef = kappa(n) * (2.0 - n) * s ** (-n / 2.0) / math.sqrt(np.linalg.det(Q))
    return coef[..., None] * (x @ Qi)


# ------------------------------------------------------------------ delta test

@dataclass
class DeltaTestResult:
    integral: float          # int F (-L0 phi) dx, should equal phi(0) = 1
    printed_variant: float   # same with the unit-ball-volume normalisation
    relative_error: float


def delta_test(hom: HomogenizedData | np.ndarray, nodes: int = 64) -> DeltaTestResult:
    """int F0 (-L0 phi) dx = phi(0) for phi = (1 - x^T Q^-1 x)_+^4, by quadrature in x.

    With s = x^T Q^-1 x and phi = psi(s):  L0 phi = 2 n psi'(s) + 4 s psi''(s).
    The integral is taken in spherical coordinates of x (n = 3) or reduced
    to a radial integral along ellipsoids (other n).
    """
    Q = hom.Q if isinstance(hom, HomogenizedData) else np.asarray(hom, dtype=float)
    n = Q.shape[0]

    def neg_L0_phi(s):
        inside = s < 1.0
        d1 = -4.0 * (1.0 - s) ** 3
        d2 = 12.0 * (1.0 - s) ** 2
        return np.where(inside, -(2 * n * d1 + 4 * s * d2), 0.0)

    if n == 3:
        Qi = np.linalg.inv(Q)
        r_max = math.sqrt(np.linalg.eigvalsh(Q).max())
        gx, gw = np.polynomial.legendre.leggauss(nodes)
        # direction grid: Gauss in cos(theta), trapezoid in azimuth
        mu, wmu = gx, gw
        phi = np.linspace(0.0, 2 * np.pi, 2 * nodes, endpoint=False)
        wphi = 2 * np.pi / phi.size
        st = np.sqrt(1 - mu**2)
        dirs = np.stack([st[:, None] * np.cos(phi)[None, :], st[:, None] * np.sin(phi)[None, :],
                         np.broadcast_to(mu[:, None], (mu.size, phi.size))], axis=-1)
        total = 0.0
        for d, w_dir in zip(dirs.reshape(-1, 3), np.repeat(wmu, phi.size) * wphi):
            # radial extent of the support of phi along d
            rho = 1.0 / math.sqrt(d @ Qi @ d)
            r = 0.5 * rho * (gx + 1.0)
            wr = 0.5 * rho * gw
            x = r[:, None] * d[None, :]
            s = _quad_form(Q, x)
            total += w_dir * np.sum(wr * r**2 * eval_F0(Q, x) * neg_L0_phi(s))
        assert r_max > 0
    else:
        # along rays y = P^-1 x the integrand depends on |y| only
        gx, gw = np.polynomial.legendre.leggauss(nodes)
        r = 0.5 * (gx + 1.0)
        wr = 0.5 * gw
        total = float(np.sum(wr * sphere_area(n) * r ** (n - 1) * kappa(n) * r ** (2.0 - n) * neg_L0_phi(r**2)))
    alpha_n = sphere_area(n) / n
    printed = total * sphere_area(n) / alpha_n
    return DeltaTestResult(float(total), float(printed), abs(total - 1.0))


# ----------------------------------------------------------------- numerics

@dataclass
class GreensTable:
    grid: Grid
    G: np.ndarray
    lam: float = 1.0
    bound_constant: float = float("nan")
    boundary: str = "far_field"
    hom: HomogenizedData | None = None
    iterations: int = 0

    def interpolator(self) -> RegularGridInterpolator:
        ax = self.grid.axis
        return RegularGridInterpolator((ax,) * self.grid.dim, self.G, method="linear",
                                       bounds_error=False, fill_value=None)

    def annulus(self, r_in: float, r_out: float) -> np.ndarray:
        r = self.grid.radius
        return (r >= r_in - 1e-12) & (r <= r_out + 1e-12)


def bound_constant(table: GreensTable, r_in: float | None = None, r_out: float | None = None) -> float:
    """Smallest C with C^-1 |x|^{2-n} <= G <= C |x|^{2-n} on the annulus."""
    g = table.grid
    r_in = 2 * g.h if r_in is None else r_in
    r_out = g.R_box / 2 if r_out is None else r_out
    m = table.annulus(r_in, r_out)
    ratio = table.G[m] * g.radius[m] ** (g.dim - 2)
    if np.any(ratio <= 0):
        return float("inf")
    return float(max(ratio.max(), 1.0 / ratio.min()))


def solve_greens_numeric(grid: Grid, op: StencilOperator, hom: HomogenizedData | None = None,
                         boundary: str = "far_field", tol: float = 1e-10, lam: float = 1.0,
                         check_resolution: bool = True) -> GreensTable:
    """-L_h G = delta_h with Dirichlet data on the outermost cell layer.

    ``boundary`` is "far_field" (G = F0 of ``hom`` on the layer) or "zero".
    """
    n, h = grid.dim, grid.h
    if check_resolution and h > 1.0 / 8.0 / lam ** (1.0 / n) + 1e-12:
        raise GridError(f"h = {h:.4g} does not resolve the media period (need h <= lambda^(-1/n)/8)")
    G = np.zeros(grid.shape)
    outer = outer_layer(grid)
    if boundary == "far_field":
        if hom is None:
            raise ValueError("far-field boundary data needs homogenized Q")
        pts = grid.centers()[outer]
        G[outer] = eval_F0(hom, pts)
    elif boundary != "zero":
        raise ValueError(f"unknown boundary mode {boundary!r}")
    b = np.zeros(grid.size)
    b[grid.origin_index] = 1.0 / h**n
    idx = np.flatnonzero(~outer.ravel())
    flat = G.ravel()
    scale = 1.0 / h**n
    _, its, _ = cg_solve(op, flat, b, idx, tol=tol * scale * h**2, maxiter=50_000)
    tab = GreensTable(grid=grid, G=flat.reshape(grid.shape), lam=lam, boundary=boundary, hom=hom,
                      iterations=its)
    tab.bound_constant = bound_constant(tab)
    return tab


def greens_for_media(fld: CoefficientField, grid: Grid, hom: HomogenizedData | None = None,
                     lam: float = 1.0, boundary: str = "far_field", **kw) -> GreensTable:
    s = lam ** (1.0 / grid.dim)
    op = assemble_operator(grid, fld, shift=s if lam != 1.0 else None)
    kw.setdefault("check_resolution", not fld.is_constant)
    return solve_greens_numeric(grid, op, hom=hom, boundary=boundary, lam=lam, **kw)


def rescaled_greens(table: GreensTable, lam: float, fld: CoefficientField | None = None,
                    method: str = "resample") -> GreensTable:
    """G^lam(x) = lam^{(n-2)/n} G(lam^{1/n} x).

    "resample" relabels the stored array on the grid shrunk by lam^{1/n}
    (exact, no interpolation); "resolve" solves again on the same grid with
    coefficients sampled at lam^{1/n} x.
    """
    if lam < 1.0:
        raise ValueError("lambda must be >= 1")
    n = table.grid.dim
    if lam == 1.0:
        return table
    s = lam ** (1.0 / n)
    if method == "resample":
        g2 = Grid(dim=n, R_box=table.grid.R_box / s, cells=table.grid.cells)
        out = GreensTable(grid=g2, G=table.G * lam ** ((n - 2.0) / n), lam=table.lam * lam,
                          boundary=table.boundary, hom=table.hom)
        out.bound_constant = bound_constant(out)
        return out
    if method == "resolve":
        if fld is None:
            raise ValueError("re-solving needs the coefficient field")
        return greens_for_media(fld, table.grid, table.hom, lam=table.lam * lam, boundary=table.boundary)
    raise ValueError(f"unknown method {method!r}")


def distance_to_F0(table: GreensTable, r_in: float, r_out: float, hom: HomogenizedData | None = None) -> float:
    hom = hom or table.hom
    m = table.annulus(r_in, r_out)
    pts = table.grid.centers()[m]
    return float(np.abs(table.G[m] - eval_F0(hom, pts)).max())


# ---------------------------------------------------------------- checks

@dataclass
class GradientReport:
    max_scaled: float          # max |DG| |x|^{n-1} on the annulus
    near_max: float            # same on the inner half of the annulus
    far_max: float             # same on the outer half
    finite: bool


def gradient_bound_check(table: GreensTable, r_in: float | None = None, r_out: float | None = None) -> GradientReport:
    g = table.grid
    n, h = g.dim, g.h
    r_in = 4 * h if r_in is None else r_in
    r_out = g.R_box / 2 if r_out is None else r_out
    grads = np.gradient(table.G, h)
    mag = np.sqrt(sum(d**2 for d in grads))
    r = g.radius
    m = table.annulus(r_in, r_out)
    scaled = mag * r ** (n - 1)
    mid = math.sqrt(r_in * r_out)
    near = m & (r <= mid)
    far = m & (r > mid)
    vals = scaled[m]
    return GradientReport(float(vals.max()), float(scaled[near].max()), float(scaled[far].max()),
                          bool(np.all(np.isfinite(vals))))


def radial_profile(table: GreensTable, shells: int = 64) -> np.ndarray:
    """Shell means of (|x|, G, G |x|^{n-2}) over (h, R_box)."""
    g = table.grid
    r = g.radius.ravel()
    G = table.G.ravel()
    edges = np.linspace(g.h, g.R_box, shells + 1)
    which = np.digitize(r, edges) - 1
    rows = []
    for k in range(shells):
        sel = which == k
        if not np.any(sel):
            continue
        rm = r[sel].mean()
        gm = G[sel].mean()
        rows.append((rm, gm, float(np.mean(G[sel] * r[sel] ** (g.dim - 2)))))
    return np.array(rows)


def mirror_asymmetry(table: GreensTable, axis: int = 0) -> float:
    G = table.G
    return float(np.abs(G - np.flip(G, axis=axis)).max() / np.abs(G).max())
