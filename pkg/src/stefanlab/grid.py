"""Uniform cell-centred grids on [-R, R]^n and the divergence-form stencil.

The discrete operator is built from the energy

    B(u, w) = sum_faces a_ii(face) d_i u d_i w / h^2
            + sum_{i != j} sum_corners a_ij(corner) D_i u D_j w

where d_i is the two-point difference across a face and D_i the gradient at a
cell corner averaged over the four cells around it.  (-L_h u)_k = dB(u, e_k),
so the operator is symmetric for any coefficient field, reproduces quadratics
exactly for constant coefficients, and reduces to the two-point flux scheme
when A is diagonal.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import _kernels as kern
from .media import CoefficientField


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    dim: int
    R_box: float
    cells: int

    def __post_init__(self):
        if self.cells % 2 == 0:
            raise GridError(f"cells_per_axis must be odd, got {self.cells}")
        if self.cells < 9:
            raise GridError(f"cells_per_axis must be >= 9, got {self.cells}")
        if not self.R_box > 0:
            raise GridError("R_box must be positive")
        if self.dim < 2:
            raise GridError("dim must be >= 2")

    @property
    def h(self) -> float:
        return 2.0 * self.R_box / (self.cells - 1)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.cells,) * self.dim

    @property
    def size(self) -> int:
        return self.cells ** self.dim

    @property
    def axis(self) -> np.ndarray:
        return np.linspace(-self.R_box, self.R_box, self.cells)

    @property
    def strides(self) -> np.ndarray:
        return np.array([self.cells ** (self.dim - 1 - i) for i in range(self.dim)], dtype=np.int64)

    @property
    def origin_index(self) -> int:
        c = self.cells // 2
        return int(sum(c * s for s in self.strides))

    def coords(self, k: int) -> np.ndarray:
        """Cell-centre coordinates, shape (cells,)*dim, of axis k (broadcast-free)."""
        shape = [1] * self.dim
        shape[k] = self.cells
        return self.axis.reshape(shape)

    def centers(self) -> np.ndarray:
        """Cell centres of shape shape + (dim,); allocates dim*size floats."""
        grids = np.meshgrid(*([self.axis] * self.dim), indexing="ij")
        return np.stack(grids, axis=-1)

    @cached_property
    def radius(self) -> np.ndarray:
        r2 = np.zeros(self.shape)
        for k in range(self.dim):
            r2 = r2 + self.coords(k) ** 2
        return np.sqrt(r2)


def build_grid(n: int, R_box: float, cells_per_axis: int) -> Grid:
    return Grid(dim=n, R_box=float(R_box), cells=int(cells_per_axis))


@dataclass(frozen=True)
class DomainMasks:
    k_mask: np.ndarray
    outer_mask: np.ndarray
    r_K: float = float("nan")

    @property
    def active(self) -> np.ndarray:
        return ~(self.k_mask | self.outer_mask)

    @cached_property
    def free_idx(self) -> np.ndarray:
        return np.flatnonzero(self.active.ravel())


def outer_layer(grid: Grid) -> np.ndarray:
    m = np.zeros(grid.shape, dtype=bool)
    for k in range(grid.dim):
        sl = [slice(None)] * grid.dim
        sl[k] = 0
        m[tuple(sl)] = True
        sl[k] = -1
        m[tuple(sl)] = True
    return m


def mask_ball_source(grid: Grid, r_K: float) -> DomainMasks:
    h = grid.h
    if 2.0 * r_K < 3.0 * h:
        raise GridError(f"source radius {r_K} is not resolved: fewer than 3 cells of width {h:.4g} across")
    if r_K >= grid.R_box / 2:
        raise GridError(f"source radius {r_K} must be below R_box/2 = {grid.R_box / 2}")
    k_mask = grid.radius <= r_K + 1e-12 * h
    return DomainMasks(k_mask=k_mask, outer_mask=outer_layer(grid), r_K=float(r_K))


def no_source_masks(grid: Grid) -> DomainMasks:
    return DomainMasks(k_mask=np.zeros(grid.shape, dtype=bool), outer_mask=outer_layer(grid))


@dataclass(frozen=True)
class StencilOperator:
    grid: Grid
    T: np.ndarray        # (dim, N) face transmissibilities a_ii / h^2
    W: np.ndarray        # (npairs, N) corner weights a_ij / (4 h^2)
    pairs: np.ndarray    # (npairs, 2) axis pairs i < j
    shift: float = 1.0   # coefficients sampled at shift * x
    interior_idx: np.ndarray = field(default=None, repr=False)

    @property
    def strides(self) -> np.ndarray:
        return self.grid.strides

    def neg_L(self, u: np.ndarray, idx: np.ndarray | None = None, diag_shift: float = 0.0) -> np.ndarray:
        """Return diag_shift*u - L u on idx (default: all non-outer cells), zero elsewhere."""
        idx = self.interior_idx if idx is None else idx
        flat = np.ascontiguousarray(u, dtype=float).ravel()
        out = np.zeros_like(flat)
        kern.apply_neg_L(flat, out, idx, self.strides, self.T, self.W, self.pairs, float(diag_shift))
        return out.reshape(np.shape(u))

    def apply(self, u: np.ndarray) -> np.ndarray:
        """Discrete L u on non-outer cells (zero on the outer layer)."""
        return -self.neg_L(u)

    def diagonal(self, idx: np.ndarray | None = None) -> np.ndarray:
        idx = self.interior_idx if idx is None else idx
        return kern.diagonal(idx, self.strides, self.T, self.W, self.pairs, self.grid.size)


def _face_points(grid: Grid, axis: int, scale: float) -> np.ndarray:
    # midpoints of faces between cell k and k + e_axis, for cells with index < cells-1 on that axis
    h = grid.h
    ax = grid.axis
    pts = []
    for k in range(grid.dim):
        a = ax[:-1] + 0.5 * h if k == axis else ax
        pts.append(a)
    mesh = np.meshgrid(*pts, indexing="ij")
    return np.stack(mesh, axis=-1) * scale


def _corner_points(grid: Grid, i: int, j: int, scale: float) -> np.ndarray:
    h = grid.h
    ax = grid.axis
    pts = [ax[:-1] + 0.5 * h if k in (i, j) else ax for k in range(grid.dim)]
    mesh = np.meshgrid(*pts, indexing="ij")
    return np.stack(mesh, axis=-1) * scale


def _entry_on(fld: CoefficientField, pts: np.ndarray, i: int, j: int, chunk: int = 1 << 20) -> np.ndarray:
    flat = pts.reshape(-1, pts.shape[-1])
    out = np.empty(flat.shape[0])
    for s in range(0, flat.shape[0], chunk):
        out[s:s + chunk] = fld.a_entry(flat[s:s + chunk], i, j)
    return out.reshape(pts.shape[:-1])


def assemble_operator(grid: Grid, fld: CoefficientField, shift: float | None = None) -> StencilOperator:
    if fld.dim != grid.dim:
        raise GridError("media and grid dimensions differ")
    scale = 1.0 if shift is None else float(shift)
    if scale < 1.0:
        raise GridError("shift must be >= 1")
    n, h, N = grid.dim, grid.h, grid.size
    T = np.zeros((n, N))
    for i in range(n):
        vals = _entry_on(fld, _face_points(grid, i, scale), i, i) / h**2
        full = np.zeros(grid.shape)
        sl = [slice(None)] * n
        sl[i] = slice(0, grid.cells - 1)
        full[tuple(sl)] = vals
        T[i] = full.ravel()
    pairs = []
    Ws = []
    if not fld.diagonal:
        for i, j in itertools.combinations(range(n), 2):
            if fld.A0 is not None and fld.A0[i, j] == 0.0:
                continue
            vals = _entry_on(fld, _corner_points(grid, i, j, scale), i, j) / (4.0 * h**2)
            if not np.any(vals):
                continue
            full = np.zeros(grid.shape)
            sl = [slice(None)] * n
            sl[i] = slice(0, grid.cells - 1)
            sl[j] = slice(0, grid.cells - 1)
            full[tuple(sl)] = vals
            pairs.append((i, j))
            Ws.append(full.ravel())
    W = np.array(Ws) if Ws else np.zeros((0, N))
    pairs_arr = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    interior = np.flatnonzero(~outer_layer(grid).ravel())
    return StencilOperator(grid=grid, T=T, W=W, pairs=pairs_arr, shift=scale, interior_idx=interior)


def color_order(grid: Grid, idx: np.ndarray, mixed: bool) -> np.ndarray:
    """Red-black order of idx (2^n colours when corner terms couple diagonal neighbours)."""
    sub = np.array(np.unravel_index(idx, grid.shape))
    if mixed:
        color = np.zeros(idx.shape[0], dtype=np.int64)
        for k in range(grid.dim):
            color = 2 * color + (sub[k] % 2)
    else:
        color = sub.sum(axis=0) % 2
    return idx[np.argsort(color, kind="stable")]


def embed_ball_boundary(op: StencilOperator, masks: DomainMasks, theta_min: float = 0.1) -> StencilOperator:
    """Place the Dirichlet surface of a ball source on the sphere instead of at cell centres.

    For a face between a free cell x_k and a source cell x_j, the sphere
    |x| = r_K cuts the segment at fraction theta of the way from x_k; the face
    transmissibility is divided by theta so the source value is imposed at
    distance theta*h.  Only rows of free cells change (source rows are
    Dirichlet), so the reduced operator stays symmetric.  Corner terms are
    left as they are.
    """
    grid = op.grid
    r_K = masks.r_K
    if not np.isfinite(r_K) or not np.any(masks.k_mask):
        return op
    T = op.T.copy()
    kflat = masks.k_mask.ravel()
    free = masks.active.ravel()
    h = grid.h
    for i in range(grid.dim):
        s = int(grid.strides[i])
        for sign in (1, -1):
            # faces between free cell k and source cell j = k + sign*s
            k = np.flatnonzero(free)
            j = k + sign * s
            ok = (j >= 0) & (j < grid.size)
            k, j = k[ok], j[ok]
            sel = kflat[j]
            k, j = k[sel], j[sel]
            if k.size == 0:
                continue
            xk = np.stack(np.unravel_index(k, grid.shape), axis=-1) * h - grid.R_box
            d = np.zeros(grid.dim)
            d[i] = sign * h
            # |xk + s d|^2 = r_K^2, smallest root in (0, 1]
            a = d @ d
            b = 2.0 * xk @ d
            c = np.sum(xk**2, axis=1) - r_K**2
            disc = np.sqrt(np.maximum(b * b - 4 * a * c, 0.0))
            theta = (-b - disc) / (2 * a)
            theta = np.clip(theta, theta_min, 1.0)
            face = k if sign == 1 else j   # T[i, m] couples m and m + s
            T[i, face] = T[i, face] / theta
    return StencilOperator(grid=grid, T=T, W=op.W, pairs=op.pairs, shift=op.shift, interior_idx=op.interior_idx)
