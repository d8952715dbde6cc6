"""Periodic cell problems, the effective matrix Q and the averaged latent heat.

The cell problem for chi_k is discretised with the same energy stencil as
the solver (face transmissibilities plus corner cross terms), now with
periodic wrap-around on the unit cell.  q_kl is the discrete energy
B(y_k + chi_k, y_l + chi_l), so constant media give Q = A0 exactly.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import LinearOperator, cg

from .media import CoefficientField, HomogenizedData, MediaError


class CellProblemError(RuntimeError):
    pass


def sqrt_spd(Q) -> np.ndarray:
    """Symmetric positive definite square root by eigendecomposition."""
    Q = np.asarray(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise MediaError("matrix must be square")
    if not np.allclose(Q, Q.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(Q).max())):
        raise MediaError("matrix must be symmetric")
    w, V = np.linalg.eigh(0.5 * (Q + Q.T))
    if w.min() <= 0.0:
        raise MediaError(f"matrix must be positive definite (min eigenvalue {w.min():.3g})")
    P = (V * np.sqrt(w)) @ V.T
    return 0.5 * (P + P.T)


def _cell_points(N: int, dim: int, offsets) -> np.ndarray:
    h = 1.0 / N
    axes = [(np.arange(N) + 0.5 + o) * h for o in offsets]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack(mesh, axis=-1)


def _shift_matrix(N: int, dim: int, axis: int) -> sparse.csr_matrix:
    # (S u)_k = u_{k + e_axis} with periodic wrap
    idx = np.arange(N ** dim).reshape((N,) * dim)
    tgt = np.roll(idx, -1, axis=axis).ravel()
    M = N ** dim
    return sparse.csr_matrix((np.ones(M), (np.arange(M), tgt)), shape=(M, M))


@dataclass
class _PeriodicStencil:
    N: int
    dim: int
    faces: list          # (D_i, a_ii / h^2) per axis
    corners: list        # (i, j, Ci, Cj, a_ij / (4 h^2)) per coupled pair
    K: sparse.csr_matrix


def _periodic_stencil(fld: CoefficientField, N: int) -> _PeriodicStencil:
    n = fld.dim
    h = 1.0 / N
    M = N ** n
    I = sparse.identity(M, format="csr")
    S = [_shift_matrix(N, n, i) for i in range(n)]
    faces = []
    K = sparse.csr_matrix((M, M))
    for i in range(n):
        off = [0.5 if k == i else 0.0 for k in range(n)]
        a = fld.a_entry(_cell_points(N, n, off), i, i).ravel() / h**2
        D = (S[i] - I).tocsr()
        faces.append((D, a))
        K = K + D.T @ sparse.diags(a) @ D
    corners = []
    if not fld.diagonal:
        for i, j in itertools.combinations(range(n), 2):
            if fld.A0 is not None and fld.A0[i, j] == 0.0:
                continue
            off = [0.5 if k in (i, j) else 0.0 for k in range(n)]
            w = fld.a_entry(_cell_points(N, n, off), i, j).ravel() / (4.0 * h**2)
            if not np.any(w):
                continue
            Sij = S[i] @ S[j]
            Ci = (S[i] - I + Sij - S[j]).tocsr()
            Cj = (S[j] - I + Sij - S[i]).tocsr()
            corners.append((i, j, Ci, Cj, w))
            W = sparse.diags(w)
            K = K + Ci.T @ W @ Cj + Cj.T @ W @ Ci
    return _PeriodicStencil(N, n, faces, corners, K.tocsr())


def _affine_jumps(st: _PeriodicStencil, k: int):
    """Face and corner differences of the affine function y_k (constant across the cell)."""
    h = 1.0 / st.N
    fj = [h if i == k else 0.0 for i in range(st.dim)]
    cj = [(2 * h if i == k else 0.0, 2 * h if j == k else 0.0) for i, j, *_ in st.corners]
    return fj, cj


def _solve_one(st: _PeriodicStencil, k: int, tol: float, maxiter: int) -> np.ndarray:
    fj, cj = _affine_jumps(st, k)
    rhs = np.zeros(st.K.shape[0])
    for (D, a), jump in zip(st.faces, fj):
        if jump:
            rhs -= D.T @ (a * jump)
    for (i, j, Ci, Cj, w), (di, dj) in zip(st.corners, cj):
        rhs -= Ci.T @ (w * dj) + Cj.T @ (w * di)
    rhs -= rhs.mean()
    if not np.any(rhs):
        return np.zeros(st.K.shape[0])
    d = st.K.diagonal()
    prec = LinearOperator(st.K.shape, matvec=lambda r: r / d)
    chi, info = cg(st.K, rhs, rtol=tol, atol=0.0, maxiter=maxiter, M=prec)
    if info != 0:
        raise CellProblemError(f"cell problem {k} did not converge in {maxiter} CG iterations; "
                               "media may be ill-conditioned")
    return chi - chi.mean()


def _energy(st: _PeriodicStencil, chis, k: int, l: int) -> float:
    N, n = st.N, st.dim
    h = 1.0 / N
    fk, ck = _affine_jumps(st, k)
    fl, cl = _affine_jumps(st, l)
    total = 0.0
    for (D, a), jk, jl in zip(st.faces, fk, fl):
        total += np.dot(a * (D @ chis[k] + jk), D @ chis[l] + jl)
    for (i, j, Ci, Cj, w), (dik, djk), (dil, djl) in zip(st.corners, ck, cl):
        gik = Ci @ chis[k] + dik
        gjk = Cj @ chis[k] + djk
        gil = Ci @ chis[l] + dil
        gjl = Cj @ chis[l] + djl
        total += np.dot(w, gik * gjl + gjk * gil)
    return total * h**n


def solve_cell_problems(fld: CoefficientField, cell_resolution: int, tol: float = 1e-11,
                        maxiter: int = 20000, jobs: int | None = None) -> HomogenizedData:
    if cell_resolution < 16:
        raise ValueError("cell_resolution must be >= 16")
    N, n = int(cell_resolution), fld.dim
    st = _periodic_stencil(fld, N)
    with ThreadPoolExecutor(max_workers=jobs or n) as pool:
        chis = list(pool.map(lambda k: _solve_one(st, k, tol, maxiter), range(n)))
    Q = np.empty((n, n))
    for k in range(n):
        for l in range(k, n):
            Q[k, l] = Q[l, k] = _energy(st, chis, k, l)
    Q = 0.5 * (Q + Q.T)
    if fld.g0 is not None:
        L_avg = 1.0 / fld.g0
    else:
        L_avg = float(np.mean(1.0 / fld.g(_cell_points(N, n, [0.0] * n))))
    return HomogenizedData(Q=Q, L_avg=L_avg, P_sqrt=sqrt_spd(Q),
                           correctors=tuple(c.reshape((N,) * n) for c in chis), cell_resolution=N)


def voigt_reuss(fld: CoefficientField, cell_resolution: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """(harmonic-mean matrix <A^-1>^-1, arithmetic-mean matrix <A>) over the unit cell."""
    N, n = cell_resolution, fld.dim
    A = fld.a(_cell_points(N, n, [0.0] * n)).reshape(-1, n, n)
    return np.linalg.inv(np.linalg.inv(A).mean(axis=0)), A.mean(axis=0)


@dataclass
class AveragingRow:
    epsilon: float
    weighted: float      # int (1/g(x/eps)) p(x) dx
    averaged: float      # L_avg * int p(x) dx
    error: float


def gaussian_bump(sigma: float = 0.15, center=None):
    def profile(x):
        c = 0.0 if center is None else np.asarray(center)
        return np.exp(-np.sum((x - c) ** 2, axis=-1) / (2.0 * sigma**2))
    return profile


def _varying_axes(fld: CoefficientField, samples: int = 64, seed: int = 0) -> list[bool]:
    rng = np.random.default_rng(seed)
    x = rng.random((samples, fld.dim))
    base = fld.g(x)
    out = []
    for k in range(fld.dim):
        moved = x.copy()
        moved[:, k] = rng.random(samples)
        out.append(not np.allclose(fld.g(moved), base, rtol=0.0, atol=1e-14))
    return out


def _composite_gauss(half_width: float, panels: int, nodes: int) -> tuple[np.ndarray, np.ndarray]:
    gx, gw = np.polynomial.legendre.leggauss(nodes)
    edges = np.linspace(-half_width, half_width, panels + 1)
    mid = 0.5 * (edges[1:] + edges[:-1])
    half = 0.5 * (edges[1:] - edges[:-1])
    return (mid[:, None] + half[:, None] * gx[None, :]).ravel(), (half[:, None] * gw[None, :]).ravel()


def averaging_check(fld: CoefficientField, profile, epsilons, L_avg: float | None = None,
                    half_width: float = 1.0, nodes_per_period: int = 32, panels_smooth: int = 8,
                    nodes_smooth: int = 8) -> list[AveragingRow]:
    """|int (1/g(x/eps)) p - L_avg int p| on [-w, w]^n by composite Gauss-Legendre quadrature.

    Along axes on which g varies every eps-period is one panel with
    ``nodes_per_period`` nodes (1/g can have poles close to the real axis, so
    this is generous); other axes only need to resolve the profile.
    """
    n = fld.dim
    if L_avg is None:
        L_avg = 1.0 / fld.g0 if fld.g0 is not None else float(
            np.mean(1.0 / fld.g(_cell_points(64, n, [0.0] * n))))
    varying = _varying_axes(fld) if fld.g0 is None else [False] * n
    rows = []
    for eps in epsilons:
        periods = max(1, int(np.ceil(2.0 * half_width / eps)))
        rules = [_composite_gauss(half_width, periods, nodes_per_period) if v
                 else _composite_gauss(half_width, panels_smooth, nodes_smooth) for v in varying]
        (x1d, w1d), rest = rules[0], rules[1:]
        if rest:
            sub = np.stack(np.meshgrid(*[r[0] for r in rest], indexing="ij"), axis=-1)
            wsub = np.prod(np.stack(np.meshgrid(*[r[1] for r in rest], indexing="ij")), axis=0)
        num = 0.0
        den = 0.0
        for x0, w0 in zip(x1d, w1d):
            if rest:
                pts = np.concatenate([np.full(sub.shape[:-1] + (1,), x0), sub], axis=-1)
                wt = w0 * wsub
            else:
                pts = np.array([[x0]])
                wt = np.array([w0])
            p = profile(pts)
            num += float(np.sum(wt * p / fld.g(pts / eps)))
            den += float(np.sum(wt * p))
        rows.append(AveragingRow(float(eps), num, L_avg * den, abs(num - L_avg * den)))
    return rows
