"""Jacobi-preconditioned conjugate gradients on a subset of cells.

Unknowns live on ``idx``; every other entry of ``u`` is held fixed and enters
through the stencil, which is how Dirichlet data on K and on the box boundary
reach the interior equations.
"""

from __future__ import annotations

import numpy as np

from . import _kernels as kern
from .grid import StencilOperator


class ConvergenceError(RuntimeError):
    pass


def cg_solve(op: StencilOperator, u: np.ndarray, b: np.ndarray, idx: np.ndarray,
             shift: float = 0.0, tol: float = 1e-10, maxiter: int = 20000,
             diag: np.ndarray | None = None) -> tuple[np.ndarray, int, float]:
    """Solve shift*u - L u = b on idx, in place on the flat array u.

    ``tol`` is an absolute bound on the max-norm residual.  Returns
    (u, iterations, final residual).
    """
    strides, T, W, pairs = op.strides, op.T, op.W, op.pairs
    u = u.ravel()
    b = b.ravel()
    if diag is None:
        diag = op.diagonal(idx)
    d = diag + shift
    r = np.zeros_like(u)
    kern.residual_on(u, b, r, idx, strides, T, W, pairs, shift)
    res = kern.absmax_on(r, idx)
    if res <= tol:
        return u, 0, res
    z = np.zeros_like(u)
    kern.scale_on(r, d, z, idx)
    p = np.zeros_like(u)
    p[idx] = z[idx]
    q = np.zeros_like(u)
    rz = kern.dot_on(r, z, idx)
    for it in range(1, maxiter + 1):
        # q = M p with p zero off idx
        kern.apply_neg_L(p, q, idx, strides, T, W, pairs, shift)
        pq = kern.dot_on(p, q, idx)
        if pq <= 0:
            raise ConvergenceError("operator is not positive definite on the free set")
        a = rz / pq
        kern.axpy_on(a, p, u, idx)
        kern.axpy_on(-a, q, r, idx)
        if it % 10 == 0 or it == maxiter:
            res = kern.absmax_on(r, idx)
            if res <= tol:
                # guard against drift of the recursive residual
                kern.residual_on(u, b, r, idx, strides, T, W, pairs, shift)
                res = kern.absmax_on(r, idx)
                if res <= tol:
                    return u, it, res
        kern.scale_on(r, d, z, idx)
        rz_new = kern.dot_on(r, z, idx)
        kern.xpay_on(z, rz_new / rz, p, idx)
        rz = rz_new
    raise ConvergenceError(f"CG did not reach {tol:.2e} in {maxiter} iterations (residual {res:.2e})")
