"""Numba kernels for the flattened finite-volume stencil.

Fields are C-ordered arrays flattened to 1-D.  ``strides[i]`` is the flat
offset of a unit step along axis i.  ``T[i, k]`` is the face transmissibility
between cell k and k + strides[i]; ``W[p, k]`` is the corner weight
a_ij / (4 h^2) of the (i, j) = pairs[p] corner whose lowest cell is k.
Kernels only visit cells listed in ``idx``; those never sit on the outer
layer of the box, so every neighbour index is valid.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _row(u, k, strides, T, W, pairs):
    acc = 0.0
    uk = u[k]
    for i in range(strides.shape[0]):
        s = strides[i]
        acc += T[i, k] * (uk - u[k + s]) + T[i, k - s] * (uk - u[k - s])
    for p in range(pairs.shape[0]):
        si = strides[pairs[p, 0]]
        sj = strides[pairs[p, 1]]
        # k in position 00, 10, 01, 11 of four corners
        k00 = k
        di = u[k00 + si] - u[k00] + u[k00 + si + sj] - u[k00 + sj]
        dj = u[k00 + sj] - u[k00] + u[k00 + si + sj] - u[k00 + si]
        acc -= W[p, k00] * (di + dj)
        k00 = k - si
        di = u[k00 + si] - u[k00] + u[k00 + si + sj] - u[k00 + sj]
        dj = u[k00 + sj] - u[k00] + u[k00 + si + sj] - u[k00 + si]
        acc += W[p, k00] * (dj - di)
        k00 = k - sj
        di = u[k00 + si] - u[k00] + u[k00 + si + sj] - u[k00 + sj]
        dj = u[k00 + sj] - u[k00] + u[k00 + si + sj] - u[k00 + si]
        acc += W[p, k00] * (di - dj)
        k00 = k - si - sj
        di = u[k00 + si] - u[k00] + u[k00 + si + sj] - u[k00 + sj]
        dj = u[k00 + sj] - u[k00] + u[k00 + si + sj] - u[k00 + si]
        acc += W[p, k00] * (di + dj)
    return acc


@njit(cache=True)
def apply_neg_L(u, out, idx, strides, T, W, pairs, shift):
    """out[k] = shift*u[k] + (-L u)[k] for k in idx; other entries untouched."""
    for m in range(idx.shape[0]):
        k = idx[m]
        out[k] = shift * u[k] + _row(u, k, strides, T, W, pairs)


@njit(cache=True)
def diagonal(idx, strides, T, W, pairs, N):
    d = np.zeros(N)
    for m in range(idx.shape[0]):
        k = idx[m]
        acc = 0.0
        for i in range(strides.shape[0]):
            acc += T[i, k] + T[i, k - strides[i]]
        for p in range(pairs.shape[0]):
            si = strides[pairs[p, 0]]
            sj = strides[pairs[p, 1]]
            acc += 2.0 * (W[p, k] - W[p, k - si] - W[p, k - sj] + W[p, k - si - sj])
        d[k] = acc
    return d


@njit(cache=True)
def psor_sweep(u, b, diag, order, strides, T, W, pairs, shift, omega):
    """One projected SOR sweep for  shift*u - L u >= b,  u >= 0,  in the given order.

    Returns the largest scaled update |du|*(shift + diag), a residual proxy.
    """
    big = 0.0
    for m in range(order.shape[0]):
        k = order[m]
        r = b[k] - shift * u[k] - _row(u, k, strides, T, W, pairs)
        dk = shift + diag[k]
        new = u[k] + omega * r / dk
        if new < 0.0:
            new = 0.0
        ch = abs(new - u[k]) * dk
        if ch > big:
            big = ch
        u[k] = new
    return big


@njit(cache=True)
def complementarity(u, b, idx, strides, T, W, pairs, shift):
    """max over idx of |min(u, shift*u - L u - b)| and the most negative u."""
    worst = 0.0
    umin = 0.0
    for m in range(idx.shape[0]):
        k = idx[m]
        w = shift * u[k] + _row(u, k, strides, T, W, pairs) - b[k]
        c = u[k] if u[k] < w else w
        if abs(c) > worst:
            worst = abs(c)
        if u[k] < umin:
            umin = u[k]
    return worst, umin


@njit(cache=True)
def residual_on(u, b, out, idx, strides, T, W, pairs, shift):
    for m in range(idx.shape[0]):
        k = idx[m]
        out[k] = b[k] - shift * u[k] - _row(u, k, strides, T, W, pairs)


@njit(cache=True)
def dot_on(x, y, idx):
    s = 0.0
    for m in range(idx.shape[0]):
        k = idx[m]
        s += x[k] * y[k]
    return s


@njit(cache=True)
def axpy_on(a, x, y, idx):
    for m in range(idx.shape[0]):
        k = idx[m]
        y[k] += a * x[k]


@njit(cache=True)
def xpay_on(x, a, y, idx):
    # y <- x + a*y
    for m in range(idx.shape[0]):
        k = idx[m]
        y[k] = x[k] + a * y[k]


@njit(cache=True)
def scale_on(x, d, out, idx):
    for m in range(idx.shape[0]):
        k = idx[m]
        out[k] = x[k] / d[k]


@njit(cache=True)
def absmax_on(x, idx):
    s = 0.0
    for m in range(idx.shape[0]):
        v = abs(x[idx[m]])
        if v > s:
            s = v
    return s
