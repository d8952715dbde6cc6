"""Periodic coefficient fields a_ij(x), g(x) and reproducible presets.

A field is a pair of vectorised callables: ``a(x)`` maps points of shape
``(..., n)`` to symmetric matrices of shape ``(..., n, n)`` and ``g(x)`` maps
them to positive scalars of shape ``(...)``.  Both are 1-periodic in every
coordinate.  Fields are evaluated on demand so the same object serves every
grid resolution and every rescaling x -> s*x.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import qmc

MatrixFn = Callable[[np.ndarray], np.ndarray]
ScalarFn = Callable[[np.ndarray], np.ndarray]

# dense-sampling budget used to estimate bounds of non-constant media
_BOUND_SAMPLES = 4096


class MediaError(ValueError):
    pass


@dataclass(frozen=True)
class CoefficientField:
    dim: int
    a_fn: MatrixFn
    g_fn: ScalarFn
    alpha: float
    beta: float
    m_g: float
    M_g: float
    lip_a: float = 0.0
    lip_g: float = 0.0
    name: str = "custom"
    # set for x-independent media; lets callers skip quadrature and use exact formulas
    A0: np.ndarray | None = None
    g0: float | None = None
    # off-diagonal entries identically zero (pure two-point flux stencil)
    diagonal: bool = False

    @property
    def is_constant(self) -> bool:
        return self.A0 is not None and self.g0 is not None

    def a(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.a_fn(x)

    def a_entry(self, x: np.ndarray, i: int, j: int) -> np.ndarray:
        """Single matrix entry a_ij at points x, avoiding the full (..., n, n) tensor."""
        x = np.asarray(x, dtype=float)
        if self.A0 is not None:
            return np.full(x.shape[:-1], self.A0[i, j])
        return self.a_fn(x)[..., i, j]

    def g(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.g_fn(x)


@dataclass(frozen=True)
class HomogenizedData:
    Q: np.ndarray
    L_avg: float
    P_sqrt: np.ndarray
    correctors: tuple[np.ndarray, ...] = ()
    cell_resolution: int = 0


@dataclass(frozen=True)
class MediaPreset:
    name: str
    field: CoefficientField
    known_homogenized: HomogenizedData | None = None


@dataclass
class ValidationReport:
    samples: int
    rayleigh_min: float
    rayleigh_max: float
    g_rayleigh_min: float
    g_rayleigh_max: float
    g_min: float
    g_max: float
    periodicity_residual: float
    symmetry_residual: float
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def _check_spd(A0: np.ndarray) -> np.ndarray:
    A0 = np.asarray(A0, dtype=float)
    if A0.ndim != 2 or A0.shape[0] != A0.shape[1]:
        raise MediaError("A0 must be a square matrix")
    if not np.array_equal(A0, A0.T):
        raise MediaError("A0 must be symmetric")
    eig = np.linalg.eigvalsh(A0)
    if eig.min() <= 0.0:
        raise MediaError(f"A0 must be positive definite (min eigenvalue {eig.min():.3g})")
    return A0


def make_constant_media(A0, g0: float, name: str = "constant") -> CoefficientField:
    A0 = _check_spd(A0)
    if not g0 > 0:
        raise MediaError("g0 must be positive")
    n = A0.shape[0]
    eig = np.linalg.eigvalsh(A0)
    A0.setflags(write=False)

    def a_fn(x):
        return np.broadcast_to(A0, x.shape[:-1] + (n, n))

    def g_fn(x):
        return np.full(x.shape[:-1], float(g0))

    return CoefficientField(
        dim=n, a_fn=a_fn, g_fn=g_fn,
        alpha=float(eig.min()), beta=float(eig.max()),
        m_g=float(g0), M_g=float(g0),
        name=name, A0=A0, g0=float(g0),
        diagonal=bool(np.count_nonzero(A0 - np.diag(np.diag(A0))) == 0),
    )


def _sample_points(dim: int, samples: int, seed: int = 0) -> np.ndarray:
    # scrambled Sobol points on the unit cell; power-of-two sizes keep the balance property
    m = max(1, math.ceil(math.log2(max(samples, 1))))
    pts = qmc.Sobol(d=dim, scramble=True, seed=seed).random_base2(m)
    return pts[:samples]


def _lipschitz(fn: Callable[[np.ndarray], np.ndarray], dim: int, pts: np.ndarray) -> float:
    step = 1e-6
    lip = 0.0
    base = fn(pts)
    for k in range(dim):
        shifted = pts.copy()
        shifted[:, k] += step
        diff = np.abs(fn(shifted) - base) / step
        lip = max(lip, float(diff.max()))
    return lip


def field_from_functions(
    dim: int,
    a_fn: MatrixFn,
    g_fn: ScalarFn,
    name: str = "custom",
    diagonal: bool = False,
    samples: int = _BOUND_SAMPLES,
) -> CoefficientField:
    """Wrap periodic callables, estimating alpha, beta, m, M by sampling.

    Sampled extrema are widened by ``lip * spacing`` where ``spacing`` is the
    typical distance between sample points, so the bounds hold between samples.
    """
    pts = _sample_points(dim, samples, seed=12345)
    A = a_fn(pts)
    if not np.allclose(A, np.swapaxes(A, -1, -2), rtol=0, atol=1e-14):
        raise MediaError("coefficient matrix is not symmetric")
    eig = np.linalg.eigvalsh(A)
    g = g_fn(pts)
    if g.min() <= 0:
        raise MediaError("g must be positive")
    if eig.min() <= 0:
        raise MediaError("coefficient matrix is not positive definite")

    def eig_min(x):
        return np.linalg.eigvalsh(a_fn(x))[:, 0]

    def eig_max(x):
        return np.linalg.eigvalsh(a_fn(x))[:, -1]

    lip_a = max(_lipschitz(eig_min, dim, pts), _lipschitz(eig_max, dim, pts))
    lip_g = _lipschitz(g_fn, dim, pts)
    spacing = 0.5 * math.sqrt(dim) * len(pts) ** (-1.0 / dim)
    alpha = float(eig[:, 0].min()) - lip_a * spacing
    m_g = float(g.min()) - lip_g * spacing
    if alpha <= 0 or m_g <= 0:
        raise MediaError("media touches zero within the Lipschitz safety margin")
    return CoefficientField(
        dim=dim, a_fn=a_fn, g_fn=g_fn,
        alpha=alpha, beta=float(eig[:, -1].max()) + lip_a * spacing,
        m_g=m_g, M_g=float(g.max()) + lip_g * spacing,
        lip_a=lip_a, lip_g=lip_g, name=name, diagonal=diagonal,
    )


def make_layered_media(profile: Callable[[np.ndarray], np.ndarray], dim: int = 3,
                       name: str = "layered") -> CoefficientField:
    """A(x) = profile(x_1) I and g(x) = profile(x_1) for a positive 1-periodic profile."""
    s = np.linspace(0.0, 1.0, 4097)
    vals = profile(s)
    if vals.min() <= 0:
        raise MediaError("layer profile must stay positive")
    eye = np.eye(dim)

    def a_fn(x):
        return profile(x[..., 0])[..., None, None] * eye

    def g_fn(x):
        return profile(x[..., 0])

    return field_from_functions(dim, a_fn, g_fn, name=name, diagonal=True)


def layered_homogenized(profile: Callable[[np.ndarray], np.ndarray], dim: int = 3) -> HomogenizedData:
    """Closed-form homogenization of a layered field: harmonic mean across layers, arithmetic along."""
    from scipy.integrate import quad

    harm = 1.0 / quad(lambda s: 1.0 / profile(np.asarray(s)), 0.0, 1.0, epsabs=1e-14, epsrel=1e-13)[0]
    arith = quad(lambda s: profile(np.asarray(s)), 0.0, 1.0, epsabs=1e-14, epsrel=1e-13)[0]
    Q = np.diag([harm] + [arith] * (dim - 1))
    L_avg = quad(lambda s: 1.0 / profile(np.asarray(s)), 0.0, 1.0, epsabs=1e-14, epsrel=1e-13)[0]
    return HomogenizedData(Q=Q, L_avg=L_avg, P_sqrt=np.diag(np.sqrt(np.diag(Q))))


def validate_media(fld: CoefficientField, samples: int = 10_000, seed: int = 0,
                   tol: float = 1e-12) -> ValidationReport:
    if samples < 1:
        raise MediaError("samples must be >= 1")
    n = fld.dim
    pts = _sample_points(n, samples, seed) * 4.0 - 2.0
    A = fld.a(pts)
    g = fld.g(pts)
    sym = float(np.abs(A - np.swapaxes(A, -1, -2)).max())
    eig = np.linalg.eigvalsh(0.5 * (A + np.swapaxes(A, -1, -2)))
    gA = eig * g[:, None]
    per = 0.0
    for k in range(n):
        shifted = pts.copy()
        shifted[:, k] += 1.0
        per = max(per, float(np.abs(fld.a(shifted) - A).max()), float(np.abs(fld.g(shifted) - g).max()))

    rep = ValidationReport(
        samples=samples,
        rayleigh_min=float(eig.min()), rayleigh_max=float(eig.max()),
        g_rayleigh_min=float(gA.min()), g_rayleigh_max=float(gA.max()),
        g_min=float(g.min()), g_max=float(g.max()),
        periodicity_residual=per, symmetry_residual=sym,
    )
    if sym > tol:
        rep.failures.append(f"symmetry residual {sym:.3e}")
    if rep.rayleigh_min < fld.alpha - tol or rep.rayleigh_max > fld.beta + tol:
        rep.failures.append("ellipticity bounds violated")
    if rep.g_min < fld.m_g - tol or rep.g_max > fld.M_g + tol:
        rep.failures.append("bounds on g violated")
    if rep.g_rayleigh_min < fld.m_g * fld.alpha - tol or rep.g_rayleigh_max > fld.M_g * fld.beta + tol:
        rep.failures.append("bounds on g*A violated")
    # periodic trig expressions lose a few ulps when shifted by one period
    if per > max(tol, 1e-12 * max(1.0, rep.rayleigh_max)):
        rep.failures.append(f"periodicity residual {per:.3e}")
    return rep


# ---------------------------------------------------------------- expressions

_EXPR_NAMES = {
    "sin": np.sin, "cos": np.cos, "tan": np.tan, "exp": np.exp, "sqrt": np.sqrt,
    "abs": np.abs, "log": np.log, "pi": np.pi, "tanh": np.tanh,
}


def _compile_expr(expr: str, dim: int) -> Callable[[np.ndarray], np.ndarray]:
    code = compile(expr, "<media>", "eval")
    allowed = set(_EXPR_NAMES) | {f"x{k + 1}" for k in range(dim)}
    unknown = set(code.co_names) - allowed
    if unknown:
        raise MediaError(f"unknown names in expression {expr!r}: {sorted(unknown)}")

    def fn(x):
        env = dict(_EXPR_NAMES)
        for k in range(dim):
            env[f"x{k + 1}"] = x[..., k]
        out = eval(code, {"__builtins__": {}}, env)
        return np.broadcast_to(np.asarray(out, dtype=float), x.shape[:-1]).copy()

    return fn


def media_from_expressions(a_exprs: dict[tuple[int, int], str], g_expr: str, dim: int = 3,
                           name: str = "expr") -> CoefficientField:
    """Build a field from strings such as ``{(0, 0): "2 + sin(2*pi*x1)"}``.

    Missing off-diagonal entries are zero and a_ji mirrors a_ij.
    """
    fns = {}
    for (i, j), expr in a_exprs.items():
        i, j = min(i, j), max(i, j)
        fns[(i, j)] = _compile_expr(expr, dim)
    for i in range(dim):
        if (i, i) not in fns:
            raise MediaError(f"missing diagonal entry a{i + 1}{i + 1}")
    gfn = _compile_expr(g_expr, dim)
    diagonal = all(i == j for (i, j) in fns)

    def a_fn(x):
        out = np.zeros(x.shape[:-1] + (dim, dim))
        for (i, j), f in fns.items():
            out[..., i, j] = f(x)
            out[..., j, i] = out[..., i, j]
        return out

    return field_from_functions(dim, a_fn, gfn, name=name, diagonal=diagonal)


# -------------------------------------------------------------------- presets

def two_plus_sin(s):
    return 2.0 + np.sin(2.0 * np.pi * np.asarray(s, dtype=float))


def _smooth3d() -> CoefficientField:
    # variable media with mild off-diagonal coupling (|a_ij| <= 0.4 alpha)
    two_pi = 2.0 * np.pi

    def a_fn(x):
        x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
        out = np.zeros(x.shape[:-1] + (3, 3))
        out[..., 0, 0] = 1.5 + 0.5 * np.sin(two_pi * x1) * np.cos(two_pi * x2)
        out[..., 1, 1] = 1.5 + 0.5 * np.sin(two_pi * x2) * np.cos(two_pi * x3)
        out[..., 2, 2] = 1.5 + 0.5 * np.sin(two_pi * x3) * np.cos(two_pi * x1)
        off = 0.15 * np.cos(two_pi * (x1 + x2 + x3))
        out[..., 0, 1] = out[..., 1, 0] = off
        out[..., 1, 2] = out[..., 2, 1] = off
        return out

    def g_fn(x):
        return 1.0 + 0.5 * np.sin(two_pi * x[..., 0]) * np.sin(two_pi * x[..., 1])

    return field_from_functions(3, a_fn, g_fn, name="smooth3d")


def get_preset(name: str) -> MediaPreset:
    if name == "identity":
        f = make_constant_media(np.eye(3), 1.0, name="identity")
        return MediaPreset(name, f, HomogenizedData(Q=np.eye(3), L_avg=1.0, P_sqrt=np.eye(3)))
    if name == "anisotropic":
        A0 = np.array([[2.0, 0.3, 0.0], [0.3, 1.0, 0.0], [0.0, 0.0, 1.5]])
        f = make_constant_media(A0, 1.0, name="anisotropic")
        from .homogenize import sqrt_spd
        return MediaPreset(name, f, HomogenizedData(Q=A0.copy(), L_avg=1.0, P_sqrt=sqrt_spd(A0)))
    if name == "layered":
        f = make_layered_media(two_plus_sin, 3, name="layered")
        return MediaPreset(name, f, layered_homogenized(two_plus_sin, 3))
    if name == "smooth3d":
        return MediaPreset(name, _smooth3d(), None)
    raise MediaError(f"unknown media preset {name!r}; choose from {PRESET_NAMES}")


PRESET_NAMES = ("identity", "anisotropic", "layered", "smooth3d")
