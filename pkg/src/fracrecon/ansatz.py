"""Oscillatory probe data and the approximate extension solutions.

Probe data concentrate at x0 in direction alpha:

    phi_N(x) = c_bar e^{i N alpha.(x - x0)} eta(sqrt(N) (x - x0))     (Dirichlet)
    f_N(x)   =       e^{i N alpha.(x - x0)} eta(sqrt(N) (x - x0))     (Neumann)

In the scaled variables z = sqrt(N)(x - x0), tau = N x_{n+1} the extension
operator divided by c(x) x_{n+1}^{1-2s} e^{i N alpha.x} expands as

    N^2 (d_tau^2 + (1-2s)/tau d_tau - C0^2) + sum_{q>=1} N^{2 - q/2} L_q

with tangential operators L_q built from Taylor coefficients of gamma and
b_{jl} = d_j(c gamma_{jl}) / c at x0.  The approximate solution is

    u_N = e^{i N alpha.(x-x0)} sum_p N^{-p/2} sum_l P_{p,l}(z) Phi_l(tau),
    Phi_l(tau) = (C0 tau)^s W_l(C0 tau),  W_0 = K_s,  W_l from the Bessel ODE
    with source W_{l-1},

and the tangential factors obey P_{p,l+1} = -C0^{-2} sum_{q=1}^{p} L_q P_{p-q,l}.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy import integrate, optimize, special

from .odekernel import GridSpec, RadialProfile, bessel_k_profile, solve_inhomogeneous, weighted_flux_limit
from .specfun import _order, gamma_constants

__all__ = [
    "TangentialGrid",
    "CutoffProfile",
    "ProbeSpec",
    "BoundaryData",
    "AnsatzSolution",
    "ResolutionError",
    "NotAdmissibleError",
    "make_cutoff",
    "admissible_frequencies",
    "dirichlet_data",
    "neumann_data",
    "taylor_coefficients",
    "build_ansatz",
    "ansatz_residual",
    "energy_decomposition",
]


class ResolutionError(ValueError):
    """The tangential grid does not resolve the probe."""


class NotAdmissibleError(ValueError):
    """Neumann data requested at a frequency where the datum has nonzero mean."""


# --------------------------------------------------------------------------
# tangential grid
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TangentialGrid:
    """Uniform periodic grid on the box center + [-half_width, half_width)^n."""

    n: int
    center: np.ndarray
    half_width: float
    points: int

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.center, dtype=float))
        if c.shape != (self.n,):
            raise ValueError(f"center must have {self.n} components")
        if self.points < 2 or self.half_width <= 0:
            raise ValueError("grid needs at least 2 points and positive width")
        object.__setattr__(self, "center", c)

    @property
    def spacing(self) -> float:
        return 2.0 * self.half_width / self.points

    @property
    def cell_volume(self) -> float:
        return self.spacing ** self.n

    @property
    def shape(self) -> tuple:
        return (self.points,) * self.n

    def axis(self, j: int) -> np.ndarray:
        return self.center[j] - self.half_width + self.spacing * np.arange(self.points)

    def coordinates(self) -> np.ndarray:
        """Array of shape (*shape, n)."""
        axes = [self.axis(j) for j in range(self.n)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def wavenumbers(self) -> list:
        k = 2.0 * np.pi * np.fft.fftfreq(self.points, d=self.spacing)
        return [k.reshape([-1 if i == j else 1 for i in range(self.n)]) for j in range(self.n)]

    def describe(self) -> dict:
        return {"n": self.n, "center": [float(v) for v in self.center],
                "half_width": float(self.half_width), "points": int(self.points)}


# --------------------------------------------------------------------------
# cutoffs
# --------------------------------------------------------------------------

_GL_X, _GL_W = np.polynomial.legendre.leggauss(100)


def _bump(x):
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    inside = np.abs(x) < 1
    out[inside] = np.exp(-1.0 / (1.0 - x[inside] ** 2))
    return out


@lru_cache(maxsize=1)
def _bump_mass() -> float:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        return _bump_mass_quad()


def _bump_mass_quad() -> float:
    return integrate.quad(lambda x: math.exp(-1.0 / (1.0 - x * x)), -1, 1, epsabs=1e-15, epsrel=1e-14)[0]


def _bump_cdf(u):
    """Normalized cumulative integral of the 1-D bump from -1 to u."""
    u = np.clip(np.asarray(u, dtype=float), -1.0, 1.0)
    half = 0.5 * (u + 1.0)
    pts = -1.0 + half[..., None] * (_GL_X + 1.0)
    return (_bump(pts) @ _GL_W) * half / _bump_mass()


_RHO_X, _RHO_W = np.polynomial.legendre.leggauss(400)


def _bump_transform(nu):
    """Fourier transform of the normalized 1-D bump (even, real)."""
    nu = np.asarray(nu, dtype=float)
    weights = _RHO_W * _bump(_RHO_X) / _bump_mass()
    return np.cos(nu[..., None] * _RHO_X) @ weights


@dataclass(frozen=True, eq=False)
class CutoffProfile:
    """Smooth cutoff eta supported in the unit ball with int eta^2 = 1.

    ``mollified_box`` is A prod_j b(z_j / sigma) with b the box [-1/2, 1/2]
    convolved with the normalized bump of width epsilon; sigma shrinks the
    box when sqrt(n)(1/2 + epsilon) would leave the unit ball.
    ``radial_bump`` is A exp(-1/(1-|z|^2)).
    """

    kind: str
    mollifier_width: float
    n: int
    amplitude: float
    sigma: float
    samples: np.ndarray
    sample_spacing: float
    sup: float
    l1_norm: float

    def value(self, z) -> np.ndarray:
        """eta at points z of shape (..., n)."""
        z = np.asarray(z, dtype=float)
        if self.kind == "radial_bump":
            r2 = np.sum(z * z, axis=-1)
            out = np.zeros(r2.shape)
            inside = r2 < 1.0
            out[inside] = np.exp(-1.0 / (1.0 - r2[inside]))
            return self.amplitude * out
        out = np.full(z.shape[:-1], self.amplitude)
        for j in range(self.n):
            out = out * self._profile1d(z[..., j])
        return out

    def value_on_axes(self, axes) -> np.ndarray:
        """eta on the tensor grid spanned by 1-D coordinate arrays ``axes``."""
        if self.kind == "radial_bump":
            zz = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
            return self.value(zz)
        out = np.asarray(self.amplitude)
        for a in axes:
            out = np.multiply.outer(out, self._profile1d(np.asarray(a, dtype=float)))
        return out

    def _profile1d(self, x):
        x = np.asarray(x, dtype=float) / self.sigma
        eps = self.mollifier_width
        return _bump_cdf((x + 0.5) / eps) - _bump_cdf((x - 0.5) / eps)

    def factor_transform(self, omega):
        """1-D factor of the mollified box transform at frequency omega."""
        w = self.sigma * np.asarray(omega, dtype=float)
        box = np.where(np.abs(w) < 1e-8, 1.0, 2.0 * np.sin(0.5 * w) / np.where(w == 0, 1.0, w))
        return self.sigma * _bump_transform(self.mollifier_width * w) * box

    def fourier(self, omega) -> np.ndarray:
        """eta_hat(omega) = int eta(z) e^{-i omega.z} dz (real, eta even), omega of shape (..., n)."""
        omega = np.asarray(omega, dtype=float)
        if self.kind == "mollified_box":
            out = np.full(omega.shape[:-1], self.amplitude)
            for j in range(self.n):
                out = out * self.factor_transform(omega[..., j])
            return out
        r = np.linalg.norm(omega, axis=-1)
        return self._radial_transform(r)

    def _radial_transform(self, r):
        # Hankel transform of the radial profile on [0, 1]
        r = np.asarray(r, dtype=float)
        x, w = _RHO_X, _RHO_W
        rho = 0.5 * (x + 1.0)
        wt = 0.5 * w * self.amplitude * np.exp(-1.0 / np.maximum(1.0 - rho ** 2, 1e-300)) * (rho < 1)
        n = self.n
        if n == 1:
            return 2.0 * np.cos(r[..., None] * rho) @ wt
        nu = n / 2.0 - 1.0
        arg = r[..., None] * rho
        small = r < 1e-12
        rs = np.where(small, 1.0, r)
        kern = (2 * np.pi) ** (n / 2.0) * special.jv(nu, np.where(small[..., None], 0.0, arg)) \
            * rho ** (n / 2.0) / rs[..., None] ** nu
        out = kern @ wt
        if np.any(small):
            area = 2 * np.pi ** (n / 2.0) / math.gamma(n / 2.0)
            out = np.where(small, area * ((rho ** (n - 1)) @ wt), out)
        return out


def make_cutoff(kind: str = "mollified_box", epsilon: float = 0.1, n: int = 2,
                sample_points: int = 801) -> CutoffProfile:
    """Build a cutoff profile and its samples on [-1, 1]^n."""
    with warnings.catch_warnings():
        # quad reports roundoff on the flat tails of exp(-1/(1-x^2)); the values are converged
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        return _make_cutoff(kind, epsilon, n, sample_points)


def _make_cutoff(kind, epsilon, n, sample_points):
    if kind not in ("mollified_box", "radial_bump"):
        raise ValueError(f"unknown cutoff kind {kind!r}")
    if not (0.0 < epsilon < 0.25):
        raise ValueError(f"epsilon must lie in (0, 1/4), got {epsilon}")
    if n < 1:
        raise ValueError("n must be positive")
    z1 = np.linspace(-1.0, 1.0, sample_points)
    h = z1[1] - z1[0]
    if kind == "mollified_box":
        reach = math.sqrt(n) * (0.5 + epsilon)
        sigma = 1.0 if reach < 0.95 else 0.95 / reach
        proto = CutoffProfile(kind, epsilon, n, 1.0, sigma, np.empty(0), h, 1.0, 0.0)
        one_sq = integrate.quad(lambda x: float(proto._profile1d(np.array(x))) ** 2,
                                -sigma * (0.5 + epsilon), sigma * (0.5 + epsilon),
                                epsabs=1e-15, epsrel=1e-14, limit=200)[0]
        amp = one_sq ** (-n / 2.0)
        prof = proto._profile1d(z1)
        samples = amp * prof
        for _ in range(n - 1):
            samples = np.multiply.outer(samples, prof)
        # int |eta| = A (int b)^n and int b = sigma exactly
        l1 = amp * sigma ** n
        return CutoffProfile(kind, epsilon, n, amp, sigma, samples, h, amp * float(proto._profile1d(np.array(0.0))), l1)
    area = 2 * np.pi ** (n / 2.0) / math.gamma(n / 2.0)
    mass2 = area * integrate.quad(lambda r: math.exp(-2.0 / (1.0 - r * r)) * r ** (n - 1), 0, 1,
                                  epsabs=1e-16, epsrel=1e-14)[0]
    l1 = area * integrate.quad(lambda r: math.exp(-1.0 / (1.0 - r * r)) * r ** (n - 1), 0, 1,
                               epsabs=1e-16, epsrel=1e-14)[0]
    amp = mass2 ** -0.5
    proto = CutoffProfile(kind, epsilon, n, amp, 1.0, np.empty(0), h, amp * math.exp(-1.0), amp * l1)
    zz = np.stack(np.meshgrid(*([z1] * n), indexing="ij"), axis=-1)
    return CutoffProfile(kind, epsilon, n, amp, 1.0, proto.value(zz), h, amp * math.exp(-1.0), amp * l1)


def _bracket_roots(func, lo, hi, step):
    grid = np.arange(lo, hi + step, step)
    vals = func(grid)
    roots = []
    for a, b, fa, fb in zip(grid[:-1], grid[1:], vals[:-1], vals[1:]):
        if fa == 0.0:
            roots.append(a)
        elif fa * fb < 0:
            roots.append(optimize.brentq(lambda x: float(func(np.array([x]))[0]), a, b,
                                         xtol=1e-15, rtol=4 * np.finfo(float).eps))
    return roots


def admissible_frequencies(eta: CutoffProfile, alpha, count: int, N_min: float = 0.0,
                           ceiling: float = 4000.0) -> list:
    """Increasing frequencies N >= N_min with eta_hat(alpha sqrt(N)) = 0.

    For the mollified box the transform factorizes, so zeros of each 1-D
    factor are bracketed separately; a zero of factor j gives
    sqrt(N) = omega / |alpha_j|.  Products of several vanishing factors
    (double zeros without a sign change) are therefore found as well.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    alpha = _unit(alpha, eta.n)
    found = []
    if eta.kind == "mollified_box":
        roots = _bracket_roots(eta.factor_transform, 0.05, ceiling, 0.05)
        for j in range(eta.n):
            aj = abs(alpha[j])
            if aj < 1e-14:
                continue
            found.extend((w / aj) ** 2 for w in roots)
    else:
        roots = _bracket_roots(lambda r: eta._radial_transform(r), 0.05, ceiling, 0.05)
        found.extend(w ** 2 for w in roots)
    found = sorted(N for N in found if N >= N_min)
    unique = []
    for N in found:
        if not unique or N - unique[-1] > 1e-9 * N:
            unique.append(N)
    ref = abs(float(eta.fourier(np.zeros(eta.n))))
    good = [N for N in unique if abs(float(eta.fourier(alpha * math.sqrt(N)))) <= 1e-12 * ref]
    if len(good) < count:
        warnings.warn(f"only {len(good)} admissible frequencies found below the ceiling", RuntimeWarning)
    return good[:count]


# --------------------------------------------------------------------------
# probes and boundary data
# --------------------------------------------------------------------------

def _unit(alpha, n):
    a = np.atleast_1d(np.asarray(alpha, dtype=float))
    if a.shape != (n,):
        raise ValueError(f"direction must have {n} components")
    norm = np.linalg.norm(a)
    if abs(norm - 1.0) > 1e-12:
        raise ValueError(f"direction must be a unit vector, |alpha| = {norm!r}")
    return a


@dataclass(frozen=True, eq=False)
class ProbeSpec:
    x0: np.ndarray
    alpha: np.ndarray
    N: float
    mode: str
    depth_k: int
    eta: CutoffProfile

    def __post_init__(self):
        n = self.eta.n
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        if x0.shape != (n,):
            raise ValueError(f"x0 must have {n} components")
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "alpha", _unit(self.alpha, n))
        if self.mode not in ("dirichlet", "neumann"):
            raise ValueError(f"unknown probe mode {self.mode!r}")
        if not (self.N > 0 and math.isfinite(self.N)):
            raise ValueError("N must be positive")
        if int(self.depth_k) != self.depth_k or self.depth_k < 0:
            raise ValueError("depth_k must be a nonnegative integer")

    @property
    def n(self) -> int:
        return self.eta.n


@dataclass(frozen=True, eq=False)
class BoundaryData:
    field: np.ndarray
    support_radius: float
    mean: complex
    kind: str
    grid: TangentialGrid
    l1_norm: float
    N: float = 0.0
    alpha: np.ndarray | None = None
    x0: np.ndarray | None = None

    @property
    def grid_mean(self) -> complex:
        return complex(self.field.sum() * self.grid.cell_volume)

    @property
    def l2_norm_sq(self) -> float:
        return float(np.sum(np.abs(self.field) ** 2) * self.grid.cell_volume)

    @classmethod
    def from_array(cls, field, grid: TangentialGrid, kind: str) -> "BoundaryData":
        """Wrap an arbitrary grid function, e.g. a Fourier mode or a computed flux."""
        f = np.asarray(field, dtype=complex)
        if f.shape != grid.shape:
            raise ValueError("field does not match the grid shape")
        mean = complex(f.sum() * grid.cell_volume)
        l1 = float(np.abs(f).sum() * grid.cell_volume)
        return cls(f, float("inf"), mean, kind, grid, l1)


def _probe_field(spec: ProbeSpec, grid: TangentialGrid):
    if grid.n != spec.n:
        raise ValueError("grid dimension differs from the probe dimension")
    wavelength = 2 * np.pi / spec.N
    if wavelength < 8 * grid.spacing * (1 - 1e-12):
        need = int(math.ceil(8 * 2 * grid.half_width / wavelength))
        raise ResolutionError(
            f"grid spacing {grid.spacing:.3e} gives fewer than 8 points per wavelength at N={spec.N:g}; "
            f"need at least {need} points per axis")
    radius = 1.0 / math.sqrt(spec.N)
    offset = np.abs(spec.x0 - grid.center)
    if np.any(offset + radius > grid.half_width * (1 + 1e-12)):
        raise ResolutionError("probe support leaves the tangential box")
    rt = math.sqrt(spec.N)
    axes = [grid.axis(j) - spec.x0[j] for j in range(spec.n)]
    phase = np.asarray(1.0 + 0j)
    for j, a in enumerate(axes):
        phase = np.multiply.outer(phase, np.exp(1j * spec.N * spec.alpha[j] * a))
    return phase * spec.eta.value_on_axes([rt * a for a in axes]), radius


def _exact_mean(spec: ProbeSpec) -> complex:
    # int e^{i N alpha.x} eta(sqrt(N) x) dx = N^{-n/2} eta_hat(-sqrt(N) alpha), eta even
    return complex(spec.N ** (-spec.n / 2.0) * float(spec.eta.fourier(math.sqrt(spec.N) * spec.alpha)))


def dirichlet_data(spec: ProbeSpec, grid: TangentialGrid, s) -> BoundaryData:
    """phi_N = c_bar e^{i N alpha.(x-x0)} eta(sqrt(N)(x-x0)) on the grid."""
    if spec.mode != "dirichlet":
        raise ValueError("dirichlet_data needs a dirichlet probe")
    c_bar = gamma_constants(s)[2]
    f, radius = _probe_field(spec, grid)
    l1 = c_bar * spec.N ** (-spec.n / 2.0) * spec.eta.l1_norm
    return BoundaryData(c_bar * f, radius, c_bar * _exact_mean(spec), "dirichlet", grid, l1,
                        spec.N, spec.alpha, spec.x0)


def neumann_data(spec: ProbeSpec, grid: TangentialGrid) -> BoundaryData:
    """f_N = e^{i N alpha.(x-x0)} eta(sqrt(N)(x-x0)); N must be admissible."""
    if spec.mode != "neumann":
        raise ValueError("neumann_data needs a neumann probe")
    mean = _exact_mean(spec)
    l1 = spec.N ** (-spec.n / 2.0) * spec.eta.l1_norm
    if abs(mean) > 1e-10 * l1:
        near = admissible_frequencies(spec.eta, spec.alpha, 1, N_min=0.8 * spec.N)
        hint = f"; nearest admissible frequency above 0.8 N is {near[0]:.12g}" if near else ""
        raise NotAdmissibleError(f"N={spec.N:g} is not admissible: |mean|/L1 = {abs(mean) / l1:.3e}{hint}")
    f, radius = _probe_field(spec, grid)
    return BoundaryData(f, radius, mean, "neumann", grid, l1, spec.N, spec.alpha, spec.x0)


# --------------------------------------------------------------------------
# Taylor data
# --------------------------------------------------------------------------

def _multi_indices(n: int, degree: int):
    return [b for d in range(degree + 1) for b in _homogeneous_indices(n, d)]


def _homogeneous_indices(n: int, d: int):
    return [b for b in itertools.product(range(d + 1), repeat=n) if sum(b) == d]


def taylor_coefficients(func: Callable, x0, degree: int, radius: float = 0.05) -> dict:
    """Taylor coefficients d^beta f(x0) / beta! for |beta| <= degree.

    f maps points of shape (..., n) to arrays of shape (..., *value_shape).
    The coefficients come from a tensor Chebyshev interpolant on the box
    x0 + [-radius, radius]^n, which is far better conditioned than nested
    finite differences.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    n = x0.size
    m = degree + 8
    nodes = np.cos(np.pi * (np.arange(m) + 0.5) / m)
    pts = np.stack(np.meshgrid(*([nodes] * n), indexing="ij"), axis=-1)
    vals = np.asarray(func(x0 + radius * pts), dtype=float)
    vshape = vals.shape[n:]
    vinv = np.linalg.inv(np.polynomial.chebyshev.chebvander(nodes, m - 1))
    to_mono = np.zeros((m, m))
    for k in range(m):
        c = np.polynomial.chebyshev.cheb2poly(np.eye(m)[k])
        to_mono[: len(c), k] = c
    op = to_mono @ vinv
    coef = vals
    for ax in range(n):
        coef = np.moveaxis(np.tensordot(op, coef, axes=([1], [ax])), 0, ax)
    out = {}
    for b in _multi_indices(n, degree):
        out[b] = coef[b].reshape(vshape) / radius ** sum(b)
    return out


def _series_mul(a: dict, b: dict, degree: int, n: int, contract: str | None = None) -> dict:
    out = {}
    for ba, va in a.items():
        for bb, vb in b.items():
            beta = tuple(i + j for i, j in zip(ba, bb))
            if sum(beta) > degree:
                continue
            prod = np.einsum(contract, va, vb) if contract else va * vb
            out[beta] = out.get(beta, 0) + prod
    return out


def _series_reciprocal(c: dict, degree: int, n: int) -> dict:
    zero = (0,) * n
    c0 = float(c[zero])
    u = {b: v / c0 for b, v in c.items() if b != zero}
    result = {zero: 1.0}
    term = {zero: 1.0}
    for _ in range(degree):
        term = _series_mul(term, {b: -v for b, v in u.items()}, degree, n)
        for b, v in term.items():
            result[b] = result.get(b, 0) + v
    return {b: v / c0 for b, v in result.items()}


def _series_derivative(a: dict, j: int) -> dict:
    out = {}
    for b, v in a.items():
        if b[j] == 0:
            continue
        nb = list(b)
        nb[j] -= 1
        out[tuple(nb)] = out.get(tuple(nb), 0) + b[j] * v
    return out


def _homogeneous_part(series: dict, d: int, z: np.ndarray, vshape=()):
    """Evaluate the degree-d part of a series on points z of shape (..., n)."""
    out = np.zeros(z.shape[:-1] + tuple(vshape))
    for b, v in series.items():
        if sum(b) != d:
            continue
        mono = np.ones(z.shape[:-1])
        for j, e in enumerate(b):
            if e:
                mono = mono * z[..., j] ** e
        out = out + mono.reshape(mono.shape + (1,) * len(vshape)) * v
    return out


# --------------------------------------------------------------------------
# fields as callables
# --------------------------------------------------------------------------

def _as_gamma(gamma_field, n):
    # a ConductivityField (duck-typed to avoid a circular import)
    if hasattr(gamma_field, "gamma_at"):
        return gamma_field.gamma_at
    if callable(gamma_field):
        return gamma_field
    mat = np.asarray(gamma_field, dtype=float)
    if mat.shape != (n, n):
        raise ValueError("constant gamma must be an n x n matrix")
    return lambda x: np.broadcast_to(mat, np.shape(x)[:-1] + (n, n)).copy()


def _as_c(c_field):
    if hasattr(c_field, "c_at"):
        return c_field.c_at
    if callable(c_field):
        return c_field
    val = float(c_field)
    return lambda x: np.full(np.shape(x)[:-1], val)


def _b_field(gamma, c, n, h=1e-5):
    """b_{jl}(x) = d_j(c gamma_{jl})(x) / c(x) by central differences."""
    def b(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (n, n))
        for j in range(n):
            e = np.zeros(n)
            e[j] = h
            fp = c(x + e)[..., None] * gamma(x + e)[..., j, :]
            fm = c(x - e)[..., None] * gamma(x - e)[..., j, :]
            out[..., j, :] = (fp - fm) / (2 * h)
        return out / c(x)[..., None, None]
    return b


# --------------------------------------------------------------------------
# finite differences on the scaled tangential grid
# --------------------------------------------------------------------------

def _d1(f, axis, h):
    fp1 = np.roll(f, -1, axis)
    fm1 = np.roll(f, 1, axis)
    fp2 = np.roll(f, -2, axis)
    fm2 = np.roll(f, 2, axis)
    return (-fp2 + 8 * fp1 - 8 * fm1 + fm2) / (12 * h)


def _d2(f, axis, h):
    fp1 = np.roll(f, -1, axis)
    fm1 = np.roll(f, 1, axis)
    fp2 = np.roll(f, -2, axis)
    fm2 = np.roll(f, 2, axis)
    return (-fp2 + 16 * fp1 - 30 * f + 16 * fm1 - fm2) / (12 * h * h)


def _dd(f, j, l, h):
    return _d2(f, j, h) if j == l else _d1(_d1(f, j, h), l, h)


# --------------------------------------------------------------------------
# ansatz
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class AnsatzSolution:
    """Approximate extension solution in scaled variables.

    ``factors[(p, l)]`` holds P_{p,l} on the z-grid, ``profiles[l]`` the
    kernel W_l and ``fluxes[l]`` = lim t^{1-2s} (t^s W_l)'.
    """

    spec: ProbeSpec
    s: float
    C0: float
    c0: float
    factors: dict
    profiles: list
    fluxes: list
    normalization: float
    z_axis: np.ndarray
    hz: float
    mask: np.ndarray = field(repr=False)
    taylor: dict = field(repr=False, default_factory=dict)

    @property
    def N(self) -> float:
        return self.spec.N

    @property
    def z_points(self) -> np.ndarray:
        n = self.spec.n
        return np.stack(np.meshgrid(*([self.z_axis] * n), indexing="ij"), axis=-1)

    @property
    def tau(self) -> np.ndarray:
        return self.profiles[0].grid / self.C0

    def normal_factor(self, l: int, tau=None):
        """Phi_l(tau) = (C0 tau)^s W_l(C0 tau) and its tau-derivative on the profile nodes."""
        w = self.profiles[l]
        t = w.grid if tau is None else self.C0 * np.asarray(tau, dtype=float)
        if tau is None:
            vals, wd = w.values, w.weighted_d
        else:
            vals = w.evaluate(t)
            wd = w.panels.interpolate(w.weighted_d, np.clip(t, w.panels.edges[0], w.panels.edges[-1]))
        return t ** self.s * vals, self.C0 * wd

    def combined(self, l: int) -> np.ndarray:
        """sum_p N^{-p/2} P_{p,l}(z) including the normalization."""
        out = 0
        for (p, ll), P in self.factors.items():
            if ll == l:
                out = out + self.N ** (-p / 2.0) * P
        return self.normalization * out

    @property
    def depth(self) -> int:
        return max(p for p, _ in self.factors)

    def trace(self) -> np.ndarray:
        """u_N(z, 0) without the phase factor; Phi_0(0) = c_bar, Phi_l(0) = 0 for l >= 1."""
        c_bar = gamma_constants(self.s)[2]
        return c_bar * self.combined(0)

    def flux(self, c_field) -> np.ndarray:
        """-c(x) lim x_{n+1}^{1-2s} d u_N / d x_{n+1} on the z-grid, phase removed."""
        x = self.spec.x0 + self.z_points / math.sqrt(self.N)
        c = _as_c(c_field)(x)
        total = 0
        for l, F in enumerate(self.fluxes):
            total = total + F * self.combined(l)
        return -c * self.N ** (2 * self.s) * self.C0 ** (2 * self.s) * total

    def values(self, tau) -> np.ndarray:
        """V(z, tau), shape (*z_shape, len(tau)); u_N = e^{i N alpha.(x-x0)} V."""
        tau = np.atleast_1d(np.asarray(tau, dtype=float))
        out = 0
        for l in range(len(self.profiles)):
            phi, _ = self.normal_factor(l, tau)
            out = out + self.combined(l)[..., None] * phi
        return out

    def gradient(self, tau):
        """Gradient of u_N in the original coordinates with the phase removed.

        Returns (tangential, normal): tangential has shape (n, *z_shape, len(tau))
        and equals i N alpha V + sqrt(N) grad_z V; normal is N d_tau V.
        """
        tau = np.atleast_1d(np.asarray(tau, dtype=float))
        n = self.spec.n
        N = self.N
        tang = np.zeros((n,) + self.mask.shape + (tau.size,), dtype=complex)
        normal = np.zeros(self.mask.shape + (tau.size,), dtype=complex)
        for l in range(len(self.profiles)):
            phi, dphi = self.normal_factor(l, tau)
            P = self.combined(l)
            for j in range(n):
                gj = 1j * N * self.spec.alpha[j] * P + math.sqrt(N) * _d1(P, j, self.hz)
                tang[j] += gj[..., None] * phi
            normal += N * P[..., None] * dphi
        return tang, normal


def _tangential_ops(taylor, alpha, n):
    """Return a function applying L_q to a grid function."""
    G, B = taylor["gamma"], taylor["b"]

    def apply(q, P, z, h):
        out = np.zeros_like(P)
        if q >= 0:
            Gq = _homogeneous_part(G, q, z, (n, n))
            out = out - np.einsum("...jl,j,l->...", Gq, alpha, alpha) * P
        if q - 1 >= 0:
            G1 = _homogeneous_part(G, q - 1, z, (n, n))
            for j in range(n):
                coef = np.einsum("...l,l->...", G1[..., j, :], alpha)
                if np.any(coef):
                    out = out + 2j * coef * _d1(P, j, h)
        if q - 2 >= 0:
            G2 = _homogeneous_part(G, q - 2, z, (n, n))
            B2 = _homogeneous_part(B, q - 2, z, (n, n))
            for j in range(n):
                for l in range(n):
                    if np.any(G2[..., j, l]):
                        out = out + G2[..., j, l] * _dd(P, j, l, h)
            out = out + 1j * np.einsum("...jl,l->...", B2, alpha) * P
        if q - 3 >= 0:
            B3 = _homogeneous_part(B, q - 3, z, (n, n))
            for l in range(n):
                coef = B3[..., :, l].sum(axis=-1)
                if np.any(coef):
                    out = out + coef * _d1(P, l, h)
        return out

    return apply


def build_ansatz(spec: ProbeSpec, gamma_field, c_field, s, *, hz: float = 0.02,
                 grid_spec: GridSpec = GridSpec(), taylor_radius: float = 0.05) -> AnsatzSolution:
    """Approximate solution with corrections up to order 2k, k = spec.depth_k."""
    s = _order(s)
    n = spec.n
    k = int(spec.depth_k)
    gamma = _as_gamma(gamma_field, n)
    c = _as_c(c_field)
    smooth = getattr(gamma_field, "smoothness", None)
    if smooth is not None and 2 * k > smooth:
        raise ValueError(f"depth_k={k} needs C^{2 * k} coefficients, field is C^{smooth}")
    g0 = np.asarray(gamma(spec.x0[None, :]))[0]
    c0 = float(np.asarray(c(spec.x0[None, :]))[0])
    if c0 <= 0:
        raise ValueError("c must be positive")
    C0sq = float(spec.alpha @ g0 @ spec.alpha)
    if not C0sq > 0:
        raise ValueError("alpha.gamma(x0).alpha must be positive (gamma not SPD)")
    C0 = math.sqrt(C0sq)
    D = 2 * k

    # Taylor series of gamma, c gamma and c at x0
    gser = taylor_coefficients(gamma, spec.x0, D, taylor_radius)
    cser = taylor_coefficients(lambda x: c(x), spec.x0, D, taylor_radius)
    cgser = _series_mul(cser, gser, D, n)
    inv_c = _series_reciprocal(cser, D, n)
    bser = {}
    for j in range(n):
        dj = _series_derivative({b: v[j, :] for b, v in cgser.items()}, j)
        part = _series_mul(inv_c, dj, max(D - 1, 0), n)
        for b, v in part.items():
            row = np.zeros((n, n))
            row[j, :] = v
            bser[b] = bser.get(b, 0) + row
    ratio = {b: c0 * v for b, v in inv_c.items()}  # Taylor series of c0 / c(x)
    taylor = {"gamma": gser, "b": bser, "c_ratio": ratio}

    R = 1.0 + 5 * hz
    half = int(math.ceil(R / hz))
    z_axis = hz * np.arange(-half, half + 1)
    zz = np.stack(np.meshgrid(*([z_axis] * n), indexing="ij"), axis=-1)
    mask = np.sum(zz * zz, axis=-1) < 1.0
    apply = _tangential_ops(taylor, spec.alpha, n)

    # normal profiles W_0 .. W_D and their flux limits
    profiles = [bessel_k_profile(s, grid_spec)]
    for _ in range(D):
        profiles.append(solve_inhomogeneous(s, profiles[-1]))
    fluxes = [weighted_flux_limit(w, s) for w in profiles]

    eta = spec.eta.value(zz) * mask
    P = {(0, 0): eta.astype(complex)}
    neumann = spec.mode == "neumann"
    for p in range(1, D + 1):
        for l in range(p):
            acc = 0
            for q in range(1, p + 1):
                if (p - q, l) in P:
                    acc = acc + apply(q, P[(p - q, l)], zz, hz)
            P[(p, l + 1)] = (-acc / C0sq) * mask
        if neumann:
            target = _homogeneous_part(ratio, p, zz) * eta
            rest = sum(P[(p, l)] * fluxes[l] for l in range(1, p + 1))
            P[(p, 0)] = (target - rest / fluxes[0]) * mask
    for key in list(P):
        if not np.any(P[key]):
            P[key] = np.zeros_like(P[(0, 0)])
    if neumann:
        c_hat = gamma_constants(s)[1]
        norm = 1.0 / (c_hat * c0 * spec.N ** (2 * s) * C0 ** (2 * s))
    else:
        norm = 1.0
    return AnsatzSolution(spec, s, C0, c0, P, profiles, fluxes, norm, z_axis, hz, mask, taylor)


def ansatz_residual(ansatz: AnsatzSolution, gamma_field, c_field, t_max: float = 30.0,
                    chunk: int = 64) -> float:
    """sup |div(x_{n+1}^{1-2s} gamma_tilde grad u_N)| / (e^{i N alpha.x} tau^{1-2s}), tau = N x_{n+1}.

    Tangential derivatives use the same fourth-order stencils as the
    hierarchy with the exact coefficients gamma(x0 + z/sqrt(N)); the normal
    operator is applied through the Bessel ODE identity
    (d^2 + (1-2s)/tau d - C0^2) Phi_l = C0^2 Phi_{l-1}.
    """
    spec = ansatz.spec
    n = spec.n
    N = ansatz.N
    s = ansatz.s
    gamma = _as_gamma(gamma_field, n)
    c = _as_c(c_field)
    b = _b_field(gamma, c, n)
    zz = ansatz.z_points
    x = spec.x0 + zz / math.sqrt(N)
    G = gamma(x)
    Bx = b(x)
    cx = c(x)
    a = spec.alpha
    h = ansatz.hz
    sq = math.sqrt(N)

    def T(P):
        out = -N * N * np.einsum("...jl,j,l->...", G, a, a) * P
        for j in range(n):
            dj = _d1(P, j, h)
            out = out + 2j * N * sq * np.einsum("...l,l->...", G[..., j, :], a) * dj
            out = out + sq * Bx[..., :, j].sum(axis=-1) * dj
            for l in range(n):
                out = out + N * G[..., j, l] * _dd(P, j, l, h)
        out = out + 1j * N * np.einsum("...jl,l->...", Bx, a) * P
        return out

    L = len(ansatz.profiles)
    comb = [ansatz.combined(l) for l in range(L)]
    # (d^2 + (1-2s)/tau d) Phi_m = C0^2 (Phi_m + Phi_{m-1}), so the
    # coefficient of Phi_m is T P_m + N^2 C0^2 (P_m + P_{m+1})
    coef = []
    for m in range(L):
        cm = T(comb[m]) + N * N * ansatz.C0 ** 2 * comb[m]
        if m + 1 < L:
            cm = cm + N * N * ansatz.C0 ** 2 * comb[m + 1]
        coef.append((cx * cm * ansatz.mask).reshape(-1))
    coef = np.stack(coef, axis=1)
    t = ansatz.profiles[0].grid
    sel = t <= t_max
    phis = np.stack([ansatz.normal_factor(l)[0][sel] for l in range(L)], axis=0)
    best = 0.0
    for start in range(0, phis.shape[1], chunk):
        block = coef @ phis[:, start:start + chunk]
        best = max(best, float(np.max(np.abs(block))))
    return N ** (2 * s - 1) * best


def energy_decomposition(ansatz: AnsatzSolution, gamma_field, c_field, t_max: float = 40.0):
    """Scaled tangential and normal energies N^{-2s+n/2} int x^{1-2s} c (...) of u_N.

    For the leading term these tend to c1 c(x0) C0^{2s} and c2 c(x0) C0^{2s}.
    """
    spec = ansatz.spec
    n = spec.n
    N = ansatz.N
    s = ansatz.s
    gamma = _as_gamma(gamma_field, n)
    c = _as_c(c_field)
    x = spec.x0 + ansatz.z_points / math.sqrt(N)
    G = gamma(x)
    cx = c(x)
    w0 = ansatz.profiles[0]
    sel = w0.grid <= t_max
    tau = ansatz.tau[sel]
    wts = w0.panels.weights[sel] / ansatz.C0
    dz = ansatz.hz ** n
    tang_e = 0.0
    norm_e = 0.0
    L = len(ansatz.profiles)
    comb = [ansatz.combined(l) for l in range(L)]
    phis = [ansatz.normal_factor(l) for l in range(L)]
    weight = tau ** (1 - 2 * s) * wts
    for i in range(tau.size):
        V = sum(comb[l] * phis[l][0][sel][i] for l in range(L))
        dV = sum(comb[l] * phis[l][1][sel][i] for l in range(L))
        grad = np.stack([1j * spec.alpha[j] * V + _d1(V, j, ansatz.hz) / math.sqrt(N) for j in range(n)], -1)
        q = np.real(np.einsum("...j,...jl,...l->...", np.conj(grad), G, grad))
        tang_e += weight[i] * float(np.sum(cx * q)) * dz
        norm_e += weight[i] * float(np.sum(cx * np.abs(dV) ** 2)) * dz
    return tang_e, norm_e
