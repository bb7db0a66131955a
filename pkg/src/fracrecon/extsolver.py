"""Forward solver for the weighted extension problem

    div( z^{1-2s} c(x) diag(gamma(x), 1) grad u ) = 0   in R^n x (0, L_z),

with Dirichlet data u(x, 0) = phi or weighted Neumann data
-c(x) lim z^{1-2s} d_z u = f, plus the energy pairings.

Discretization: Fourier pseudo-spectral in x on a box (periodic, or odd
reflection for homogeneous lateral Dirichlet walls), piecewise linear
elements in z on a graded mesh with the weight z^{1-2s} integrated exactly
per cell.  The resulting Hermitian positive (semi)definite system is solved
by preconditioned conjugate gradients; the preconditioner is the
constant-coefficient operator, diagonal in the tangential modes and
tridiagonal in z.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
import warnings
from dataclasses import dataclass, field as dc_field
from typing import Callable

import numpy as np
from scipy import fft as sfft

from .ansatz import BoundaryData, TangentialGrid
from .specfun import _order, eval_K, gamma_constants

__all__ = [
    "ConductivityField",
    "ResolutionSpec",
    "WeightedGrid",
    "ExtensionSolution",
    "ReferenceSolution",
    "SolverError",
    "CompatibilityError",
    "MemoryCapError",
    "set_threads",
    "get_threads",
    "field_from_spec",
    "build_domain",
    "solve_dirichlet",
    "solve_neumann",
    "dtn_pairing",
    "ntd_pairing",
    "fourier_reference",
    "discrete_energy",
    "write_snapshot",
    "read_snapshot",
]

_THREADS = max(1, int(os.environ.get("FRACRECON_THREADS", "1") or 1))


def set_threads(k: int) -> None:
    """Worker count for the tangential FFTs."""
    global _THREADS
    _THREADS = max(1, int(k))


def get_threads() -> int:
    return _THREADS


class SolverError(RuntimeError):
    """Iterative solve did not reach the tolerance."""

    def __init__(self, message: str, history=()):
        super().__init__(message)
        self.history = list(history)


class CompatibilityError(ValueError):
    """Neumann data with nonzero mean."""


class MemoryCapError(ValueError):
    def __init__(self, message: str, suggestion: dict):
        super().__init__(message)
        self.suggestion = suggestion


# --------------------------------------------------------------------------
# conductivity fields
# --------------------------------------------------------------------------

def _bump(y):
    r2 = np.sum(y * y, axis=-1)
    inside = r2 < 1.0
    out = np.zeros(r2.shape)
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - r2[inside]))
    return out


@dataclass(frozen=True, eq=False)
class ConductivityField:
    """c(x) diag(gamma(x), 1) with vectorized callables.

    ``gamma`` maps points of shape (..., n) to (..., n, n), ``c`` to (...).
    Ellipticity bounds are estimated by sampling ``sample_box``.
    """

    n: int
    gamma: Callable
    c: Callable
    spec: dict | None = None
    smoothness: int = 1000
    constant: bool = False
    sample_box: float = 2.0
    C1: float = dc_field(init=False)
    C2: float = dc_field(init=False)
    c_min: float = dc_field(init=False)
    c_max: float = dc_field(init=False)

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("dimension must be at least 1")
        ax = np.linspace(-self.sample_box, self.sample_box, 21 if self.n <= 2 else 9)
        pts = np.stack(np.meshgrid(*([ax] * self.n), indexing="ij"), axis=-1).reshape(-1, self.n)
        g = self.gamma_at(pts)
        if np.max(np.abs(g - np.swapaxes(g, -1, -2))) > 1e-12:
            raise ValueError("gamma is not symmetric at sampled points")
        ev = np.linalg.eigvalsh(g)
        cv = self.c_at(pts)
        if ev.min() <= 0:
            raise ValueError("gamma is not positive definite at sampled points")
        if cv.min() <= 0:
            raise ValueError("c must be positive")
        object.__setattr__(self, "C1", float(ev.min()))
        object.__setattr__(self, "C2", float(ev.max()))
        object.__setattr__(self, "c_min", float(cv.min()))
        object.__setattr__(self, "c_max", float(cv.max()))

    def gamma_at(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.asarray(self.gamma(x), dtype=float).reshape(x.shape[:-1] + (self.n, self.n))

    def c_at(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.asarray(self.c(x), dtype=float), x.shape[:-1]).copy()

    def check(self, points) -> None:
        """Spot check symmetry and the bounds at extra points."""
        g = self.gamma_at(points)
        if np.max(np.abs(g - np.swapaxes(g, -1, -2))) > 1e-12:
            raise ValueError("gamma is not symmetric")
        ev = np.linalg.eigvalsh(g)
        if ev.min() < self.C1 * (1 - 1e-9) or ev.max() > self.C2 * (1 + 1e-9):
            raise ValueError("gamma leaves the sampled ellipticity bounds")

    def digest(self) -> str:
        """sha256 of the defining spec, or of sampled values for ad hoc fields."""
        if self.spec is not None:
            blob = json.dumps(self.spec, sort_keys=True).encode()
        else:
            ax = np.linspace(-1.0, 1.0, 7)
            pts = np.stack(np.meshgrid(*([ax] * self.n), indexing="ij"), axis=-1)
            blob = np.round(self.gamma_at(pts), 12).tobytes() + np.round(self.c_at(pts), 12).tobytes()
        return hashlib.sha256(blob).hexdigest()

    @classmethod
    def constant_field(cls, gamma0, c0: float = 1.0) -> "ConductivityField":
        g = np.atleast_2d(np.asarray(gamma0, dtype=float))
        spec = {"family": "constant", "gamma": g.tolist(), "c": float(c0)}
        return field_from_spec(spec)


def _matrix(v, n, name):
    a = np.asarray(v, dtype=float)
    if a.shape != (n, n):
        raise ValueError(f"{name} must be a {n}x{n} matrix")
    return a


def _scalar_or_bump(spec, n):
    """c given as a number or as {base, amplitude, width, center}."""
    if isinstance(spec, (int, float)):
        v = float(spec)
        return (lambda x: np.full(np.shape(x)[:-1], v)), True
    allowed = {"base", "amplitude", "width", "center"}
    extra = set(spec) - allowed
    if extra:
        raise ValueError(f"unknown keys in c spec: {sorted(extra)}")
    base = float(spec.get("base", 1.0))
    amp = float(spec.get("amplitude", 0.0))
    width = float(spec.get("width", 1.0))
    center = np.asarray(spec.get("center", [0.0] * n), dtype=float)
    return (lambda x: base + amp * _bump((np.asarray(x) - center) / width)), amp == 0.0


def field_from_spec(spec: dict) -> ConductivityField:
    """Build a field from a JSON-style description.

    families:
      constant  {"gamma": [[..]], "c": 1.0}
      bump      {"base": [[..]], "amplitude": a, "matrix": [[..]], "width": w,
                 "center": [..], "c": number or bump dict}
                gamma = base + a bump((x - center)/w) matrix,
                bump(y) = exp(1 - 1/(1 - |y|^2)) for |y| < 1
      metric    {"g": [[..]]} or {"base", "amplitude", "matrix", "width", "center"}
                describing g; gamma = g^{-1}, c = sqrt(det g)
    """
    spec = json.loads(json.dumps(spec))
    fam = spec.get("family")
    if fam == "constant":
        allowed = {"family", "gamma", "c", "n"}
        _reject(spec, allowed)
        g = np.atleast_2d(np.asarray(spec["gamma"], dtype=float))
        n = g.shape[0]
        g = _matrix(g, n, "gamma")
        c, _ = _scalar_or_bump(spec.get("c", 1.0), n)
        c0 = float(spec.get("c", 1.0)) if isinstance(spec.get("c", 1.0), (int, float)) else None
        return ConductivityField(
            n, lambda x: np.broadcast_to(g, np.shape(x)[:-1] + (n, n)), c, spec,
            constant=c0 is not None)
    if fam == "bump":
        allowed = {"family", "base", "amplitude", "matrix", "width", "center", "c", "n"}
        _reject(spec, allowed)
        base = np.atleast_2d(np.asarray(spec["base"], dtype=float))
        n = base.shape[0]
        mat = _matrix(spec.get("matrix", np.eye(n).tolist()), n, "matrix")
        amp = float(spec.get("amplitude", 0.0))
        width = float(spec.get("width", 1.0))
        if width <= 0:
            raise ValueError("bump width must be positive")
        center = np.asarray(spec.get("center", [0.0] * n), dtype=float)
        c, c_const = _scalar_or_bump(spec.get("c", 1.0), n)

        def gamma(x, base=base, mat=mat, amp=amp, width=width, center=center):
            b = _bump((np.asarray(x) - center) / width)
            return base + amp * b[..., None, None] * mat

        return ConductivityField(n, gamma, c, spec, constant=(amp == 0.0 and c_const))
    if fam == "metric":
        allowed = {"family", "g", "base", "amplitude", "matrix", "width", "center", "n"}
        _reject(spec, allowed)
        if "g" in spec:
            g0 = np.atleast_2d(np.asarray(spec["g"], dtype=float))
            n = g0.shape[0]
            gi = np.linalg.inv(g0)
            cval = math.sqrt(np.linalg.det(g0))
            return ConductivityField(
                n, lambda x: np.broadcast_to(gi, np.shape(x)[:-1] + (n, n)),
                lambda x: np.full(np.shape(x)[:-1], cval), spec, constant=True)
        base = np.atleast_2d(np.asarray(spec["base"], dtype=float))
        n = base.shape[0]
        mat = _matrix(spec.get("matrix", np.eye(n).tolist()), n, "matrix")
        amp = float(spec.get("amplitude", 0.0))
        width = float(spec.get("width", 1.0))
        center = np.asarray(spec.get("center", [0.0] * n), dtype=float)

        def metric(x):
            b = _bump((np.asarray(x) - center) / width)
            return base + amp * b[..., None, None] * mat

        return ConductivityField(n, lambda x: np.linalg.inv(metric(x)),
                                 lambda x: np.sqrt(np.linalg.det(metric(x))), spec,
                                 constant=(amp == 0.0))
    raise ValueError(f"unknown field family {fam!r}")


def _reject(spec, allowed):
    extra = set(spec) - allowed
    if extra:
        raise ValueError(f"unknown keys in field spec: {sorted(extra)}")


# --------------------------------------------------------------------------
# grids
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ResolutionSpec:
    """Resolution rule for build_domain.

    The box half-width is ``box_factor / sqrt(N_min)`` (the probe support has
    radius 1/sqrt(N)); the tangential wavenumbers reach N_max +
    spectral_width sqrt(N_max).  In z the mesh is geometric (first node
    ``near_field^{1/(2s)} / Q_max``, then ratio ``ratio``) or a power
    grading z_j = (j/M)^beta L_z.
    """

    box_factor: float = 3.0
    spectral_width: float = 24.0
    grading: str = "geometric"
    ratio: float = 1.1
    near_field: float = 1e-5
    beta: float = 2.0
    normal_nodes: int = 96
    depth_factor: float = 16.0
    lateral: str = "periodic"
    memory_cap: float = 2.0e9

    def __post_init__(self):
        if self.grading not in ("geometric", "power"):
            raise ValueError("grading must be 'geometric' or 'power'")
        if self.lateral not in ("periodic", "dirichlet_zero"):
            raise ValueError("lateral must be 'periodic' or 'dirichlet_zero'")
        if self.ratio <= 1.0 or self.beta < 1.0 or self.box_factor < 1.0:
            raise ValueError("invalid grading parameters")
        if self.spectral_width < 0 or self.depth_factor <= 0:
            raise ValueError("invalid resolution parameters")


@dataclass(frozen=True, eq=False)
class WeightedGrid:
    tangential: TangentialGrid
    z: np.ndarray
    s: float
    lateral: str = "periodic"
    grading: str = "geometric"
    beta: float = 0.0

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float)
        if z[0] != 0.0 or np.any(np.diff(z) <= 0) or len(z) < 4:
            raise ValueError("z nodes must start at 0 and increase strictly")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "s", _order(self.s))

    @property
    def L_x(self) -> float:
        return self.tangential.half_width

    @property
    def L_z(self) -> float:
        return float(self.z[-1])

    @property
    def normal_nodes(self) -> int:
        return len(self.z)

    def weight_integrals(self) -> np.ndarray:
        """int_{z_j}^{z_{j+1}} z^{1-2s} dz per cell."""
        e = 2.0 - 2.0 * self.s
        return (self.z[1:] ** e - self.z[:-1] ** e) / e

    def unknowns(self) -> int:
        return len(self.z) * self.tangential.points ** self.tangential.n

    def describe(self) -> dict:
        d = self.tangential.describe()
        d.update({"normal_nodes": int(len(self.z)), "L_z": self.L_z, "z1": float(self.z[1]),
                  "s": self.s, "lateral": self.lateral, "grading": self.grading})
        if self.grading == "power":
            d["beta"] = self.beta
        return d


def _odd_smooth(m: int) -> int:
    """Smallest odd 3-5-7-smooth integer >= m (odd sizes have no Nyquist mode)."""
    m = max(int(m), 3)
    if m % 2 == 0:
        m += 1
    while True:
        k = m
        for p in (3, 5, 7):
            while k % p == 0:
                k //= p
        if k == 1:
            return m
        m += 2


def _normal_nodes(res: ResolutionSpec, s: float, L_z: float, Q_max: float):
    if res.grading == "power":
        M = max(res.normal_nodes, 48) - 1
        return L_z * (np.arange(M + 1) / M) ** res.beta
    z1 = res.near_field ** (1.0 / (2.0 * s)) / Q_max
    count = int(math.ceil(math.log(L_z / z1) / math.log(res.ratio)))
    if count + 2 < 48:
        # keep at least 48 nodes by shrinking the ratio
        ratio = (L_z / z1) ** (1.0 / 46)
        count = 46
    else:
        ratio = res.ratio
    z = z1 * ratio ** np.arange(count + 1)
    z = z[z < L_z * (1 - 1e-9)]
    return np.concatenate([[0.0], z, [L_z]])


def build_domain(field: ConductivityField, probe_N_max: float, resolution: ResolutionSpec = ResolutionSpec(),
                 *, s=0.5, center=None, probe_N_min: float | None = None) -> WeightedGrid:
    """Grid resolving probes with frequencies in [probe_N_min, probe_N_max]."""
    s = _order(s)
    n = field.n
    N_max = float(probe_N_max)
    N_min = float(probe_N_min) if probe_N_min is not None else N_max
    if not (0 < N_min <= N_max):
        raise ValueError("need 0 < N_min <= N_max")
    center = np.zeros(n) if center is None else np.asarray(center, dtype=float)
    half = resolution.box_factor / math.sqrt(N_min)
    k_max = N_max + resolution.spectral_width * math.sqrt(N_max)
    # Nyquist wavenumber pi m / (2 half) >= k_max and >= 8 points per wavelength
    m = max(2.0 * half * k_max / math.pi, 8.0 * 2.0 * half * N_max / (2 * math.pi))
    m = _odd_smooth(math.ceil(m))
    tg = TangentialGrid(n, center, half, m)
    xi_min = math.pi / half
    L_z = resolution.depth_factor / (math.sqrt(field.C1) * xi_min)
    L_z = max(L_z, 4.0 / (math.sqrt(field.C1) * N_min))
    Q_max = math.sqrt(field.C2 * n) * math.pi * m / (2 * half)
    z = _normal_nodes(resolution, s, L_z, Q_max)
    grid = WeightedGrid(tg, z, s, resolution.lateral, resolution.grading,
                        resolution.beta if resolution.grading == "power" else 0.0)
    factor = 2 ** n if resolution.lateral == "dirichlet_zero" else 1
    est = 16.0 * grid.unknowns() * (12 + 2 * n) * factor
    if est > resolution.memory_cap:
        shrink = (resolution.memory_cap / est) ** (1.0 / n)
        suggestion = {"spectral_width": max(resolution.spectral_width * shrink, 4.0),
                      "ratio": min(resolution.ratio ** (1 / shrink), 1.5)}
        raise MemoryCapError(
            f"estimated memory {est / 1e9:.2f} GB exceeds the cap {resolution.memory_cap / 1e9:.2f} GB",
            suggestion)
    return grid


# --------------------------------------------------------------------------
# one-dimensional weighted elements
# --------------------------------------------------------------------------

def _normal_matrices(z: np.ndarray, s: float):
    """Tridiagonal weighted mass and stiffness matrices for P1 elements.

    Returns (mass_diag, mass_off, stiff_diag, stiff_off).  Cell integrals of
    z^{p+k}, p = 1-2s, are exact.
    """
    p = 1.0 - 2.0 * s
    a, b = z[:-1], z[1:]
    h = b - a
    m = [(b ** (p + k + 1) - a ** (p + k + 1)) / (p + k + 1) for k in range(3)]
    # centered moments avoid cancellation in the mass entries
    # int w (b-z)^2, int w (z-a)^2, int w (b-z)(z-a)
    mbb = m[2] - 2 * b * m[1] + b * b * m[0]
    maa = m[2] - 2 * a * m[1] + a * a * m[0]
    mab = -m[2] + (a + b) * m[1] - a * b * m[0]
    # recompute the mass moments by a shifted expansion where cancellation is severe
    bad = h < 1e-3 * b
    if np.any(bad):
        mbb[bad], maa[bad], mab[bad] = _local_moments(a[bad], b[bad], p)
    Mloc_aa = mbb / h ** 2   # basis (b-z)/h squared
    Mloc_bb = maa / h ** 2
    Mloc_ab = mab / h ** 2
    K = m[0] / h ** 2
    nn = len(z)
    Md = np.zeros(nn)
    Kd = np.zeros(nn)
    Md[:-1] += Mloc_aa
    Md[1:] += Mloc_bb
    Kd[:-1] += K
    Kd[1:] += K
    return Md, Mloc_ab, Kd, -K


def _local_moments(a, b, p):
    """Weighted moments by 8-point Gauss-Legendre on thin cells (weight smooth there)."""
    x, w = np.polynomial.legendre.leggauss(8)
    h = b - a
    zq = 0.5 * (a + b)[:, None] + 0.5 * h[:, None] * x[None, :]
    wq = 0.5 * h[:, None] * w[None, :] * zq ** p
    lb = (b[:, None] - zq)
    la = (zq - a[:, None])
    return (wq * lb * lb).sum(1), (wq * la * la).sum(1), (wq * lb * la).sum(1)


def _tridiag_apply(d, o, U):
    """(T U)_j = d_j U_j + o_{j-1} U_{j-1} + o_j U_{j+1} along axis 0."""
    shp = (-1,) + (1,) * (U.ndim - 1)
    out = d.reshape(shp) * U
    out[1:] += o.reshape(shp) * U[:-1]
    out[:-1] += o.reshape(shp) * U[1:]
    return out


class _Thomas:
    """LDL^T of a batch of real symmetric tridiagonal matrices (L, P)."""

    def __init__(self, d, o):
        L = d.shape[0]
        self.piv = np.empty_like(d)
        self.mult = np.empty_like(d)
        self.o = o
        self.piv[0] = d[0]
        self.mult[0] = 0.0
        for i in range(1, L):
            w = o[i - 1] / self.piv[i - 1]
            self.mult[i] = w
            self.piv[i] = d[i] - w * o[i - 1]

    def solve(self, b):
        L = b.shape[0]
        y = np.empty_like(b)
        y[0] = b[0]
        for i in range(1, L):
            y[i] = b[i] - self.mult[i] * y[i - 1]
        x = np.empty_like(b)
        x[L - 1] = y[L - 1] / self.piv[L - 1]
        for i in range(L - 2, -1, -1):
            x[i] = (y[i] - self.o[i] * x[i + 1]) / self.piv[i]
        return x


# --------------------------------------------------------------------------
# operator
# --------------------------------------------------------------------------

class _Operator:
    """Discrete form sum_jk M_jk <grad U_j, c gamma grad U_k> + K_jk <U_j, c U_k>.

    Arrays carry all z-layers on axis 0; products are plain sums, the inner
    product multiplies by the cell volume.
    """

    def __init__(self, field: ConductivityField, grid: WeightedGrid):
        if field.n != grid.tangential.n:
            raise ValueError("field and grid dimensions differ")
        self.field = field
        self.grid = grid
        tg = grid.tangential
        self.n = tg.n
        self.shape = tg.shape
        self.axes = tuple(range(1, self.n + 1))
        self.lateral = grid.lateral
        self.Md, self.Mo, self.Kd, self.Ko = _normal_matrices(grid.z, grid.s)
        x = tg.coordinates()
        cval = field.c_at(x)
        G = field.gamma_at(x) * cval[..., None, None]
        self.c = cval
        self.constant = bool(field.constant)
        self.G_ref = G.reshape(-1, self.n, self.n).mean(0)
        self.c_ref = float(cval.mean())
        m = tg.points
        h = tg.spacing
        if self.lateral == "periodic":
            k1 = 2.0 * np.pi * np.fft.fftfreq(m, d=h)
            self.k = [k1.reshape([-1 if i == j else 1 for i in range(self.n)]) for j in range(self.n)]
            self.G = G
            self.wall = None
        else:
            # odd reflection across x_j = center_j +- half: period 4 half, 2m points
            k1 = 2.0 * np.pi * np.fft.fftfreq(2 * m, d=h)
            self.k = [k1.reshape([-1 if i == j else 1 for i in range(self.n)]) for j in range(self.n)]
            self.G = self._extended_coefficients(field, tg)
            wall = np.zeros(self.shape, dtype=bool)
            for j in range(self.n):
                idx = [slice(None)] * self.n
                idx[j] = 0
                wall[tuple(idx)] = True
            self.wall = wall
        self.symbol = None
        if self.constant and self.lateral == "periodic":
            Gc = self.G_ref
            self.symbol = sum(Gc[j, l] * self.k[j] * self.k[l] for j in range(self.n) for l in range(self.n))

    def _extended_coefficients(self, field, tg):
        m, h, n = tg.points, tg.spacing, tg.n
        i = np.arange(2 * m)
        folded = i > m
        idx = np.where(folded, 2 * m - i, i)
        axes = [tg.axis(j)[0] + h * idx for j in range(n)]
        x = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        G = field.gamma_at(x) * field.c_at(x)[..., None, None]
        for a in range(n):
            shp = [1] * n
            shp[a] = -1
            sign = np.where(folded, -1.0, 1.0).reshape(shp)
            on_wall = ((i == 0) | (i == m)).reshape(shp)
            for j in range(n):
                for l in range(n):
                    if (j == a) != (l == a):
                        G[..., j, l] = np.where(on_wall, 0.0, G[..., j, l] * sign)
        return G

    # odd extension helpers (lateral walls)
    def _extend(self, U):
        V = U
        for ax in self.axes:
            m = V.shape[ax]
            first = np.take(V, range(m), axis=ax)
            zero = np.zeros_like(np.take(V, [0], axis=ax))
            refl = -np.flip(np.take(V, range(1, m), axis=ax), axis=ax)
            V = np.concatenate([first, zero, refl], axis=ax)
        return V

    def _restrict(self, V):
        m = self.shape[0]
        idx = (slice(None),) + (slice(0, m),) * self.n
        out = V[idx].copy()
        out[:, self.wall] = 0.0
        return out

    def tangential(self, U):
        """A_x U = -div(c gamma grad U) layer by layer."""
        w = _THREADS
        if self.lateral != "periodic":
            V = self._extend(U)
            return self._restrict(self._tangential_periodic(V, w))
        return self._tangential_periodic(U, w)

    def _tangential_periodic(self, U, w):
        Uh = sfft.fftn(U, axes=self.axes, workers=w)
        if self.symbol is not None:
            return sfft.ifftn(Uh * self.symbol, axes=self.axes, workers=w)
        grads = [sfft.ifftn(1j * self.k[l] * Uh, axes=self.axes, workers=w) for l in range(self.n)]
        out = 0
        for j in range(self.n):
            Fj = sum(self.G[..., j, l] * grads[l] for l in range(self.n))
            out = out - 1j * self.k[j] * sfft.fftn(Fj, axes=self.axes, workers=w)
        return sfft.ifftn(out, axes=self.axes, workers=w)

    def apply_full(self, U):
        """Full operator on all layers 0..M."""
        AxU = self.tangential(U)
        cU = self.c * U
        if self.wall is not None:
            cU[:, self.wall] = 0.0
        return _tridiag_apply(self.Md, self.Mo, AxU) + _tridiag_apply(self.Kd, self.Ko, cU)

    def energy(self, U) -> float:
        return float(np.real(np.vdot(U, self.apply_full(U)))) * self.grid.tangential.cell_volume


class _Preconditioner:
    """Inverse of the constant-coefficient operator on the free layers."""

    def __init__(self, op: _Operator, rows: slice, singular_zero_mode: bool):
        self.op = op
        self.rows = rows
        Md, Mo, Kd, Ko = op.Md[rows], op.Mo, op.Kd[rows], op.Ko
        start = rows.start or 0
        stop = rows.stop if rows.stop is not None else len(op.Md)
        Mo = Mo[start:stop - 1]
        Ko = Ko[start:stop - 1]
        n = op.n
        m = op.shape[0]
        h = op.grid.tangential.spacing
        G = op.G_ref
        if op.lateral == "periodic":
            k1 = 2.0 * np.pi * np.fft.fftfreq(m, d=h)
            ks = np.meshgrid(*([k1] * n), indexing="ij")
            Q2 = sum(G[j, l] * ks[j] * ks[l] for j in range(n) for l in range(n)).reshape(-1)
            self.mode_shape = (m,) * n
        else:
            # sine modes on interior points, diagonal part of G
            k1 = np.pi * np.arange(1, m) / (m * h)
            ks = np.meshgrid(*([k1] * n), indexing="ij")
            Q2 = sum(G[j, j] * ks[j] ** 2 for j in range(n)).reshape(-1)
            self.mode_shape = (m - 1,) * n
        if singular_zero_mode:
            pos = Q2[Q2 > 1e-14]
            Q2 = np.where(Q2 > 1e-14, Q2, pos.min() if pos.size else 1.0)
        cref = op.c_ref
        d = Md[:, None] * Q2[None, :] + cref * Kd[:, None]
        o = Mo[:, None] * Q2[None, :] + cref * Ko[:, None]
        self.solver = _Thomas(d, o)

    def __call__(self, R):
        op = self.op
        L = R.shape[0]
        w = _THREADS
        if op.lateral == "periodic":
            Rh = sfft.fftn(R, axes=op.axes, workers=w).reshape(L, -1)
            X = self.solver.solve(Rh).reshape((L,) + self.mode_shape)
            return sfft.ifftn(X, axes=op.axes, workers=w)
        inner = (slice(None),) + (slice(1, None),) * op.n
        Ri = R[inner]
        Rh = sfft.dstn(Ri, type=1, axes=op.axes, norm="ortho", workers=w).reshape(L, -1)
        X = self.solver.solve(Rh).reshape((L,) + self.mode_shape)
        out = np.zeros_like(R)
        out[inner] = sfft.idstn(X, type=1, axes=op.axes, norm="ortho", workers=w)
        return out


def _pcg(apply, precond, b, tol, maxiter, project=None):
    """Preconditioned CG; converged when both the Euclidean and the
    preconditioned residual norms drop below tol relative to the data."""
    x = np.zeros_like(b)
    r = b.copy()
    z = precond(r)
    if project is not None:
        z = project(z)
    p = z.copy()
    rz = np.vdot(r, z).real
    b2 = np.linalg.norm(b)
    bz = math.sqrt(max(rz, 0.0))
    history = []
    if b2 == 0.0:
        return x, 0, 0.0, history
    for it in range(1, maxiter + 1):
        Ap = apply(p)
        pAp = np.vdot(p, Ap).real
        if pAp <= 0:
            raise SolverError("operator is not positive definite along the search direction", history)
        a = rz / pAp
        x += a * p
        r -= a * Ap
        z = precond(r)
        if project is not None:
            z = project(z)
        rz_new = np.vdot(r, z).real
        res = max(np.linalg.norm(r) / b2, math.sqrt(max(rz_new, 0.0)) / bz)
        history.append(res)
        if res <= tol:
            return x, it, res, history
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverError(f"PCG did not converge in {maxiter} iterations (residual {history[-1]:.3e})", history)


# --------------------------------------------------------------------------
# solutions
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ExtensionSolution:
    """Nodal values on all z-layers (axis 0), energy and boundary flux.

    ``flux`` is the discrete (variational) conormal flux -c lim z^{1-2s} d_z u,
    ``flux_extrapolated`` the same quantity from the three smallest layers.
    """

    values: np.ndarray
    grid: WeightedGrid
    kind: str
    energy: float
    flux: np.ndarray
    flux_extrapolated: np.ndarray
    iterations: int
    residual: float
    residual_history: tuple
    field_hash: str

    @property
    def trace(self) -> np.ndarray:
        return self.values[0]

    @property
    def z(self) -> np.ndarray:
        return self.grid.z


def _extrapolated_flux(U, z, s, c):
    """-c lim z^{1-2s} d_z u from three small cells.

    Each cell gives q_j = (u_{j+1} - u_j) / int_{z_j}^{z_{j+1}} z^{2s-1} dz,
    exact for a + b z^{2s}; the next correction is O(z^{2-2s}), removed by a
    least-squares fit.  Cell 0 is skipped: a linear element cannot follow
    z^{2s} there and its far node is polluted.
    """
    e = 2.0 * s
    cells = (1, 2, 3)
    q = [(U[j + 1] - U[j]) * e / (z[j + 1] ** e - z[j] ** e) for j in cells]
    zeta = np.array([(0.5 * (z[j] + z[j + 1])) ** (2 - e) for j in cells])
    A = np.stack([np.ones(3), zeta], axis=1)
    coef = np.linalg.pinv(A)[0]
    g0 = sum(coef[i] * q[i] for i in range(3))
    return -c * g0


def _check_data(data: BoundaryData, grid: WeightedGrid, kind: str):
    if data.kind != kind:
        raise ValueError(f"expected {kind} data, got {data.kind}")
    if data.grid.shape != grid.tangential.shape or not np.allclose(data.grid.center, grid.tangential.center) \
            or not math.isclose(data.grid.half_width, grid.tangential.half_width):
        raise ValueError("boundary data live on a different tangential grid")


def solve_dirichlet(field: ConductivityField, grid: WeightedGrid, s, phi: BoundaryData, *,
                    tol: float = 1e-9, maxiter: int = 500) -> ExtensionSolution:
    """Minimizer of the weighted energy with trace phi and zero on z = L_z."""
    s = _order(s)
    if abs(s - grid.s) > 1e-14:
        raise ValueError("grid was built for a different order s")
    _check_data(phi, grid, "dirichlet")
    op = _Operator(field, grid)
    Mz = len(grid.z)
    U = np.zeros((Mz,) + op.shape, dtype=complex)
    U[0] = phi.field
    if op.wall is not None:
        U[0][op.wall] = 0.0
    rows = slice(1, Mz - 1)
    b = -op.apply_full(U)[rows]
    pre = _Preconditioner(op, rows, singular_zero_mode=False)

    def apply(X):
        W = np.zeros_like(U)
        W[rows] = X
        return op.apply_full(W)[rows]

    X, its, res, hist = _pcg(apply, pre, b, tol, maxiter)
    U[rows] = X
    AU = op.apply_full(U)
    vol = grid.tangential.cell_volume
    energy = float(np.real(np.vdot(U, AU))) * vol
    flux = AU[0].copy()
    fex = _extrapolated_flux(U, grid.z, s, op.c)
    return ExtensionSolution(U, grid, "dirichlet", energy, flux, fex, its, res, tuple(hist), field.digest())


def solve_neumann(field: ConductivityField, grid: WeightedGrid, s, f: BoundaryData, *,
                  tol: float = 1e-9, maxiter: int = 500) -> ExtensionSolution:
    """Weak solution with -c lim z^{1-2s} d_z u = f, natural condition on z = L_z.

    With periodic laterals constants are in the kernel; the data must have
    zero mean and the solution is normalized to zero trace average.
    """
    s = _order(s)
    if abs(s - grid.s) > 1e-14:
        raise ValueError("grid was built for a different order s")
    _check_data(f, grid, "neumann")
    scale = max(f.l1_norm, 1e-300)
    if abs(f.mean) > 1e-10 * scale:
        raise CompatibilityError(f"Neumann data must have zero mean, |mean|/L1 = {abs(f.mean) / scale:.3e}")
    op = _Operator(field, grid)
    vol = grid.tangential.cell_volume
    data = f.field.astype(complex).copy()
    periodic = op.lateral == "periodic"
    if op.wall is not None:
        data[op.wall] = 0.0
    if periodic:
        resid = data.mean()
        if abs(resid) * data.size * vol > 1e-10 * scale:
            warnings.warn(f"discrete Neumann data have mean {abs(resid):.3e}; projected out "
                          "(periodic laterals fix the solution only up to constants)", RuntimeWarning,
                          stacklevel=2)
        data -= resid
    Mz = len(grid.z)
    b = np.zeros((Mz,) + op.shape, dtype=complex)
    b[0] = data * vol
    pre = _Preconditioner(op, slice(0, Mz), singular_zero_mode=periodic)

    # the discrete form uses plain sums; rhs row 0 carries f * cell volume,
    # so solve (A/vol) U = f on row 0
    def apply(X):
        return op.apply_full(X)

    def precond(R):
        return pre(R)

    project = None
    if periodic:
        def project(Z):
            return Z - Z.mean()

    rhs = b / vol
    X, its, res, hist = _pcg(apply, precond, rhs, tol, maxiter, project=project)
    U = X
    if periodic:
        U = U - U[0].mean()
    AU = op.apply_full(U)
    energy = float(np.real(np.vdot(U, AU))) * vol
    flux = AU[0]
    fex = _extrapolated_flux(U, grid.z, s, op.c)
    return ExtensionSolution(U, grid, "neumann", energy, flux, fex, its, res, tuple(hist), field.digest())


def discrete_energy(field: ConductivityField, grid: WeightedGrid, values) -> float:
    """Weighted energy of arbitrary nodal values (all layers)."""
    op = _Operator(field, grid)
    return op.energy(np.asarray(values, dtype=complex))


# --------------------------------------------------------------------------
# constant coefficients: separable reference and fast path
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ReferenceSolution:
    """e^{i xi.x} (Qz)^s K_s(Qz) / c_bar with Q = sqrt(xi.gamma0 xi)."""

    s: float
    xi: np.ndarray
    gamma0: np.ndarray
    c0: float
    Q: float
    energy_density: float
    flux: float

    def profile(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if self.Q == 0.0:
            return np.ones_like(z)
        _, c_hat, c_bar = gamma_constants(self.s)
        t = self.Q * z
        out = np.ones_like(t)
        pos = t > 0
        tp = t[pos]
        out[pos] = tp ** self.s * eval_K(self.s, tp, scaled=True) * np.exp(-tp) / c_bar
        return out

    def values(self, grid: WeightedGrid) -> np.ndarray:
        x = grid.tangential.coordinates()
        mode = np.exp(1j * (x @ self.xi))
        return self.profile(grid.z).reshape((-1,) + (1,) * grid.tangential.n) * mode[None]


def fourier_reference(s, xi, gamma0, c0: float = 1.0) -> ReferenceSolution:
    s = _order(s)
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    g = np.atleast_2d(np.asarray(gamma0, dtype=float))
    if g.shape != (len(xi), len(xi)):
        raise ValueError("gamma0 and xi dimensions differ")
    if np.max(np.abs(g - g.T)) > 1e-12 or np.linalg.eigvalsh(g).min() <= 0:
        raise ValueError("gamma0 must be symmetric positive definite")
    if c0 <= 0:
        raise ValueError("c0 must be positive")
    Q = math.sqrt(float(xi @ g @ xi))
    _, c_hat, c_bar = gamma_constants(s)
    dens = c0 * c_hat / c_bar * Q ** (2 * s)
    return ReferenceSolution(s, xi, g, float(c0), Q, dens, dens)


def _mode_symbol(field: ConductivityField, grid: WeightedGrid):
    """Q_k^2 on the DFT modes of a periodic grid for a constant field."""
    tg = grid.tangential
    g0 = field.gamma_at(np.asarray(tg.center)[None])[0]
    c0 = float(field.c_at(np.asarray(tg.center)[None])[0])
    ks = tg.wavenumbers()
    Q2 = sum(g0[j, l] * ks[j] * ks[l] for j in range(tg.n) for l in range(tg.n))
    return np.broadcast_to(Q2, tg.shape), c0


def _fast_path_ok(field, grid) -> bool:
    return bool(field.constant) and grid.lateral == "periodic"


def dtn_pairing(field: ConductivityField, grid: WeightedGrid, s, phi: BoundaryData, *,
                fast: bool | None = None, tol: float = 1e-9) -> float:
    """<Lambda phi, phi> = weighted energy of the Dirichlet solution.

    ``fast=None`` uses the per-mode closed form when the field is constant
    and the laterals periodic.
    """
    s = _order(s)
    _check_data(phi, grid, "dirichlet")
    use_fast = _fast_path_ok(field, grid) if fast is None else fast
    if use_fast:
        if not _fast_path_ok(field, grid):
            raise ValueError("fast path needs a constant field and periodic laterals")
        Q2, c0 = _mode_symbol(field, grid)
        _, c_hat, c_bar = gamma_constants(s)
        coef = sfft.fftn(phi.field, workers=_THREADS) / phi.field.size
        vol = (2 * grid.tangential.half_width) ** grid.tangential.n
        return float(vol * np.sum(np.abs(coef) ** 2 * c0 * c_hat / c_bar * Q2 ** s))
    return solve_dirichlet(field, grid, s, phi, tol=tol).energy


def ntd_pairing(field: ConductivityField, grid: WeightedGrid, s, f: BoundaryData, *,
                fast: bool | None = None, tol: float = 1e-9, diagnostics: dict | None = None) -> float:
    """Re int conj(f) u(x, 0) dx for the Neumann solution."""
    s = _order(s)
    _check_data(f, grid, "neumann")
    scale = max(f.l1_norm, 1e-300)
    if abs(f.mean) > 1e-10 * scale:
        raise CompatibilityError(f"Neumann data must have zero mean, |mean|/L1 = {abs(f.mean) / scale:.3e}")
    use_fast = _fast_path_ok(field, grid) if fast is None else fast
    if use_fast:
        if not _fast_path_ok(field, grid):
            raise ValueError("fast path needs a constant field and periodic laterals")
        Q2, c0 = _mode_symbol(field, grid)
        _, c_hat, c_bar = gamma_constants(s)
        coef = sfft.fftn(f.field, workers=_THREADS) / f.field.size
        vol = (2 * grid.tangential.half_width) ** grid.tangential.n
        nz = Q2 > 0
        val = vol * np.sum(np.abs(coef[nz]) ** 2 * c_bar / (c0 * c_hat * Q2[nz] ** s))
        if diagnostics is not None:
            diagnostics["imag"] = 0.0
            diagnostics["removed_mean"] = float(abs(coef.flat[0]))
        return float(val)
    sol = solve_neumann(field, grid, s, f, tol=tol)
    vol = grid.tangential.cell_volume
    val = np.vdot(f.field, sol.trace) * vol
    if diagnostics is not None:
        diagnostics["imag"] = float(val.imag)
        diagnostics["iterations"] = sol.iterations
    return float(val.real)


# --------------------------------------------------------------------------
# snapshots
# --------------------------------------------------------------------------

SNAPSHOT_MAGIC = b"FRXSNAP1"


def write_snapshot(path, sol: ExtensionSolution) -> None:
    """Binary snapshot: magic, uint32 LE header length, UTF-8 JSON header,
    float64 LE z nodes, complex128 LE nodal values in C order (z first)."""
    header = {
        "format": "FRXSNAP1",
        "n": sol.grid.tangential.n,
        "s": sol.grid.s,
        "kind": sol.kind,
        "shape": [int(v) for v in sol.values.shape],
        "grid": sol.grid.describe(),
        "field_hash": sol.field_hash,
        "energy": sol.energy,
        "dtype": "complex128-le",
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.asarray(sol.grid.z, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(sol.values, dtype="<c16").tobytes())


def read_snapshot(path):
    """Returns (header dict, z nodes, values)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != SNAPSHOT_MAGIC:
        raise ValueError("not a snapshot file")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    shape = tuple(header["shape"])
    off = 12 + hlen
    z = np.frombuffer(raw, dtype="<f8", count=shape[0], offset=off).copy()
    off += 8 * shape[0]
    count = int(np.prod(shape))
    values = np.frombuffer(raw, dtype="<c16", count=count, offset=off).reshape(shape).copy()
    if off + 16 * count != len(raw):
        raise ValueError("snapshot size does not match its header")
    return header, z, values
