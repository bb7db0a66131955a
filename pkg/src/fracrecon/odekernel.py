"""Normal-direction profiles for the weighted extension problem.

Profiles live on a composite Gauss-Legendre grid: geometric panels from
``t_min`` up to ``t_switch`` resolve the algebraic behaviour at t = 0,
uniform panels carry the exponential tail up to ``T``.  Inside a panel the
profile is a degree ``order - 1`` polynomial, so cumulative integrals and
point evaluation are spectrally accurate.

Two profile forms are used:

``kernel``
    w(t) in the unit variable, solving t^2 w'' + t w' - (s^2 + t^2) w = t^2 v.
    The extension profile with decay rate A is (A t)^s w(A t).
``extension``
    the extension profile itself, e.g. h_A(t) = (A t)^s K_s(A t).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.polynomial import legendre as npleg

from .specfun import _order, bessel_ik, eval_I_reflected, gamma_constants

__all__ = [
    "GridSpec",
    "PanelGrid",
    "RadialProfile",
    "ExtrapolationError",
    "make_grid",
    "bessel_k_profile",
    "zero_profile",
    "homogeneous_profile",
    "solve_inhomogeneous",
    "weighted_flux_limit",
    "ode_residual",
]


class ExtrapolationError(RuntimeError):
    """Flux extrapolation did not settle."""


@dataclass(frozen=True)
class GridSpec:
    """Layout of the composite Gauss-Legendre grid in the unit variable."""

    t_min: float = 1e-10
    ratio: float = 2.0
    t_switch: float = 2.0
    panel_width: float = 1.0
    T: float = 40.0
    order: int = 16

    def __post_init__(self):
        if not (0 < self.t_min < self.t_switch < self.T):
            raise ValueError("need 0 < t_min < t_switch < T")
        if self.ratio <= 1.0 or self.panel_width <= 0 or self.order < 4:
            raise ValueError("invalid panel layout")


@lru_cache(maxsize=8)
def _reference_rule(p: int):
    x, w = npleg.leggauss(p)
    vinv = np.linalg.inv(npleg.legvander(x, p - 1))
    # cumulative integral from -1 to x_i of the interpolant through the nodes
    antider = npleg.legint(np.eye(p), lbnd=-1, axis=0)
    cumul = npleg.legvander(x, p) @ antider @ vinv
    return x, w, vinv, cumul


@dataclass(frozen=True, eq=False)
class PanelGrid:
    """Panel edges plus Gauss-Legendre nodes and weights."""

    edges: np.ndarray
    order: int
    nodes: np.ndarray = field(init=False)
    weights: np.ndarray = field(init=False)

    def __post_init__(self):
        x, w, _, _ = _reference_rule(self.order)
        a, b = self.edges[:-1, None], self.edges[1:, None]
        half = 0.5 * (b - a)
        object.__setattr__(self, "nodes", (0.5 * (a + b) + half * x).ravel())
        object.__setattr__(self, "weights", (half * w).ravel())

    @property
    def n_panels(self) -> int:
        return len(self.edges) - 1

    def scaled(self, factor: float) -> "PanelGrid":
        return PanelGrid(self.edges * factor, self.order)

    def cumulative(self, f: np.ndarray) -> np.ndarray:
        """Running integral from edges[0] to each node."""
        _, _, _, cumul = _reference_rule(self.order)
        p = self.order
        fp = f.reshape(self.n_panels, p)
        half = 0.5 * np.diff(self.edges)[:, None]
        inner = (fp @ cumul.T) * half
        totals = (fp @ _reference_rule(p)[1]) * half[:, 0]
        offsets = np.concatenate([[0.0], np.cumsum(totals)[:-1]])
        return (inner + offsets[:, None]).ravel()

    def cumulative_from_right(self, f: np.ndarray) -> np.ndarray:
        """Running integral from each node to edges[-1], summed right to left
        so that exponentially small tails keep their relative accuracy."""
        _, w, _, cumul = _reference_rule(self.order)
        p = self.order
        fp = f.reshape(self.n_panels, p)
        half = 0.5 * np.diff(self.edges)[:, None]
        totals = (fp @ w) * half[:, 0]
        inner = totals[:, None] - (fp @ cumul.T) * half
        after = np.concatenate([np.cumsum(totals[::-1])[::-1][1:], [0.0]])
        return (inner + after[:, None]).ravel()

    def integrate(self, f: np.ndarray) -> float:
        return float(self.weights @ f)

    def interpolate(self, values: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Evaluate the piecewise polynomial through ``values`` at points inside the grid."""
        _, _, vinv, _ = _reference_rule(self.order)
        t = np.asarray(t, dtype=float)
        k = np.clip(np.searchsorted(self.edges, t, side="right") - 1, 0, self.n_panels - 1)
        a, b = self.edges[k], self.edges[k + 1]
        xr = (2.0 * t - a - b) / (b - a)
        coeffs = values.reshape(self.n_panels, self.order) @ vinv.T
        return np.einsum("ij,ij->i", npleg.legvander(xr.ravel(), self.order - 1),
                         coeffs[k.ravel()]).reshape(t.shape)


def make_grid(spec: GridSpec = GridSpec()) -> PanelGrid:
    n_geo = int(math.ceil(math.log(spec.t_switch / spec.t_min) / math.log(spec.ratio)))
    geo = np.geomspace(spec.t_min, spec.t_switch, n_geo + 1)
    n_uni = int(math.ceil((spec.T - spec.t_switch) / spec.panel_width))
    uni = np.linspace(spec.t_switch, spec.T, n_uni + 1)
    return PanelGrid(np.concatenate([geo, uni[1:]]), spec.order)


@dataclass(frozen=True, eq=False)
class RadialProfile:
    """A normal-direction profile sampled on a panel grid.

    ``grid`` holds the nodes t_i, ``values`` w(t_i), ``d_values`` w'(t_i) and
    ``weighted_d`` the derivative of t^s w (kernel form) or of the profile
    itself (extension form), evaluated without numerical differentiation.
    ``scale`` is the exponential decay rate of the profile.
    """

    panels: PanelGrid
    values: np.ndarray
    d_values: np.ndarray
    weighted_d: np.ndarray
    s: float
    zero_exponent: float
    decay_power: float
    tail_cut: float
    form: str = "kernel"
    scale: float = 1.0
    flux_exact: float | None = None

    def __post_init__(self):
        g = self.grid
        if np.any(np.diff(g) <= 0):
            raise ValueError("profile grid must be strictly increasing")
        for name in ("values", "d_values", "weighted_d"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"profile {name} contain non-finite entries")
        if self.form not in ("kernel", "extension"):
            raise ValueError(f"unknown profile form {self.form!r}")

    @property
    def grid(self) -> np.ndarray:
        return self.panels.nodes

    def tail_consistent(self, factor: float = 10.0) -> bool:
        """|w(t_M)| against the asymptotic law fitted on the last panel."""
        t, w = self.grid, self.values
        p = self.panels.order
        t0, t1 = t[-p], t[-1]
        a = self.decay_power
        lead = abs(w[-p]) / (t0 ** a * math.exp(-self.scale * t0)) if w[-p] != 0 else 0.0
        return abs(w[-1]) <= factor * lead * t1 ** a * math.exp(-self.scale * t1) + 1e-300

    def evaluate(self, t) -> np.ndarray:
        """Profile values at arbitrary t > 0 using the endpoint laws outside the grid."""
        t = np.asarray(t, dtype=float)
        out = np.empty_like(t)
        g = self.grid
        lo, hi = self.panels.edges[0], self.panels.edges[-1]
        inside = (t >= lo) & (t <= hi)
        out[inside] = self.panels.interpolate(self.values, t[inside])
        below = t < lo
        if below.any():
            out[below] = self.values[0] * (t[below] / g[0]) ** self.zero_exponent
        above = t > hi
        if above.any():
            wt = self.panels.interpolate(self.values, np.array([hi]))[0]
            out[above] = wt * (t[above] / hi) ** self.decay_power * np.exp(-self.scale * (t[above] - hi))
        return out

    def _combine(self, other: "RadialProfile", a: float, b: float) -> "RadialProfile":
        if other.panels is not self.panels and not np.array_equal(other.panels.edges, self.panels.edges):
            raise ValueError("profiles live on different grids")
        if (self.form, self.s, self.scale) != (other.form, other.s, other.scale):
            raise ValueError("profiles of different form, order or scale")
        flux = None
        if self.flux_exact is not None and other.flux_exact is not None:
            flux = a * self.flux_exact + b * other.flux_exact
        return RadialProfile(self.panels, a * self.values + b * other.values,
                             a * self.d_values + b * other.d_values,
                             a * self.weighted_d + b * other.weighted_d, self.s,
                             min(self.zero_exponent, other.zero_exponent),
                             max(self.decay_power, other.decay_power),
                             self.tail_cut, self.form, self.scale, flux)

    def __add__(self, other):
        return self._combine(other, 1.0, 1.0)

    def __sub__(self, other):
        return self._combine(other, 1.0, -1.0)

    def __mul__(self, c: float):
        return self._combine(self, float(c), 0.0)

    __rmul__ = __mul__


def bessel_k_profile(s, spec: GridSpec = GridSpec()) -> RadialProfile:
    """The kernel w = K_s, the source of the first correction."""
    s = _order(s)
    panels = make_grid(spec)
    t = panels.nodes
    _, k, _, dk = bessel_ik(s, t)
    k1ms = bessel_ik(1.0 - s, t)[1]
    c_hat = gamma_constants(s)[1]
    return RadialProfile(panels, k, dk, -(t ** s) * k1ms, s, -s, -0.5, spec.T,
                         "kernel", 1.0, -c_hat)


def zero_profile(s, spec: GridSpec = GridSpec()) -> RadialProfile:
    s = _order(s)
    panels = make_grid(spec)
    z = np.zeros_like(panels.nodes)
    return RadialProfile(panels, z, z.copy(), z.copy(), s, 0.0, -0.5, spec.T, "kernel", 1.0, 0.0)


def homogeneous_profile(s, A: float, spec: GridSpec = GridSpec()) -> RadialProfile:
    """h_A(t) = (A t)^s K_s(A t) on the unit grid rescaled by 1/A."""
    s = _order(s)
    if not A > 0:
        raise ValueError("A must be positive")
    panels = make_grid(spec).scaled(1.0 / A)
    u = A * panels.nodes
    k = bessel_ik(s, u)[1]
    k1ms = bessel_ik(1.0 - s, u)[1]
    vals = u ** s * k
    dvals = -A * u ** s * k1ms
    c_hat = gamma_constants(s)[1]
    return RadialProfile(panels, vals, dvals, dvals.copy(), s, 0.0, s - 0.5, spec.T / A,
                         "extension", A, -c_hat * A ** (2 * s))


def solve_inhomogeneous(s, source: RadialProfile) -> RadialProfile:
    """Decaying solution of t^2 w'' + t w' - (s^2 + t^2) w = t^2 v.

    w = -I_s(t) int_t^inf K_s v tau dtau - K_s(t) int_0^t I_s v tau dtau.
    """
    s = _order(s)
    if source.form != "kernel" or source.scale != 1.0:
        raise ValueError("source must be a kernel-form profile in the unit variable")
    if abs(source.s - s) > 1e-14:
        raise ValueError("source built for a different order")
    if source.zero_exponent < -s - 1e-12:
        raise ValueError(f"source zero_exponent {source.zero_exponent} below -s = {-s}")
    if source.decay_power < -0.5 - 1e-12:
        raise ValueError(f"source decay_power {source.decay_power} below -1/2")
    panels = source.panels
    t = panels.nodes
    v = source.values
    i_s, k_s, di_s, dk_s = bessel_ik(s, t)
    k1ms = bessel_ik(1.0 - s, t)[1]
    i_m = eval_I_reflected(1.0 - s, t)  # I_{s-1}
    f1 = k_s * v * t
    f2 = i_s * v * t
    a0 = source.zero_exponent
    # contributions outside the grid from the endpoint laws
    lo = panels.edges[0]
    head2 = f2[0] * (lo / t[0]) ** (1 + s + a0) * lo / (2 + s + a0)
    T = panels.edges[-1]
    tail1 = 0.5 * f1[-1] * math.exp(-2.0 * (T - t[-1]))
    j1 = panels.cumulative_from_right(f1) + tail1
    total1 = panels.integrate(f1) + tail1
    j2 = head2 + panels.cumulative(f2)
    w = -i_s * j1 - k_s * j2
    # I_s' = I_{s+1} + (s/t) I_s and K_s' = -(K_{1-s} + (s/t) K_s): no cancellation
    dw = -di_s * j1 - dk_s * j2
    wd = t ** s * (-i_m * j1 + k1ms * j2)
    c_bar = gamma_constants(s)[2]
    zero_exp = min(s, 2.0 + a0)
    return RadialProfile(panels, w, dw, wd, s, zero_exp, source.decay_power + 1.0,
                         source.tail_cut, "kernel", 1.0, -total1 / c_bar)


def _flux_samples(profile: RadialProfile):
    t = profile.grid[:3]
    g = t ** (1.0 - 2.0 * profile.s) * profile.weighted_d[:3]
    return t, g


def weighted_flux_limit(profile: RadialProfile, s, A: float | None = None) -> float:
    """lim_{t->0} t^{1-2s} d/dt((A t)^s w(A t)) by extrapolation over the three smallest nodes.

    For an extension-form profile the limit of t^{1-2s} h'(t) is returned and
    ``A`` must match the profile scale when given.
    """
    s = _order(s)
    if abs(profile.s - s) > 1e-14:
        raise ValueError("profile built for a different order")
    t, g = _flux_samples(profile)
    if not np.any(g):
        return 0.0
    # g(t) = g0 + g1 t^{2-2s} + g2 t^2 + ...
    p1, p2 = 2.0 - 2.0 * s, 2.0
    mat = np.stack([np.ones(3), t ** p1, t ** p2], axis=1)
    g0 = np.linalg.solve(mat, g)[0]
    d = np.diff(g)
    tiny = 1e-9 * abs(g0)
    # differences must shrink toward t = 0 without changing sign
    growing = abs(d[0]) > 1.5 * abs(d[1]) and abs(d[0]) > tiny
    flipping = d[0] * d[1] < 0 and min(abs(d[0]), abs(d[1])) > tiny
    if not np.all(np.isfinite(g)) or growing or flipping:
        raise ExtrapolationError(f"flux samples {g} do not settle as t -> 0")
    if profile.form == "extension":
        if A is not None and abs(A - profile.scale) > 1e-12 * profile.scale:
            raise ValueError("A does not match the extension profile's scale")
        return float(g0)
    A = 1.0 if A is None else float(A)
    return float(A ** (2 * s) * g0)


def ode_residual(profile: RadialProfile, source: RadialProfile | None = None,
                 delta: float = 5e-4, t_range=(1e-8, 30.0)) -> float:
    """Max over interior nodes of |t^2 w'' + t w' - (s^2+t^2) w - t^2 v|.

    The derivative part is the second difference in u = log t of the
    interpolated profile, a second-order finite difference.
    """
    if profile.form != "kernel":
        raise ValueError("residual check applies to kernel-form profiles")
    s = profile.s
    t = profile.grid
    mask = (t > t_range[0]) & (t < t_range[1])
    t = t[mask]
    w0 = profile.values[mask]
    wp = profile.evaluate(t * math.exp(delta))
    wm = profile.evaluate(t * math.exp(-delta))
    euler = (wp - 2.0 * w0 + wm) / delta ** 2
    v = source.values[mask] if source is not None else 0.0
    res = euler - (s * s + t * t) * w0 - t * t * v
    return float(np.max(np.abs(res))) if res.size else 0.0
