"""Modified Bessel functions of real order and the limit constants.

The Bessel evaluator follows the classical Temme / Steed split: a Temme
series for the pair (K_mu, K_{mu+1}) with |mu| <= 1/2 when t <= 2, the
Steed continued fraction (CF2) beyond, upward recurrence to the requested
order, and the ratio I'_nu/I_nu from the first continued fraction (CF1)
combined with the Wronskian to obtain I_nu.  Everything is vectorized over
the argument.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate

__all__ = [
    "Order",
    "PaperConstants",
    "IdentityReport",
    "BesselRangeError",
    "QuadratureError",
    "bessel_ik",
    "eval_K",
    "eval_I",
    "eval_I_reflected",
    "paper_constants",
    "gamma_constants",
    "check_bessel_identities",
]

_EPS = 1e-16
_FPMIN = 1e-300
_MAXIT = 100000
# beyond this argument exp(t) overflows / exp(-t) underflows
_T_REPRESENTABLE = 700.0
_ENDPOINT_GAP = 1e-6

# Taylor coefficients of 1/Gamma(1+x) about x = 0
_RGAMMA1P = np.array([
    1.0,
    0.57721566490153286061,
    -0.65587807152025388108,
    -0.042002635034095235529,
    0.1665386113822914895,
    -0.042197734555544336748,
    -0.0096219715278769735621,
    0.0072189432466630995424,
    -0.0011651675918590651121,
    -0.00021524167411495097282,
    0.00012805028238811618615,
    -0.000020134854780788238656,
    -1.2504934821426706573e-6,
    1.1330272319816958824e-6,
    -2.0563384169776071035e-7,
    6.1160951044814158179e-9,
    5.0020076444692229301e-9,
    -1.1812745704870201446e-9,
    1.0434267116911005105e-10,
    7.782263439905071254e-12,
    -3.6968056186422057082e-12,
    5.100370287454475979e-13,
    -2.0583260535665067832e-14,
    -5.3481225394230179824e-15,
    1.2267786282382607902e-15,
    -1.1812593016974587695e-16,
])


class BesselRangeError(OverflowError):
    """Raised when an unscaled value is not representable in double precision."""


class QuadratureError(RuntimeError):
    """Raised when a constant's quadrature misses the requested tolerance."""

    def __init__(self, message: str, achieved: float):
        super().__init__(message)
        self.achieved = achieved


@dataclass(frozen=True)
class Order:
    """Fractional order s, strictly inside (0, 1)."""

    s: float

    def __post_init__(self):
        s = float(self.s)
        if not math.isfinite(s) or not (_ENDPOINT_GAP <= s <= 1.0 - _ENDPOINT_GAP):
            raise ValueError(f"order s must lie in (0, 1) away from the endpoints, got {self.s!r}")
        object.__setattr__(self, "s", s)

    def __float__(self):
        return self.s


def _order(s) -> float:
    return Order(s.s if isinstance(s, Order) else s).s


def _temme_gammas(mu: float):
    """Return gam1, gam2, 1/Gamma(1+mu), 1/Gamma(1-mu) for |mu| <= 1/2."""
    powers = mu ** np.arange(len(_RGAMMA1P))
    even = _RGAMMA1P[0::2] @ powers[0::2]
    # odd part divided by mu, without cancellation
    odd = _RGAMMA1P[1::2] @ powers[0::2][: len(_RGAMMA1P[1::2])]
    gam1 = -odd
    gam2 = even
    return gam1, gam2, gam2 - mu * gam1, gam2 + mu * gam1


def _k_pair_temme(mu: float, x: np.ndarray):
    """K_mu(x), K_{mu+1}(x) by Temme's series; intended for 0 < x <= 2."""
    gam1, gam2, gampl, gammi = _temme_gammas(mu)
    x2 = 0.5 * x
    pimu = math.pi * mu
    fact = 1.0 if abs(pimu) < _EPS else pimu / math.sin(pimu)
    d = -np.log(x2)
    e = mu * d
    small = np.abs(e) < _EPS
    fact2 = np.where(small, 1.0, np.sinh(e) / np.where(small, 1.0, e))
    ff = fact * (gam1 * np.cosh(e) + gam2 * fact2 * d)
    total = ff.copy()
    ee = np.exp(e)
    p = 0.5 * ee / gampl
    q = 0.5 / (ee * gammi)
    c = np.ones_like(x)
    dd = x2 * x2
    total1 = p.copy()
    active = np.ones(x.shape, dtype=bool)
    for i in range(1, _MAXIT):
        ff = (i * ff + p + q) / (i * i - mu * mu)
        c = c * dd / i
        p = p / (i - mu)
        q = q / (i + mu)
        delta = c * ff
        total = total + np.where(active, delta, 0.0)
        delta1 = c * (p - i * ff)
        total1 = total1 + np.where(active, delta1, 0.0)
        active &= np.abs(delta) >= np.abs(total) * _EPS
        if not active.any():
            break
    else:  # pragma: no cover - the series converges in a few dozen terms
        raise ArithmeticError("Temme series failed to converge")
    return total, total1 * (2.0 / x)


def _k_pair_steed(mu: float, x: np.ndarray):
    """Exponentially scaled e^x K_mu(x), e^x K_{mu+1}(x) by Steed's CF2; x >= 2."""
    b = 2.0 * (1.0 + x)
    d = 1.0 / b
    h = d.copy()
    delh = d.copy()
    q1 = np.zeros_like(x)
    q2 = np.ones_like(x)
    a1 = 0.25 - mu * mu
    q = np.full_like(x, a1)
    c = np.full_like(x, a1)
    a = np.full_like(x, -a1)
    ssum = 1.0 + q * delh
    active = np.ones(x.shape, dtype=bool)
    for i in range(1, _MAXIT):
        a = a - 2 * i
        c = -a * c / (i + 1.0)
        qnew = (q1 - b * q2) / a
        q1 = q2
        q2 = qnew
        q = q + c * qnew
        b = b + 2.0
        d = 1.0 / (b + a * d)
        delh = (b * d - 1.0) * delh
        h = h + np.where(active, delh, 0.0)
        dels = q * delh
        ssum = ssum + np.where(active, dels, 0.0)
        active &= np.abs(dels / ssum) >= _EPS
        if not active.any():
            break
    else:  # pragma: no cover
        raise ArithmeticError("Steed continued fraction failed to converge")
    h = a1 * h
    kmu = np.sqrt(math.pi / (2.0 * x)) / ssum
    k1 = kmu * (mu + x + 0.5 - h) / x
    return kmu, k1


def _cf1_ratio(nu: float, x: np.ndarray):
    """I'_nu(x)/I_nu(x) by the modified Lentz evaluation of CF1."""
    xi = 1.0 / x
    xi2 = 2.0 * xi
    h = np.maximum(nu * xi, _FPMIN)
    b = xi2 * nu
    d = np.zeros_like(x)
    c = h.copy()
    active = np.ones(x.shape, dtype=bool)
    for _ in range(_MAXIT):
        b = b + xi2
        d = 1.0 / (b + d)
        c = b + 1.0 / c
        delta = c * d
        h = np.where(active, h * delta, h)
        active &= np.abs(delta - 1.0) >= _EPS
        if not active.any():
            break
    else:  # pragma: no cover
        raise ArithmeticError("CF1 failed to converge")
    return h


def bessel_ik(nu: float, t, scaled: bool = False):
    """I_nu, K_nu and their derivatives for real nu >= 0 and t > 0.

    With ``scaled`` the I-pair is multiplied by e^{-t} and the K-pair by e^{t}.

    Returns
    -------
    I, K, dI, dK : ndarray
    """
    x = np.asarray(t, dtype=float)
    shape = x.shape
    x = np.atleast_1d(x).ravel()
    if nu < 0:
        raise ValueError("bessel_ik expects nu >= 0; use the connection formula for negative order")
    if np.any(~np.isfinite(x)) or np.any(x <= 0):
        raise ValueError("Bessel functions are evaluated for t > 0 only")
    if not scaled and np.any(x > _T_REPRESENTABLE):
        raise BesselRangeError(
            f"unscaled Bessel values overflow for t > {_T_REPRESENTABLE:g}; use scaled=True"
        )
    nl = int(nu + 0.5)
    mu = nu - nl
    kmu = np.empty_like(x)
    k1 = np.empty_like(x)
    lo = x <= 2.0
    if lo.any():
        a, b = _k_pair_temme(mu, x[lo])
        ex = np.exp(x[lo])
        kmu[lo], k1[lo] = a * ex, b * ex
    if (~lo).any():
        kmu[~lo], k1[~lo] = _k_pair_steed(mu, x[~lo])
    # kmu, k1 now hold e^x K; upward recurrence is linear so scaling passes through
    xi2 = 2.0 / x
    for i in range(1, nl + 1):
        kmu, k1 = k1, (mu + i) * xi2 * k1 + kmu
    kk = kmu
    dk = nu / x * kk - k1
    f = _cf1_ratio(nu, x)
    # Wronskian I K' - I' K = -1/x, so I = 1/(x (f K - K'))
    ii = 1.0 / (x * (f * kk - dk))
    di = f * ii
    if not scaled:
        ex = np.exp(-x)
        kk, dk = kk * ex, dk * ex
        e2 = np.exp(x)
        ii, di = ii * e2, di * e2
    else:
        # e^x K times e^{-x} I: the Wronskian product is scale free
        pass
    return tuple(v.reshape(shape) for v in (ii, kk, di, dk))


def eval_K(s, t, scaled: bool = False):
    """K_s(t) for 0 < s < 1; ``scaled`` returns e^t K_s(t)."""
    return bessel_ik(_order(s), t, scaled)[1]


def eval_I(s, t, scaled: bool = False):
    """I_s(t) for 0 < s < 1; ``scaled`` returns e^{-t} I_s(t)."""
    return bessel_ik(_order(s), t, scaled)[0]


def eval_I_reflected(s, t, scaled: bool = False):
    """I_{-s}(t) from the connection formula I_{-s} = I_s + (2/pi) sin(s pi) K_s."""
    s = _order(s)
    ii, kk, _, _ = bessel_ik(s, t, scaled)
    factor = 2.0 / math.pi * math.sin(s * math.pi)
    if scaled:
        return ii + factor * kk * np.exp(-2.0 * np.asarray(t, dtype=float))
    return ii + factor * kk


@dataclass(frozen=True)
class PaperConstants:
    """Limit constants attached to an order s.

    c_s is the extension constant, c_hat_s the flux constant of t^s K_s,
    c_bar_s the trace constant of t^s K_s, c1 and c2 the energy integrals
    of t K_s^2 and t K_{1-s}^2.
    """

    s: float
    c_s: float
    c_hat_s: float
    c_bar_s: float
    c1: float
    c2: float
    c_sum: float
    quad_error: float


def gamma_constants(s):
    """Closed-form constants (c_s, c_hat_s, c_bar_s)."""
    s = _order(s)
    c_s = -(2.0 ** (2 * s - 1)) * math.gamma(s) / math.gamma(1 - s)
    c_hat = 2.0 ** (-s) * math.gamma(1 - s)
    c_bar = 2.0 ** (s - 1) * math.gamma(s)
    return c_s, c_hat, c_bar


def _energy_integral(nu: float, quad_tol: float):
    """int_0^inf t K_nu(t)^2 dt with an error estimate."""

    at_zero = (2.0 ** (nu - 1) * math.gamma(nu)) ** 2

    def smooth_part(t):
        # t K_nu^2 = t^{1-2 nu} (t^nu K_nu)^2, the bracket is bounded at 0
        if t <= 0.0:
            return at_zero
        k = bessel_ik(nu, np.atleast_1d(t))[1][0]
        return float((t ** nu * k) ** 2)

    def f_tail(t):
        k = bessel_ik(nu, np.atleast_1d(t), scaled=True)[1]
        return float(t * k[0] ** 2 * math.exp(-2.0 * t))

    # algebraic weight t^{1-2 nu} handles the endpoint singularity exactly
    head, err_head = integrate.quad(
        smooth_part, 0.0, 2.0,
        weight="alg", wvar=(1.0 - 2.0 * nu, 0.0),
        epsabs=quad_tol / 4, epsrel=1e-14, limit=200,
    )
    body, err_body = integrate.quad(f_tail, 2.0, 60.0, epsabs=quad_tol / 4, epsrel=1e-14, limit=200)
    # beyond T: K_nu(t) <= sqrt(pi/(2t)) e^{-t} (1 + |4nu^2-1|/(8t)) for t >= 1
    T = 60.0
    bound = (1.0 + abs(4 * nu * nu - 1) / (8 * T)) ** 2
    tail = math.pi / 4.0 * math.exp(-2.0 * T) * bound
    return head + body + tail, err_head + err_body + tail


def paper_constants(s, quad_tol: float = 1e-10) -> PaperConstants:
    """All limit constants for order s; c1, c2 by adaptive quadrature."""
    s = _order(s)
    if not (0.0 < quad_tol <= 1e-4):
        raise ValueError(f"quad_tol must lie in (0, 1e-4], got {quad_tol}")
    c_s, c_hat, c_bar = gamma_constants(s)
    c1, e1 = _energy_integral(s, quad_tol)
    c2, e2 = _energy_integral(1.0 - s, quad_tol)
    err = e1 + e2
    if not (math.isfinite(c1) and math.isfinite(c2)) or err > quad_tol:
        raise QuadratureError(
            f"energy integrals for s={s} reached error {err:.3e} > {quad_tol:.3e}", err
        )
    return PaperConstants(s, c_s, c_hat, c_bar, c1, c2, c1 + c2, err)


@dataclass(frozen=True)
class IdentityReport:
    """Maximum relative deviations of the Bessel identities on a grid.

    ``weighted_derivative_sign`` is the sign of d/dt(t^s K_s) found by
    finite differences (expected -1).
    """

    s: float
    grid: tuple
    wronskian: float
    k_recurrence: float
    i_recurrence: float
    weighted_derivative: float
    weighted_derivative_sign: int

    @property
    def max_deviation(self) -> float:
        """Largest deviation of the exact identities; the finite-difference
        check is limited by roundoff at small t and is reported separately."""
        return max(self.wronskian, self.k_recurrence, self.i_recurrence)


def check_bessel_identities(s, grid) -> IdentityReport:
    """Check the Wronskian, the two three-term recurrences and the weighted derivative law."""
    s = _order(s)
    t = np.asarray(grid, dtype=float)
    if t.size == 0 or np.any(t <= 0) or np.any(t > 50):
        raise ValueError("identity grid must lie in (0, 50]")
    i_s, k_s, di_s, dk_s = bessel_ik(s, t, scaled=True)
    # Wronskian t (I' K - I K') = 1, scale factors cancel in the products
    wr = np.max(np.abs(t * (di_s * k_s - i_s * dk_s) - 1.0))

    # K_{s+1} - K_{s-1} = (2s/t) K_s with K_{s-1} = K_{1-s} computed independently
    k_next = bessel_ik(s + 1.0, t, scaled=True)[1]
    k_prev = bessel_ik(1.0 - s, t, scaled=True)[1]
    lhs = k_next - k_prev
    rhs = 2 * s / t * k_s
    k_rec = np.max(np.abs(lhs - rhs) / np.maximum(np.abs(k_next), np.abs(k_prev)))

    # I_{s-1} - I_{s+1} = (2s/t) I_s with I_{s-1} from the connection formula
    i_next = bessel_ik(s + 1.0, t, scaled=True)[0]
    i_prev = eval_I_reflected(1.0 - s, t, scaled=True)
    lhs = i_prev - i_next
    rhs = 2 * s / t * i_s
    i_rec = np.max(np.abs(lhs - rhs) / np.maximum(np.abs(i_prev), np.abs(i_next)))

    # five-point central difference of g(t) = t^s K_s(t) against -t^s K_{1-s}(t);
    # g is nearly flat for small t, so the relative step grows to balance roundoff
    h = t * np.clip((1e-16 / np.minimum(t ** (2 * s), 1.0)) ** 0.2, 1e-3, 0.1)

    def g(u):
        return u ** s * bessel_ik(s, u)[1]

    fd = (-g(t + 2 * h) + 8 * g(t + h) - 8 * g(t - h) + g(t - 2 * h)) / (12 * h)
    expected = t ** s * bessel_ik(1.0 - s, t)[1]
    wd = np.max(np.abs(np.abs(fd) - expected) / expected)
    sign = int(np.sign(np.median(fd)))
    return IdentityReport(s, tuple(float(v) for v in t), float(wr), float(k_rec),
                          float(i_rec), float(wd), sign)
