import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special

from fracrecon.specfun import (
    BesselRangeError,
    Order,
    bessel_ik,
    check_bessel_identities,
    eval_I,
    eval_I_reflected,
    eval_K,
    gamma_constants,
    paper_constants,
)

orders = st.floats(0.02, 0.98)
args = st.floats(1e-6, 40.0)


def test_order_rejects_endpoints():
    for bad in (0.0, 1.0, -0.2, 1.5, float("nan")):
        with pytest.raises(ValueError):
            Order(bad)
    assert float(Order(0.25)) == 0.25


def test_half_order_closed_forms():
    assert eval_K(0.5, 1.0) == pytest.approx(math.sqrt(math.pi / 2) * math.exp(-1), rel=1e-13)
    assert eval_I(0.5, 1.0) == pytest.approx(math.sqrt(2 / math.pi) * math.sinh(1.0), rel=1e-13)
    assert eval_K(0.5, 30.0, scaled=True) == pytest.approx(math.sqrt(math.pi / 60), rel=1e-13)
    expected = (1 - math.exp(-40)) / math.sqrt(40 * math.pi)
    assert eval_I(0.5, 20.0, scaled=True) == pytest.approx(expected, rel=1e-12)


def test_small_argument_laws():
    s, t = 0.3, 1e-6
    lead = 2 ** (s - 1) * math.gamma(s) * t ** -s
    # the next term is O(t^{2s}) relative, about 2.4e-4 here
    assert eval_K(s, t) == pytest.approx(lead, rel=5e-4)
    two_term = math.pi / (2 * math.sin(math.pi * s)) * (
        (t / 2) ** -s / math.gamma(1 - s) - (t / 2) ** s / math.gamma(1 + s))
    assert eval_K(s, t) == pytest.approx(two_term, rel=1e-10)
    assert abs(eval_I(0.4, 1e-10)) < 1e-3


def test_domain_and_overflow_errors():
    with pytest.raises(ValueError):
        eval_K(0.3, 0.0)
    with pytest.raises(ValueError):
        eval_I(0.3, -1.0)
    with pytest.raises(BesselRangeError):
        eval_K(0.3, 800.0)
    assert np.isfinite(eval_K(0.3, 800.0, scaled=True))


@settings(max_examples=60, deadline=None)
@given(orders, args)
def test_matches_scipy(s, t):
    I, K, dI, dK = bessel_ik(s, t)
    assert K == pytest.approx(special.kv(s, t), rel=1e-11)
    assert I == pytest.approx(special.iv(s, t), rel=1e-11)
    assert dK == pytest.approx(special.kvp(s, t), rel=1e-10)
    assert dI == pytest.approx(special.ivp(s, t), rel=1e-10)


@pytest.mark.parametrize("s,t", [(0.1, 1e-5), (0.37, 0.7), (0.5, 3.0), (0.9, 25.0), (0.63, 60.0)])
def test_scaled_matches_mpmath(s, t):
    mpmath.mp.dps = 30
    ks = float(mpmath.besselk(s, t) * mpmath.exp(t))
    is_ = float(mpmath.besseli(s, t) * mpmath.exp(-t))
    assert eval_K(s, t, scaled=True) == pytest.approx(ks, rel=1e-12)
    assert eval_I(s, t, scaled=True) == pytest.approx(is_, rel=1e-12)


@pytest.mark.parametrize("s", [0.2, 0.5, 0.8])
def test_reflected_order(s):
    t = np.array([0.01, 0.5, 4.0])
    assert np.allclose(eval_I_reflected(s, t), special.iv(-s, t), rtol=1e-11)
    assert np.allclose(eval_I_reflected(s, t, scaled=True), special.ive(-s, t), rtol=1e-11)


def test_array_shapes_preserved():
    t = np.linspace(0.1, 2, 6).reshape(2, 3)
    for arr in bessel_ik(0.4, t):
        assert arr.shape == (2, 3)


def test_gamma_constants_half():
    c_s, c_hat, c_bar = gamma_constants(0.5)
    assert c_s == pytest.approx(-1.0, abs=1e-12)
    assert c_hat == pytest.approx(math.sqrt(math.pi / 2), rel=1e-12)
    assert c_bar == pytest.approx(1.2533141373155, rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(orders)
def test_gamma_constants_vs_scipy(s):
    c_s, c_hat, c_bar = gamma_constants(s)
    assert c_s == pytest.approx(-(2 ** (2 * s - 1)) * special.gamma(s) / special.gamma(1 - s), rel=1e-12)
    assert c_hat == pytest.approx(2 ** -s * special.gamma(1 - s), rel=1e-12)
    assert c_bar == pytest.approx(2 ** (s - 1) * special.gamma(s), rel=1e-12)


def test_paper_constants_half():
    pc = paper_constants(0.5)
    assert pc.c1 == pytest.approx(math.pi / 4, rel=1e-10)
    assert pc.c2 == pytest.approx(math.pi / 4, rel=1e-10)
    assert pc.c_sum == pytest.approx(math.pi / 2, rel=1e-10)
    assert pc.quad_error <= 1e-10


@pytest.mark.parametrize("s", [0.15, 0.3, 0.7])
def test_energy_integral_symmetry_and_closed_form(s):
    a, b = paper_constants(s), paper_constants(1 - s)
    assert a.c1 == pytest.approx(b.c2, rel=1e-9)
    assert a.c1 > 0 and a.c2 > 0
    # int t K_nu^2 = pi nu / (2 sin pi nu), checked independently via scipy quadrature
    from scipy.integrate import quad
    ref = quad(lambda t: t * special.kv(s, t) ** 2, 0, np.inf, limit=200)[0]
    assert a.c1 == pytest.approx(ref, rel=1e-7)
    assert a.c1 == pytest.approx(math.pi * s / (2 * math.sin(math.pi * s)), rel=1e-9)


def test_paper_constants_rejects_bad_tolerance():
    with pytest.raises(ValueError):
        paper_constants(0.5, quad_tol=0.1)


def test_identity_examples():
    rep = check_bessel_identities(0.3, [0.1, 1.0, 10.0])
    assert rep.max_deviation <= 1e-8
    assert check_bessel_identities(0.5, [1.0]).wronskian <= 1e-14
    rep = check_bessel_identities(0.7, [2.0])
    assert rep.weighted_derivative < 1e-8
    assert rep.weighted_derivative_sign == -1


def test_identity_grid_validation():
    with pytest.raises(ValueError):
        check_bessel_identities(0.3, [])
    with pytest.raises(ValueError):
        check_bessel_identities(0.3, [0.0, 1.0])
