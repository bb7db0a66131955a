import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import BUMP_SPEC, bump_gamma
from fracrecon.ansatz import admissible_frequencies, make_cutoff
from fracrecon.extsolver import ConductivityField, ResolutionSpec, build_domain, field_from_spec
from fracrecon.reconstruct import (
    assemble_tensor,
    fit_limit,
    ntd_schedule,
    polarization_directions,
    probe_direction,
    quadratic_form_from_limit,
    recover_metric_from_weighted,
    stability_gap,
    target_limit,
    weighted_form_from_metric,
)
from fracrecon.specfun import paper_constants

FAST = (16.0, 32.0, 64.0)


def _q_dict(G, dirs):
    return {tuple(a): float(a @ G @ a) for a in dirs}


def _spd(draw_floats):
    a, b, c = draw_floats
    L = np.array([[1.0 + abs(a), 0.0], [b, 1.0 + abs(c)]])
    return L @ L.T


spd2 = st.tuples(*[st.floats(-2.0, 2.0)] * 3).map(_spd)


# ---------------------------------------------------------------- limits

def test_quadratic_form_examples():
    pc = paper_constants(0.5)
    assert quadratic_form_from_limit(math.pi / 2 * math.sqrt(2), 0.5, "dtn") == pytest.approx(2.0, rel=1e-10)
    assert quadratic_form_from_limit(pc.c_sum, 0.5, "dtn") == pytest.approx(1.0, rel=1e-12)
    assert quadratic_form_from_limit(pc.c_sum / pc.c_hat_s ** 2, 0.5, "ntd") == pytest.approx(1.0, rel=1e-12)
    for bad in (0.0, -1.0, float("nan")):
        with pytest.raises(ValueError):
            quadratic_form_from_limit(bad, 0.5, "dtn")
    with pytest.raises(ValueError):
        quadratic_form_from_limit(1.0, 0.5, "both")


@pytest.mark.parametrize("mode", ["dtn", "ntd"])
@pytest.mark.parametrize("s", [0.2, 0.5, 0.85])
def test_target_limit_inverts(mode, s):
    pc = paper_constants(s)
    for q in (0.3, 1.0, 7.5):
        lim = target_limit(s, mode, q, pc)
        assert quadratic_form_from_limit(lim, s, mode, pc) == pytest.approx(q, rel=1e-12)


# ---------------------------------------------------------------- fitting

def test_fit_limit_models_recover_exact_data():
    N = np.array([16.0, 32.0, 64.0, 128.0])
    a, b = fit_limit(N, 2.0 + 3.0 / N)[:2]
    assert a == pytest.approx(2.0, rel=1e-12) and b[0] == pytest.approx(3.0, rel=1e-10)
    a, b, rms = fit_limit(N, 2.0 - 1.5 / np.sqrt(N), "sqrt")
    assert a == pytest.approx(2.0, rel=1e-12) and rms < 1e-12
    a, b, _ = fit_limit(N, 1.0 + 1.0 / N - 4.0 / N ** 2, "quadratic")
    assert a == pytest.approx(1.0, rel=1e-12) and b[1] == pytest.approx(-4.0, rel=1e-8)


def test_fit_limit_validation():
    with pytest.raises(ValueError, match="unknown fit model"):
        fit_limit([1, 2, 3], [1, 1, 1], "cubic")
    with pytest.raises(ValueError, match="needs at least 4"):
        fit_limit([1, 2, 3], [1, 1, 1], "quadratic")


def test_ntd_schedule_admissible_and_near_targets():
    eta = make_cutoff("mollified_box", 0.1, 2)
    sched = ntd_schedule(eta, np.array([1.0, 0.0]))
    cands = admissible_frequencies(eta, [1.0, 0.0], 40, ceiling=4000.0)
    assert len(sched) == 3 and sched == sorted(sched)
    for N, target in zip(sched, (320.0, 640.0, 1280.0)):
        assert any(abs(N - c) <= 1e-9 * c for c in cands)
        assert abs(math.log(N / target)) < 0.3


def test_probe_schedule_validation():
    F = ConductivityField.constant_field(np.eye(2))
    with pytest.raises(ValueError, match="strictly increasing"):
        probe_direction(F, None, 0.5, [0, 0], [1, 0], [32.0, 16.0, 64.0])
    with pytest.raises(ValueError, match="strictly increasing"):
        probe_direction(F, None, 0.5, [0, 0], [1, 0], [16.0, 32.0])
    with pytest.raises(ValueError, match="unknown mode"):
        probe_direction(F, None, 0.5, [0, 0], [1, 0], FAST, "robin")


def test_fixed_grid_caps_schedule():
    F = ConductivityField.constant_field(np.eye(2))
    g = build_domain(F, 32.0, s=0.5)
    ser = probe_direction(F, g, 0.5, [0, 0], [1, 0], [8.0, 16.0, 32.0, 1e4])
    assert ser.schedule == [8.0, 16.0, 32.0]
    assert ser.schedule_cap is not None and ser.notes and "capped" in ser.notes[0]
    with pytest.raises(ValueError, match="fewer than 3"):
        probe_direction(F, g, 0.5, [0, 0], [1, 0], [16.0, 1e4, 2e4])


# ---------------------------------------------------------------- assembly

def test_assemble_examples():
    G = np.array([[2.0, 1.0], [1.0, 3.0]])
    rec = assemble_tensor([0, 0], _q_dict(G, polarization_directions(2)))
    assert np.allclose(rec.matrix, G, atol=1e-14) and rec.spd
    assert rec.q_values["(0.707106781187,0.707106781187)"] == pytest.approx(3.5)
    ident = assemble_tensor([0, 0], {"(1,0)": 1.0, "(0,1)": 1.0, "(0.707106781187,0.707106781187)": 1.0})
    assert np.allclose(ident.matrix, np.eye(2), atol=1e-12)
    assert ident.condition == pytest.approx(1.0)


def test_assemble_three_dimensional():
    G = np.array([[2.0, 0.2, -0.1], [0.2, 1.0, 0.3], [-0.1, 0.3, 1.5]])
    dirs = polarization_directions(3)
    assert len(dirs) == 6
    rec = assemble_tensor(np.zeros(3), _q_dict(G, dirs))
    assert np.allclose(rec.matrix, G, atol=1e-14)


def test_assemble_rejections():
    with pytest.raises(ValueError, match=r"missing directions: \(0,1\)"):
        assemble_tensor([0, 0], {(1.0, 0.0): 1.0, (1.0, 1.0): 1.0})
    with pytest.raises(ValueError, match="positive"):
        assemble_tensor([0, 0], _q_dict(-np.eye(2), polarization_directions(2)))
    with pytest.raises(ValueError, match="unknown assembly mode"):
        assemble_tensor([0, 0], {}, mode="svd")
    with pytest.raises(ValueError, match="do not determine"):
        assemble_tensor([0, 0], {(1.0, 0.0): 1.0, (2.0, 0.0): 1.0}, mode="lstsq")


def test_non_spd_result_warns():
    q = {(1.0, 0.0): 1.0, (0.0, 1.0): 1.0, (1.0, 1.0): 3.0}
    with pytest.warns(RuntimeWarning, match="not positive definite"):
        rec = assemble_tensor([0, 0], q)
    assert not rec.spd and rec.condition == float("inf")


def test_lstsq_uses_extra_directions():
    G = np.array([[1.5, -0.4], [-0.4, 0.8]])
    dirs = polarization_directions(2) + [np.array([1.0, -1.0]) / math.sqrt(2), np.array([0.6, 0.8])]
    rec = assemble_tensor([0, 0], _q_dict(G, dirs), mode="lstsq")
    assert np.allclose(rec.matrix, G, atol=1e-12)
    # residuals are evaluated at the 12-digit string keys
    assert max(abs(v) for v in rec.residuals.values()) < 1e-10


@settings(max_examples=50, deadline=None)
@given(spd2, st.floats(0.0, 2 * math.pi))
def test_assembly_is_frame_invariant(G, theta):
    # recovering from a rotated direction set gives the same matrix
    R = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    dirs = [R @ a for a in polarization_directions(2)]
    rec = assemble_tensor([0, 0], _q_dict(G, dirs), mode="lstsq")
    assert np.allclose(rec.matrix, G, rtol=1e-9, atol=1e-9 * np.abs(G).max())


# ---------------------------------------------------------------- weighted variant

@settings(max_examples=50, deadline=None)
@given(spd2, st.floats(0.05, 0.95))
def test_metric_round_trip(g, s):
    B = weighted_form_from_metric(g, s)
    assert np.allclose(recover_metric_from_weighted(B, s), g, rtol=1e-8, atol=1e-10 * np.abs(g).max())


def test_metric_cannot_be_recovered_when_n_is_2s():
    with pytest.raises(ValueError, match="n = 2s"):
        recover_metric_from_weighted(np.array([[2.0]]), 0.5)
    with pytest.raises(ValueError, match="does not match"):
        recover_metric_from_weighted(np.eye(2), 0.5, n=3)
    with pytest.raises(ValueError, match="positive definite"):
        weighted_form_from_metric(np.diag([1.0, -1.0]), 0.5)


@pytest.mark.parametrize("kappa", [0.5, 2.0])
def test_weighted_constant_field(kappa):
    s = 0.5
    F = ConductivityField.constant_field(np.eye(2), kappa)
    ser = probe_direction(F, None, s, [0, 0], [1, 0], FAST)
    q = quadratic_form_from_limit(ser.limit, s, "dtn")
    assert q == pytest.approx(kappa ** (1 / s), rel=1e-2)


# ---------------------------------------------------------------- probing

def test_limit_monotone_in_scaling():
    s = 0.4
    limits = [probe_direction(ConductivityField.constant_field(lam * np.eye(2)), None, s,
                              [0, 0], [1, 0], FAST).limit for lam in (0.5, 1.0, 2.0, 4.0)]
    assert all(b > a for a, b in zip(limits, limits[1:]))
    assert limits[2] / limits[1] == pytest.approx(2 ** s, rel=1e-6)


def test_dtn_and_ntd_agree():
    s = 0.5
    F = ConductivityField.constant_field(np.diag([2.0, 1.0]))
    for alpha in ([1.0, 0.0], [1.0, 1.0]):
        a = np.asarray(alpha) / np.linalg.norm(alpha)
        qd = quadratic_form_from_limit(probe_direction(F, None, s, [0, 0], a, FAST).limit, s, "dtn")
        qn = quadratic_form_from_limit(probe_direction(F, None, s, [0, 0], a, mode="ntd").limit, s, "ntd")
        assert qd == pytest.approx(qn, rel=0.05)
        assert qd == pytest.approx(a @ np.diag([2.0, 1.0]) @ a, rel=0.02)


def test_series_record():
    F = ConductivityField.constant_field(np.eye(2))
    ser = probe_direction(F, None, 0.5, [0, 0], [3, 4], FAST)
    d = ser.as_dict()
    assert d["alpha"] == pytest.approx([0.6, 0.8])
    assert len(d["raw"]) == len(d["scaled"]) == len(d["grids"]) == 3
    assert d["limit"] == ser.limit


# ---------------------------------------------------------------- stability

def _two_bumps(centre, width, amplitude=0.3):
    centre = np.asarray(centre, dtype=float)

    def gamma(x):
        extra = bump_gamma(np.asarray(x) - centre, width, amplitude, ((1.0, 0.0), (0.0, 1.0))) - np.eye(2)
        return bump_gamma(x) + extra

    return ConductivityField(2, gamma, lambda x: np.ones(np.shape(x)[:-1]))


def test_stability_identical_fields():
    F = field_from_spec(BUMP_SPEC)
    rep = stability_gap(F, F, None, 0.5, [([0, 0], [1, 0], 16.0)])
    assert rep.exact_equality and rep.proxy == 0.0 and rep.ratio is None


def test_stability_perturbation_outside_box():
    F = field_from_spec(BUMP_SPEC)
    G = _two_bumps([5.0, 5.0], 0.5)
    rep = stability_gap(F, G, None, 0.5, [([0, 0], [1, 0], 16.0), ([0, 0], [0, 1], 16.0)])
    assert rep.proxy == 0.0 and rep.gamma_gap == 0.0 and rep.exact_equality


def test_stability_perturbation_inside_box_outside_probes():
    # probe balls at the origin, bump of radius 0.1 at (0.4, 0.4): gamma agrees
    # at the probe points but the pairings feel the far-field tail of phi_N
    F = field_from_spec(BUMP_SPEC)
    G = _two_bumps([0.4, 0.4], 0.1)
    N = 16.0
    g = build_domain(F, N, ResolutionSpec(), s=0.5)
    assert g.tangential.half_width > 0.5
    rep = stability_gap(F, G, None, 0.5, [([0, 0], [1, 0], N)])
    assert rep.gamma_gap == 0.0
    assert 0.0 < rep.proxy < 1e-2
    assert rep.ratio == 0.0 and not rep.exact_equality


def test_stability_gap_tracks_gamma_gap():
    s = 0.5
    F = ConductivityField.constant_field(np.eye(2))
    probes = [([0, 0], [1, 0], 32.0)]
    gaps = [stability_gap(F, ConductivityField.constant_field((1 + d) * np.eye(2)), None, s, probes)
            for d in (0.05, 0.1)]
    assert gaps[1].gamma_gap == pytest.approx(0.1)
    assert gaps[1].proxy > gaps[0].proxy > 0
    assert 0.5 < gaps[0].ratio < 5.0
    with pytest.raises(ValueError):
        stability_gap(F, ConductivityField.constant_field(np.eye(1)), None, s, probes)
