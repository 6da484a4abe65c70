import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wovenfab.errors import GrazingError
from wovenfab.layer import (LayerParams, LobeEval, attenuation, compose, g_reflect, g_transmit,
                            multiple_scatter, single_scatter, two_layer_eval)
from wovenfab.microflake import fiber_ndf, fiber_sggx, fiber_sigma, normalize, sphere_grid

Z = np.array([0.0, 0.0, 1.0])
T_AXIS = normalize([1.0, 0.3, 0.0])


def upper(theta, phi=0.0):
    return np.array([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)])


hemi = st.tuples(st.floats(0.05, 1.45), st.floats(0, 2 * np.pi))
unit = st.tuples(*[st.floats(-1, 1)] * 3).filter(lambda v: 0.2 < np.linalg.norm(v)).map(normalize)


def test_g_reflect_closed_form():
    S = fiber_sggx(0.5, T_AXIS)
    wi, wo = upper(0.3), upper(0.9, 2.0)
    li = np.sqrt(wi @ S.S @ wi) / wi[2]
    lo = np.sqrt(wo @ S.S @ wo) / wo[2]
    T = 1.7
    assert g_reflect(wi, wo, T, S) == pytest.approx((1 - np.exp(-T * (li + lo))) / (li + lo))


def test_g_transmit_closed_form_and_limit():
    S = fiber_sggx(0.5, T_AXIS)
    wi, wo = upper(0.3), -upper(0.9, 2.0)
    li = np.sqrt(wi @ S.S @ wi) / abs(wi[2])
    lo = np.sqrt(wo @ S.S @ wo) / abs(wo[2])
    T = 1.7
    expected = (np.exp(-T * lo) - np.exp(-T * li)) / (li - lo)
    assert g_transmit(wi, wo, T, S) == pytest.approx(expected, rel=1e-12)
    # equal slopes: limit T exp(-T Lambda)
    assert g_transmit(wi, -wi, T, S) == pytest.approx(T * np.exp(-T * li), rel=1e-12)


@given(st.floats(0.1, 5.0), st.floats(0.1, 20.0), st.floats(-1e-7, 1e-7))
def test_g_transmit_continuous_across_equal_slopes(T, lam, delta):
    from wovenfab.layer import _g_transmit
    a = _g_transmit(np.array(lam + delta), np.array(lam), T)
    assert a == pytest.approx(T * np.exp(-T * lam), rel=1e-5)


@given(st.floats(0.1, 30.0), st.floats(0.1, 30.0), st.floats(0.0, 10.0))
def test_g_transmit_symmetric_and_bounded(li, lo, T):
    from wovenfab.layer import _g_reflect, _g_transmit
    a, b = _g_transmit(np.array(li), np.array(lo), T), _g_transmit(np.array(lo), np.array(li), T)
    assert a == pytest.approx(b, rel=1e-12, abs=1e-300)
    assert 0.0 <= a <= T + 1e-12
    assert 0.0 <= _g_reflect(np.array(li), np.array(lo), T) <= T + 1e-12


def test_zero_thickness_gives_no_scattering():
    p = LayerParams(np.ones(3), 0.5, 0.0, T_AXIS)
    v = single_scatter(upper(0.3), upper(0.5, 1.0), p)
    assert np.all(v.reflect == 0) and np.all(v.transmit == 0)
    assert attenuation(upper(0.3), p) == 1.0


def test_single_scatter_formula():
    p = LayerParams([0.2, 0.5, 0.9], 0.4, 1.3, T_AXIS)
    wi, wo = upper(0.4, 0.1), upper(0.7, 2.5)
    S = fiber_sggx(0.4, T_AXIS)
    h = normalize(wi + wo)
    expected = fiber_ndf(h, T_AXIS, 0.4) * g_reflect(wi, wo, 1.3, S) / (4 * wi[2] * wo[2])
    v = single_scatter(wi, wo, p)
    assert v.reflect == pytest.approx(expected * np.array([0.2, 0.5, 0.9]))
    assert np.all(v.transmit == 0)


def test_single_scatter_semi_infinite_albedo_bounded():
    # k_s = 1: directional albedo of the single-scattering lobe cannot exceed 1
    p = LayerParams(np.ones(3), 0.5, 50.0, T_AXIS)
    w, weights = sphere_grid(256, 512)
    wi = upper(0.5, 0.3)
    v = single_scatter(np.broadcast_to(wi, w.shape), w, p, clamp=True)
    albedo = np.sum((v.reflect + v.transmit)[..., 0] * np.abs(w[..., 2]) * weights)
    assert 0.0 < albedo <= 1.0


@settings(max_examples=150)
@given(hemi, hemi, st.booleans(), st.floats(0.05, 1.0), st.floats(0.05, 5.0), unit)
def test_lobes_are_reciprocal(a, b, flip, alpha, T, t):
    wi = upper(*a)
    wo = upper(*b) * (-1 if flip else 1)
    p = LayerParams(np.ones(3), alpha, T, t)
    for lobe in (single_scatter, multiple_scatter):
        f, g = lobe(wi, wo, p), lobe(wo, wi, p)
        assert (f.reflect + f.transmit)[0] == pytest.approx((g.reflect + g.transmit)[0], rel=1e-9, abs=1e-300)


def test_multiple_scatter_depends_on_fiber_polar_angles_only():
    # spinning wo about t leaves D(h') unchanged; only G and the cosine move
    t = np.array([1.0, 0.0, 0.0])
    S = fiber_sggx(0.3, t)
    p = LayerParams(np.ones(3), 0.3, 1.0, t)
    wi, wo = upper(0.5, 0.4), upper(0.9, 2.2)
    c, s = np.cos(0.4), np.sin(0.4)
    spun = wo * c + np.cross(t, wo) * s + t * np.dot(t, wo) * (1 - c)
    assert spun[2] > 0
    a = multiple_scatter(wi, wo, p).reflect[0]
    b = multiple_scatter(wi, spun, p).reflect[0]
    da = a * 2 * wi[2] * wo[2] / g_reflect(wi, wo, 1.0, S)
    db = b * 2 * wi[2] * spun[2] / g_reflect(wi, spun, 1.0, S)
    assert da == pytest.approx(db, rel=1e-10)


def test_g_transmit_form_switch():
    p = LayerParams(np.ones(3), 0.5, 1.0, T_AXIS)
    wi, wo = upper(0.3), -upper(0.6, 1.0)
    a = multiple_scatter(wi, wo, p).transmit[0]
    b = multiple_scatter(wi, wo, p, g_transmit_form="reflect_form").transmit[0]
    S = fiber_sggx(0.5, T_AXIS)
    assert a / b == pytest.approx(g_transmit(wi, wo, 1.0, S) / g_reflect(wi, wo, 1.0, S))
    with pytest.raises(ValueError):
        multiple_scatter(wi, wo, p, g_transmit_form="nope")


def test_grazing_raises_unless_clamped():
    p = LayerParams(np.ones(3), 0.5, 1.0, T_AXIS)
    graze = np.array([0.0, 1.0, 0.0])
    with pytest.raises(GrazingError):
        single_scatter(graze, upper(0.2), p)
    v = single_scatter(graze, upper(0.2), p, clamp=True)
    assert np.all(np.isfinite(v.reflect))


def test_compose_front_and_back():
    f_top = LobeEval(np.array([[1.0, 1.0, 1.0]]), np.array([[2.0, 2.0, 2.0]]))
    f_bot = LobeEval(np.array([[3.0, 3.0, 3.0]]), np.array([[5.0, 5.0, 5.0]]))
    a = [np.array([0.5]), np.array([0.25]), np.array([0.8]), np.array([0.1])]
    front = compose(f_top, f_bot, *a, np.array([True]))
    assert front.reflect[0, 0] == pytest.approx(1 + 0.5 * 0.25 * 3)
    assert front.transmit[0, 0] == pytest.approx(2 * 0.1 + 0.5 * 5)
    back = compose(f_top, f_bot, *a, np.array([False]))
    assert back.reflect[0, 0] == pytest.approx(3 + 0.8 * 0.1 * 1)
    assert back.transmit[0, 0] == pytest.approx(0.8 * 2 + 5 * 0.25)


def test_two_layer_with_empty_bottom_is_top_only():
    top = (LayerParams([0.7] * 3, 0.4, 1.2, T_AXIS), LayerParams([0.5] * 3, 0.6, 0.8, T_AXIS))
    bottom = (LayerParams([0.9] * 3, 0.3, 0.0, [0, 1, 0]), LayerParams([0.9] * 3, 0.3, 0.0, [0, 1, 0]))
    wi, wo = upper(0.3, 0.5), upper(0.6, 2.0)
    both = two_layer_eval(wi, wo, top, bottom)
    alone = single_scatter(wi, wo, top[0]) + multiple_scatter(wi, wo, top[1])
    assert both.reflect == pytest.approx(alone.reflect)
    wt = -wo
    both = two_layer_eval(wi, wt, top, bottom)
    alone = single_scatter(wi, wt, top[0]) + multiple_scatter(wi, wt, top[1])
    assert both.transmit == pytest.approx(alone.transmit)


def test_thick_top_layer_hides_bottom():
    top = (LayerParams([0.7] * 3, 0.4, 1e3, T_AXIS), LayerParams([0.5] * 3, 0.6, 1e3, T_AXIS))
    bottom = (LayerParams([0.9] * 3, 0.3, 1.0, [0, 1, 0]), LayerParams([0.9] * 3, 0.3, 1.0, [0, 1, 0]))
    wi, wo = upper(0.0), -upper(0.0)
    v = two_layer_eval(wi, wo, top, bottom)
    assert np.all(v.transmit < 1e-12)
