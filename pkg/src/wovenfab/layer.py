"""SpongeCake slab lobes for a fiber microflake layer and their two-layer composition.

Optical thickness ``T`` stands for the product of flake density and slab
thickness (density fixed to 1). Lobe values are BSDF values in 1/sr. Each
layer carries its own slab normal, so a layer can be evaluated in the frame
of a tilted yarn while the caller decides reflection vs transmission from
the macroscopic normal.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import GrazingError
from .microflake import (GRAZING_EPS, HALF_VECTOR_EPS, Z_AXIS, _asggx_half_vector,
                         dot, fiber_ndf, fiber_sigma, lambda_slope, norm, normalize)

# Floor on |cos theta| when clamping instead of raising.
COS_CLAMP = 1e-4

G_TRANSMIT_FORMS = ("spongecake", "reflect_form")


@dataclass
class LayerParams:
    """One homogeneous fiber slab. Fields may be arrays that broadcast per pixel."""

    k_s: object
    alpha: object
    T: object
    t: object
    normal: object = field(default_factory=lambda: Z_AXIS.copy())

    def __post_init__(self):
        self.k_s = np.asarray(self.k_s, dtype=float)
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.T = np.asarray(self.T, dtype=float)
        self.t = normalize(self.t)
        self.normal = np.asarray(self.normal, dtype=float)


@dataclass
class LobeEval:
    reflect: np.ndarray
    transmit: np.ndarray

    def __add__(self, other):
        return LobeEval(self.reflect + other.reflect, self.transmit + other.transmit)


def _abs_cos(w, normal, clamp):
    c = np.abs(dot(w, normal))
    if clamp:
        return np.maximum(c, COS_CLAMP)
    if np.any(c <= GRAZING_EPS):
        raise GrazingError("direction is grazing with respect to the slab normal")
    return c


def _lam(w, p, clamp):
    return fiber_sigma(w, p.t, p.alpha) / _abs_cos(w, p.normal, clamp)


def _g_reflect(lam_i, lam_o, T):
    s = lam_i + lam_o
    return -np.expm1(-T * s) / s


def _g_transmit(lam_i, lam_o, T):
    # symmetric in (lam_i, lam_o); factor out the smaller exponent for stability
    d = np.abs(lam_i - lam_o)
    small = np.abs(T * d) < 1e-12
    safe_d = np.where(small, 1.0, d)
    ratio = np.where(small, T, -np.expm1(-T * d) / safe_d)
    return np.exp(-T * np.minimum(lam_i, lam_o)) * ratio


def attenuation(w, p, clamp=False):
    """Fraction of light crossing the slab along ``w`` unscattered: exp(-T Lambda(w))."""
    return np.exp(-p.T * _lam(w, p, clamp))


def _lambda_pair(wi, wo, S, normal):
    return lambda_slope(wi, S, normal), lambda_slope(wo, S, normal)


def g_reflect(wi, wo, T, S, normal=Z_AXIS):
    """Shadowing for the reflection configuration, (1 - e^{-T(Li+Lo)}) / (Li+Lo)."""
    li, lo = _lambda_pair(wi, wo, S, normal)
    return _g_reflect(li, lo, np.asarray(T, dtype=float))


def g_transmit(wi, wo, T, S, normal=Z_AXIS):
    """Shadowing for transmission, (e^{-T Lo} - e^{-T Li}) / (Li - Lo); T e^{-T L} at Li = Lo."""
    li, lo = _lambda_pair(wi, wo, S, normal)
    return _g_transmit(li, lo, np.asarray(T, dtype=float))


def _is_reflect(wi, wo, p, reflect):
    if reflect is None:
        return dot(wi, p.normal) * dot(wo, p.normal) > 0.0
    return np.asarray(reflect, dtype=bool)


def _split(value, reflect, k_s):
    value = value[..., None] * k_s
    zero = np.zeros_like(value)
    r = reflect[..., None]
    return LobeEval(np.where(r, value, zero), np.where(r, zero, value))


def single_scatter(wi, wo, p, reflect=None, clamp=False):
    """SGGX single scattering, k_s D(h) G / (4 |cos_i| |cos_o|).

    ``reflect`` overrides the hemisphere test (boolean array); by default the
    configuration is read off the layer's own slab normal.
    """
    wi = np.asarray(wi, dtype=float)
    wo = np.asarray(wo, dtype=float)
    refl = _is_reflect(wi, wo, p, reflect)
    ci, co = _abs_cos(wi, p.normal, clamp), _abs_cos(wo, p.normal, clamp)
    li = fiber_sigma(wi, p.t, p.alpha) / ci
    lo = fiber_sigma(wo, p.t, p.alpha) / co
    G = np.where(refl, _g_reflect(li, lo, p.T), _g_transmit(li, lo, p.T))

    h = wi + wo
    length = norm(h)
    ok = length > HALF_VECTOR_EPS
    h = h / np.where(ok, length, 1.0)[..., None]
    D = np.where(ok, fiber_ndf(h, p.t, p.alpha), 0.0)
    return _split(D * G / (4.0 * ci * co), refl, p.k_s)


def multiple_scatter(wi, wo, p, reflect=None, clamp=False, g_transmit_form="spongecake"):
    """ASGGX multiple-scattering lobe, k_s^m D_m(h') G_m / (2 |cos_i| |cos_o|).

    ``p`` holds the multiple-scattering albedo, roughness and thickness.
    ``g_transmit_form="reflect_form"`` reuses the reflection shadowing for
    transmission instead of the SpongeCake transmission form.
    """
    if g_transmit_form not in G_TRANSMIT_FORMS:
        raise ValueError(f"unknown g_transmit_form {g_transmit_form!r}")
    wi = np.asarray(wi, dtype=float)
    wo = np.asarray(wo, dtype=float)
    refl = _is_reflect(wi, wo, p, reflect)
    ci, co = _abs_cos(wi, p.normal, clamp), _abs_cos(wo, p.normal, clamp)
    li = fiber_sigma(wi, p.t, p.alpha) / ci
    lo = fiber_sigma(wo, p.t, p.alpha) / co
    g_t = _g_reflect(li, lo, p.T) if g_transmit_form == "reflect_form" else _g_transmit(li, lo, p.T)
    G = np.where(refl, _g_reflect(li, lo, p.T), g_t)

    h, ok = _asggx_half_vector(wi, wo, p.t)
    D = np.where(ok, fiber_ndf(h, p.t, p.alpha), 0.0)
    return _split(D * G / (2.0 * ci * co), refl, p.k_s)


def compose(f_top, f_bot, a_top_i, a_top_o, a_bot_i, a_bot_o, wi_front):
    """Two-layer combination of per-layer lobes with single crossings only.

    Light arriving from the front (``wi_front``) meets the top layer first:
      reflect  = f_top,R + A_top(wi) A_top(wo) f_bot,R
      transmit = f_top,T A_bot(wo) + A_top(wi) f_bot,T
    From the back the roles of the two layers swap.
    """
    front = np.asarray(wi_front, dtype=bool)[..., None]
    a_ti, a_to = a_top_i[..., None], a_top_o[..., None]
    a_bi, a_bo = a_bot_i[..., None], a_bot_o[..., None]
    refl_front = f_top.reflect + a_ti * a_to * f_bot.reflect
    refl_back = f_bot.reflect + a_bi * a_bo * f_top.reflect
    trans_front = f_top.transmit * a_bo + a_ti * f_bot.transmit
    trans_back = a_bi * f_top.transmit + f_bot.transmit * a_to
    return LobeEval(np.where(front, refl_front, refl_back),
                    np.where(front, trans_front, trans_back))


def two_layer_eval(wi, wo, top, bottom, reflect=None, wi_front=None, clamp=False,
                   g_transmit_form="spongecake"):
    """Single plus multiple scattering of a two-layer stack.

    ``top`` and ``bottom`` are ``(single, multiple)`` pairs of LayerParams.
    Crossing attenuation uses each layer's single-scattering thickness and
    roughness. ``wi_front`` defaults to the side of ``wi`` relative to the top
    layer's slab normal.
    """
    top_s, top_m = top
    bot_s, bot_m = bottom
    wi = np.asarray(wi, dtype=float)
    wo = np.asarray(wo, dtype=float)
    if wi_front is None:
        wi_front = dot(wi, top_s.normal) > 0.0
    kw = dict(reflect=reflect, clamp=clamp)
    a = (attenuation(wi, top_s, clamp), attenuation(wo, top_s, clamp),
         attenuation(wi, bot_s, clamp), attenuation(wo, bot_s, clamp))
    single = compose(single_scatter(wi, wo, top_s, **kw), single_scatter(wi, wo, bot_s, **kw),
                     *a, wi_front)
    multi = compose(multiple_scatter(wi, wo, top_m, g_transmit_form=g_transmit_form, **kw),
                    multiple_scatter(wi, wo, bot_m, g_transmit_form=g_transmit_form, **kw),
                    *a, wi_front)
    return single + multi
