"""Full fabric BSDF over the procedural weave, and the fabric parameter container."""
import json
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ConfigError, ParameterError
from .layer import COS_CLAMP, LayerParams, two_layer_eval
from .microflake import Z_AXIS, dot
from .weave import WARP, WEFT, YarnParams, pattern_grid, tension_thickness

YARN_FIELDS = ("density", "alpha_s", "alpha_m", "T_s", "T_m", "k_s_s", "beta", "xi", "twist")
RGB_FIELDS = ("k_s_s_weft", "k_s_s_warp", "k_d_r", "k_d_t")


@dataclass
class FabricParams:
    pattern: int = 0
    weft: YarnParams = field(default_factory=YarnParams)
    warp: YarnParams = field(default_factory=YarnParams)
    k_d_r: np.ndarray = field(default_factory=lambda: np.full(3, 0.3))
    k_d_t: np.ndarray = field(default_factory=lambda: np.full(3, 0.3))
    w: float = 0.5
    w_m: float = 1.0
    noise: float = 0.0

    def __post_init__(self):
        self.k_d_r = np.asarray(self.k_d_r, dtype=float).reshape(3)
        self.k_d_t = np.asarray(self.k_d_t, dtype=float).reshape(3)

    @property
    def s_min(self):
        return pattern_grid(self.pattern).s_min

    def yarn(self, kind):
        return self.weft if kind == WEFT else self.warp

    def k_s_m(self, kind):
        """Multiple-scattering albedo (k_s^s)^(1/w_m), derived on demand."""
        return self.yarn(kind).k_s_s ** (1.0 / self.w_m)

    def copy(self):
        return FabricParams.from_dict(self.to_dict())

    def validate(self):
        pattern_grid(self.pattern)
        for kind, y in (("weft", self.weft), ("warp", self.warp)):
            checks = {
                "density": y.density > 0,
                "alpha_s": 0 < y.alpha_s <= 1,
                "alpha_m": 0 < y.alpha_m <= 1,
                "T_s": y.T_s >= 0,
                "T_m": y.T_m >= 0,
                "k_s_s": np.all((y.k_s_s >= 0) & (y.k_s_s <= 1)),
                "beta": y.beta >= 0,
                "xi": 0 < y.xi <= 1,
                "twist": -90 <= y.twist <= 90,
            }
            for name, ok in checks.items():
                if not ok:
                    raise ParameterError(f"{name}_{kind} out of range: {getattr(y, name)}")
        for name in ("k_d_r", "k_d_t"):
            v = getattr(self, name)
            if not np.all((v >= 0) & (v <= 1)):
                raise ParameterError(f"{name} out of range: {v}")
        if not 0 <= self.w <= 1:
            raise ParameterError(f"w out of range: {self.w}")
        if not self.w_m > 0:
            raise ParameterError(f"w_m must be positive: {self.w_m}")
        if self.noise < 0:
            raise ParameterError("noise must be nonnegative")
        return self

    def to_dict(self):
        out = {"pattern": int(self.pattern)}
        for kind in ("weft", "warp"):
            y = getattr(self, kind)
            for name in YARN_FIELDS:
                v = getattr(y, name)
                out[f"{name}_{kind}"] = [float(c) for c in v] if name == "k_s_s" else float(v)
        out["k_d_r"] = [float(c) for c in self.k_d_r]
        out["k_d_t"] = [float(c) for c in self.k_d_t]
        out["w"] = float(self.w)
        out["w_m"] = float(self.w_m)
        out["noise"] = float(self.noise)
        return out

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("<root>", "fabric parameters must be a JSON object")

        def get(name):
            if name not in d:
                raise ConfigError(name)
            v = d[name]
            try:
                if name in RGB_FIELDS:
                    arr = np.asarray(v, dtype=float)
                    if arr.shape != (3,):
                        raise ValueError
                    return arr
                if name == "pattern":
                    if isinstance(v, bool) or int(v) != v:
                        raise ValueError
                    return int(v)
                if isinstance(v, bool):
                    raise ValueError
                return float(v)
            except (TypeError, ValueError):
                raise ConfigError(name, f"malformed value for field '{name}': {v!r}") from None

        yarns = {}
        for kind in ("weft", "warp"):
            yarns[kind] = YarnParams(**{n: get(f"{n}_{kind}") for n in YARN_FIELDS})
        p = cls(pattern=get("pattern"), weft=yarns["weft"], warp=yarns["warp"],
                k_d_r=get("k_d_r"), k_d_t=get("k_d_t"), w=get("w"), w_m=get("w_m"),
                noise=float(d.get("noise", 0.0)))
        try:
            p.validate()
        except ParameterError as e:
            name = str(e).split(" ")[0]
            raise ConfigError(name, str(e)) from None
        return p

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as e:
                raise ConfigError("<json>", f"{path}: line {e.lineno}: {e.msg}") from None
        return cls.from_dict(d)


def sample_params(rng):
    """Random fabric drawn from the training-set distributions."""
    rng = np.random.default_rng(rng)
    pattern = int(rng.integers(0, 5))
    return sample_params_for_pattern(rng, pattern)


def sample_params_for_pattern(rng, pattern):
    rng = np.random.default_rng(rng)
    name = pattern_grid(pattern).name
    twist = -30.0 if name.startswith("twill") else 0.0

    def yarn():
        return YarnParams(
            density=rng.uniform(45.0, 335.0),
            alpha_s=rng.uniform(0.1, 1.0) ** 2,
            alpha_m=rng.uniform(0.1, 1.0) ** 2,
            T_s=rng.uniform(0.1, 5.0),
            T_m=rng.uniform(0.1, 5.0),
            k_s_s=rng.uniform(0.0, 1.0, 3),
            beta=rng.uniform(0.1, 2.0),
            xi=rng.uniform(0.1, 1.0),
            twist=twist,
        )

    weft, warp = yarn(), yarn()
    return FabricParams(pattern=int(pattern), weft=weft, warp=warp,
                        k_d_r=rng.uniform(0.0, 1.0, 3), k_d_t=rng.uniform(0.0, 1.0, 3),
                        w=rng.uniform(0.0, 1.0), w_m=rng.uniform(0.1, 2.0), noise=0.0)


@dataclass
class BsdfValue:
    reflect: np.ndarray
    transmit: np.ndarray
    delta_transmit: np.ndarray


def _pos(x):
    return np.maximum(x, 0.0)


def _front_facing(wi):
    """Mirror back-side directions onto the front so diffuse cosines stay meaningful."""
    wi = np.array(wi, dtype=float)
    wi[..., 2] = np.abs(wi[..., 2])
    return wi


def diffuse_reflect(wi, wo, sp, p):
    wi = _front_facing(np.broadcast_to(wi, sp.n1.shape))
    cos_m = np.maximum(dot(wi, Z_AXIS), COS_CLAMP)
    shade = _pos(dot(wi, sp.n1)) / (np.pi * cos_m)
    return (p.w * shade)[..., None] * p.k_d_r + (1.0 - p.w) * p.k_d_r / np.pi


def diffuse_transmit(wi, wo, sp, p):
    """Product of yarn cosines; with a single covering yarn only its cosine enters."""
    wi = _front_facing(np.broadcast_to(wi, sp.n1.shape))
    cos_m = np.maximum(dot(wi, Z_AXIS), COS_CLAMP)
    has2 = getattr(sp, "has2", True)
    second = np.where(has2, _pos(dot(wi, sp.n2)), 1.0)
    shade = _pos(dot(wi, sp.n1)) * second / (np.pi * cos_m)
    return (p.w * shade)[..., None] * p.k_d_t + (1.0 - p.w) * p.k_d_t / np.pi


def _per_texel(top_is_weft, weft_value, warp_value):
    weft_value = np.asarray(weft_value, dtype=float)
    warp_value = np.asarray(warp_value, dtype=float)
    sel = top_is_weft[..., None] if weft_value.ndim == 1 else top_is_weft
    return np.where(sel, weft_value, warp_value)


def layer_stack(sp, p):
    """Per-texel (single, multiple) LayerParams for the upper and lower yarn."""
    s_min = p.s_min
    first_weft = sp.top == WEFT
    layers = []
    for first, n, t, mu, scale, present in (
            (first_weft, sp.n1, sp.t1, sp.mu1, sp.ks_scale1, ~sp.gap),
            (~first_weft, sp.n2, sp.t2, sp.mu2, sp.ks_scale2, sp.has2)):
        def pick(name):
            return _per_texel(first, getattr(p.weft, name), getattr(p.warp, name))
        thick = tension_thickness(1.0, np.clip(mu, 0.0, 1.0), s_min) * present
        ks = np.clip(pick("k_s_s") * scale[..., None], 0.0, 1.0)
        ks_m = ks ** (1.0 / p.w_m)
        single = LayerParams(ks, pick("alpha_s"), pick("T_s") * thick, t, n)
        multi = LayerParams(ks_m, pick("alpha_m"), pick("T_m") * thick, t, n)
        layers.append((single, multi))
    return layers


def eval_bsdf(wi, wo, sp, p, g_transmit_form="spongecake"):
    """f = f_s + f_m + f_d over the macro surface; gaps only flag delta transmission.

    Reflection vs transmission and the side of incidence are decided against the
    macroscopic normal; the slab lobes use each yarn's normal, with |cos| clamped.
    """
    shape = sp.n1.shape
    wi = np.broadcast_to(np.asarray(wi, dtype=float), shape)
    wo = np.broadcast_to(np.asarray(wo, dtype=float), shape)
    ci, co = wi[..., 2], wo[..., 2]
    reflect = ci * co > 0.0
    top, bottom = layer_stack(sp, p)
    lobes = two_layer_eval(wi, wo, top, bottom, reflect=reflect, wi_front=ci > 0.0,
                           clamp=True, g_transmit_form=g_transmit_form)
    open_ = ~sp.gap
    r_mask = (reflect & open_)[..., None]
    t_mask = (~reflect & open_)[..., None]
    fr = np.where(r_mask, lobes.reflect + diffuse_reflect(wi, wo, sp, p), 0.0)
    ft = np.where(t_mask, lobes.transmit + diffuse_transmit(wi, wo, sp, p), 0.0)
    return BsdfValue(fr, ft, sp.gap.copy())
