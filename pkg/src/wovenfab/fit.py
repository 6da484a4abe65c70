"""Inverse estimation of fabric parameters from a reflection/transmission pair.

Continuous parameters are optimized with Adam on central finite differences
in a logistic-squashed unconstrained space. Density, gap scaling and twist
are discrete: every fifth iteration all six are perturbed together and the
move is kept only if it lowers the loss.
"""
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import FitError, ParameterError
from .fabric import FabricParams, sample_params_for_pattern
from .render import Renderer, downsample
from .weave import family, pattern_grid

# (mean, std) of the height-scaling and gap-scaling priors per weave family
BETA_PRIOR = {"twill": (1.0, 0.5), "satin": (0.1, 0.5), "plain": (1.0, 1.0)}
XI_PRIOR = {"twill": (0.9, 0.05), "satin": (0.9, 0.05), "plain": (0.75, 0.1)}


@dataclass(frozen=True)
class LossWeights:
    w1: float = 0.001
    w2: float = 0.1
    beta_prior: dict = field(default_factory=lambda: dict(BETA_PRIOR))
    xi_prior: dict = field(default_factory=lambda: dict(XI_PRIOR))


DEFAULT_WEIGHTS = LossWeights()


def _check_same(I, R):
    I = np.asarray(I, dtype=float)
    R = np.asarray(R, dtype=float)
    if I.shape != R.shape:
        raise ParameterError(f"image shapes differ: {I.shape} vs {R.shape}")
    return I, R


def pixel_loss(I, R, size=16):
    """Mean absolute difference of the box-downsampled images."""
    I, R = _check_same(I, R)
    return float(np.mean(np.abs(downsample(I, size) - downsample(R, size))))


FILTER_SCALES = (1.0, 2.0, 4.0)
LUMA = np.array([0.2126, 0.7152, 0.0722])


def texture_features(img):
    """16 feature maps: RGB, luminance, and x/y-derivative, Laplacian and blur of luminance at 3 scales."""
    img = np.asarray(img, dtype=float)
    lum = img @ LUMA
    maps = [img[..., 0], img[..., 1], img[..., 2], lum]
    for s in FILTER_SCALES:
        maps.append(ndimage.gaussian_filter(lum, s, order=(0, 1), mode="wrap"))
        maps.append(ndimage.gaussian_filter(lum, s, order=(1, 0), mode="wrap"))
        maps.append(ndimage.gaussian_laplace(lum, s, mode="wrap"))
        maps.append(ndimage.gaussian_filter(lum, s, mode="wrap"))
    return np.stack([m.reshape(-1) for m in maps])


def gram(img):
    F = texture_features(img)
    return F @ F.T / F.shape[1]


def texture_stats_loss(I, R):
    """L1 between filter-bank Gram matrices, averaged over entries."""
    I, R = _check_same(I, R)
    return float(np.mean(np.abs(gram(I) - gram(R))))


def prior_loss(beta_weft, beta_warp, xi_weft, xi_warp, pattern, weights=DEFAULT_WEIGHTS):
    fam = family(pattern_grid(pattern).name)
    mb, sb = weights.beta_prior[fam]
    mx, sx = weights.xi_prior[fam]
    total = 0.0
    for b in (beta_weft, beta_warp):
        total += (b - mb) ** 2 / (2.0 * sb * sb)
    for x in (xi_weft, xi_warp):
        total += (x - mx) ** 2 / (2.0 * sx * sx)
    return float(total)


def params_prior_loss(p, weights=DEFAULT_WEIGHTS):
    return prior_loss(p.weft.beta, p.warp.beta, p.weft.xi, p.warp.xi, p.pattern, weights)


def total_loss(rendered_pair, target_pair, params, weights=DEFAULT_WEIGHTS):
    """Sum over both images of texture and pixel terms, plus the weighted prior."""
    lg = sum(texture_stats_loss(a, b) for a, b in zip(rendered_pair, target_pair))
    lc = sum(pixel_loss(a, b) for a, b in zip(rendered_pair, target_pair))
    return float(lg + weights.w1 * params_prior_loss(params, weights) + weights.w2 * lc)


class Objective:
    """total_loss against a fixed target, with target statistics precomputed."""

    def __init__(self, target_pair, renderer, weights=DEFAULT_WEIGHTS, seed=0):
        self.renderer = renderer
        self.weights = weights
        self.seed = seed
        self.target = [np.asarray(t, dtype=float) for t in target_pair]
        res = renderer.scene.resolution
        for t in self.target:
            if t.shape[:2] != (res, res):
                raise ParameterError(f"target is {t.shape[1]}x{t.shape[0]}, scene renders {res}x{res}")
        self._grams = [gram(t) for t in self.target]
        self._downs = [downsample(t, 16) for t in self.target]
        self.evaluations = 0

    def __call__(self, p):
        self.evaluations += 1
        pair = self.renderer.render_pair(p, self.seed)
        lg = sum(float(np.mean(np.abs(gram(a) - g))) for a, g in zip(pair, self._grams))
        lc = sum(float(np.mean(np.abs(downsample(a, 16) - d))) for a, d in zip(pair, self._downs))
        return lg + self.weights.w1 * params_prior_loss(p, self.weights) + self.weights.w2 * lc


# Continuous parameters and their ranges: (name, yarn or None, channel or None, lo, hi)
def _continuous_spec():
    spec = []
    for kind in ("weft", "warp"):
        spec += [("alpha_s", kind, None, 0.01, 1.0), ("alpha_m", kind, None, 0.01, 1.0),
                 ("T_s", kind, None, 0.1, 5.0), ("T_m", kind, None, 0.1, 5.0)]
        spec += [("k_s_s", kind, c, 0.0, 1.0) for c in range(3)]
        spec += [("beta", kind, None, 0.1, 2.0)]
    spec += [("k_d_r", None, c, 0.0, 1.0) for c in range(3)]
    spec += [("k_d_t", None, c, 0.0, 1.0) for c in range(3)]
    spec += [("w", None, None, 0.0, 1.0), ("w_m", None, None, 0.1, 2.0)]
    return tuple(spec)


CONTINUOUS = _continuous_spec()
CONTINUOUS_NAMES = tuple("_".join([n] + ([k] if k else []) + (["rgb"[c]] if c is not None else []))
                         for n, k, c, _, _ in CONTINUOUS)
DISCRETE = (("density", "weft"), ("density", "warp"), ("xi", "weft"), ("xi", "warp"),
            ("twist", "weft"), ("twist", "warp"))
DISCRETE_LIMITS = {"density": (45.0, 335.0), "xi": (0.1, 1.0), "twist": (-90.0, 90.0)}
SQUASH_EPS = 1e-9


def squash(z, lo, hi):
    return lo + (hi - lo) / (1.0 + np.exp(-z))


def unsquash(x, lo, hi):
    u = np.clip((x - lo) / (hi - lo), SQUASH_EPS, 1.0 - SQUASH_EPS)
    return np.log(u) - np.log1p(-u)


_LO = np.array([s[3] for s in CONTINUOUS])
_HI = np.array([s[4] for s in CONTINUOUS])


def _get(p, name, kind, ch):
    obj = getattr(p, kind) if kind else p
    v = getattr(obj, name)
    return float(v[ch]) if ch is not None else float(v)


def encode(p):
    """FabricParams -> unconstrained vector of the continuous parameters."""
    x = np.array([_get(p, *s[:3]) for s in CONTINUOUS])
    return unsquash(x, _LO, _HI)


def decode(z, template):
    """Copy of ``template`` with continuous parameters replaced by squash(z)."""
    x = squash(np.asarray(z, dtype=float), _LO, _HI)
    p = template.copy()
    for (name, kind, ch, _, _), v in zip(CONTINUOUS, x):
        obj = getattr(p, kind) if kind else p
        if ch is None:
            setattr(obj, name, float(v))
        else:
            getattr(obj, name)[ch] = v
    return p


def get_discrete(p):
    return np.array([getattr(getattr(p, kind), name) for name, kind in DISCRETE], dtype=float)


def set_discrete(p, values):
    p = p.copy()
    for (name, kind), v in zip(DISCRETE, values):
        setattr(getattr(p, kind), name, float(v))
    return p


def fd_step(z):
    return np.maximum(1e-3 * np.abs(z), 1e-4)


def fd_gradient(fn, z):
    """Central finite differences with per-coordinate step max(1e-3 |z|, 1e-4)."""
    z = np.asarray(z, dtype=float)
    h = fd_step(z)
    g = np.empty_like(z)
    for i in range(len(z)):
        zp, zm = z.copy(), z.copy()
        zp[i] += h[i]
        zm[i] -= h[i]
        fp, fm = fn(zp), fn(zm)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FitError(f"non-finite loss while differentiating coordinate {i}")
        g[i] = (fp - fm) / (2.0 * h[i])
    return g


def perturbation_steps(iteration):
    """(density, twist degrees, gap scaling) step sizes for the iteration band."""
    if iteration < 100:
        return 10.0, 0.5, 0.05
    if iteration < 150:
        return 5.0, 0.25, 0.025
    return 2.0, 0.1, 0.01


def propose_discrete(values, iteration, rng):
    """Jointly perturb all six discrete parameters by +/- one band step each.

    Returns (candidate, signed steps before clamping).
    """
    d_step, tw_step, xi_step = perturbation_steps(iteration)
    sizes = {"density": d_step, "xi": xi_step, "twist": tw_step}
    signs = np.where(rng.random(len(DISCRETE)) < 0.5, -1.0, 1.0)
    steps = np.array([sizes[name] for name, _ in DISCRETE]) * signs
    cand = np.asarray(values, dtype=float) + steps
    for i, (name, _) in enumerate(DISCRETE):
        lo, hi = DISCRETE_LIMITS[name]
        cand[i] = min(max(cand[i], lo), hi)
    return cand, steps


@dataclass
class FitState:
    params: FabricParams
    current: FabricParams
    iteration: int = 0
    loss_trace: list = field(default_factory=list)
    best_loss: float = np.inf
    best_trace: list = field(default_factory=list)
    adam_m: np.ndarray = None
    adam_v: np.ndarray = None
    seed: int = 0
    init_params: FabricParams = None
    init_loss: float = np.nan
    moves: list = field(default_factory=list)
    wall_time: float = 0.0

    def report(self):
        return {
            "init_params": self.init_params.to_dict() if self.init_params else None,
            "init_loss": self.init_loss,
            "final_params": self.params.to_dict(),
            "last_params": self.current.to_dict(),
            "best_loss": self.best_loss,
            "iterations": self.iteration,
            "loss_trace": list(self.loss_trace),
            "discrete_moves": list(self.moves),
            "seed": self.seed,
            "wall_time_s": self.wall_time,
        }


def optimize(target_pair, scene, init, iters=300, lr=0.01, seed=0, renderer=None,
             weights=DEFAULT_WEIGHTS, threads=1, beta1=0.9, beta2=0.999, eps=1e-8,
             perturb_every=5, callback=None):
    """Adam over continuous parameters plus accept-if-better discrete moves.

    ``state.params`` is the best parameter set seen; ``state.current`` the last iterate.
    """
    t0 = time.perf_counter()
    renderer = renderer or Renderer(scene, threads=threads)
    objective = Objective(target_pair, renderer, weights)
    rng = np.random.default_rng(seed)

    template = init.copy()
    z = encode(template)
    discrete = get_discrete(template)

    def loss_at(zv, disc):
        return objective(set_discrete(decode(zv, template), disc))

    current_loss = loss_at(z, discrete)
    state = FitState(params=set_discrete(decode(z, template), discrete),
                     current=set_discrete(decode(z, template), discrete),
                     adam_m=np.zeros_like(z), adam_v=np.zeros_like(z), seed=seed,
                     init_params=init.copy(), init_loss=current_loss, best_loss=current_loss)
    if not np.isfinite(current_loss):
        raise FitError("initial loss is not finite", state)

    for it in range(iters):
        if it > 0 and it % perturb_every == 0:
            cand, steps = propose_discrete(discrete, it, rng)
            cand_loss = loss_at(z, cand)
            accepted = bool(np.isfinite(cand_loss) and cand_loss < current_loss)
            state.moves.append({"iteration": it, "steps": steps.tolist(), "from": discrete.tolist(),
                                "candidate": cand.tolist(), "loss_before": current_loss,
                                "loss_candidate": cand_loss, "accepted": accepted})
            if accepted:
                discrete, current_loss = cand, cand_loss

        state.loss_trace.append(current_loss)
        if current_loss < state.best_loss:
            state.best_loss = current_loss
            state.params = set_discrete(decode(z, template), discrete)
        state.best_trace.append(state.best_loss)

        try:
            g = fd_gradient(lambda zz: loss_at(zz, discrete), z)
        except FitError as e:
            e.state = state
            raise
        state.adam_m = beta1 * state.adam_m + (1.0 - beta1) * g
        state.adam_v = beta2 * state.adam_v + (1.0 - beta2) * g * g
        m_hat = state.adam_m / (1.0 - beta1 ** (it + 1))
        v_hat = state.adam_v / (1.0 - beta2 ** (it + 1))
        z = z - lr * m_hat / (np.sqrt(v_hat) + eps)

        current_loss = loss_at(z, discrete)
        state.iteration = it + 1
        state.current = set_discrete(decode(z, template), discrete)
        if not np.isfinite(current_loss):
            raise FitError(f"loss became non-finite at iteration {it + 1}", state)
        if callback is not None:
            callback(state)

    if current_loss < state.best_loss:
        state.best_loss = current_loss
        state.params = set_discrete(decode(z, template), discrete)
    state.wall_time = time.perf_counter() - t0
    return state


def multi_start(target_pair, scene, k_starts=200, seed=0, renderer=None, weights=DEFAULT_WEIGHTS,
                threads=1, return_losses=False):
    """Best of ``k_starts`` random draws per weave pattern, ranked by total loss.

    Draws are made pattern by pattern from one seeded generator; on equal loss
    the earlier draw wins.
    """
    if int(k_starts) != k_starts or k_starts < 1:
        raise ParameterError("k_starts must be a positive integer")
    renderer = renderer or Renderer(scene, threads=threads, cache_size=1)
    objective = Objective(target_pair, renderer, weights)
    rng = np.random.default_rng(seed)
    best, best_loss, losses = None, np.inf, []
    for pattern in range(5):
        for _ in range(int(k_starts)):
            p = sample_params_for_pattern(rng, pattern)
            loss = objective(p)
            losses.append((pattern, loss))
            if loss < best_loss:
                best, best_loss = p, loss
    if best is None:
        raise FitError("every multi-start candidate produced a non-finite loss")
    return (best, losses) if return_losses else best


def fit(target_pair, scene, k_starts=200, iters=300, seed=0, threads=1, lr=0.01, callback=None):
    renderer = Renderer(scene, threads=threads)
    init = multi_start(target_pair, scene, k_starts, seed, renderer=renderer)
    return optimize(target_pair, scene, init, iters=iters, lr=lr, seed=seed, renderer=renderer,
                    callback=callback)
