"""Position-free Monte Carlo reference for a homogeneous fiber-microflake slab.

Paths enter through the face that ``wi`` points out of, fly with directional
extinction sigma(d), bounce off mirror flakes drawn from the visible-normal
distribution and exit once their depth leaves [0, T]. Exit weights are
binned over (cos theta, phi) about a chosen axis; a bin estimate
``sum / (n_paths * solid_angle)`` converges to f(wi, wo) |cos theta_o|.
"""
import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .errors import EstimationError, ParameterError
from .layer import LayerParams, multiple_scatter, single_scatter
from .microflake import FiberFrame, dot, fiber_sggx, fiber_sigma, normalize, sample_visible_normal

PARTITION = 1 << 17
ROULETTE_THRESHOLD = 1e-4
ROULETTE_SURVIVAL = 0.5


@dataclass
class LobeTable:
    wi: np.ndarray
    axis: np.ndarray
    ref: np.ndarray          # azimuth zero direction, orthogonal to axis
    n_cos: int
    n_phi: int
    sums: np.ndarray         # (n_cos, n_phi, 3) summed RGB weights
    sq_sums: np.ndarray      # (n_cos, n_phi, 3) summed squared weights
    counts: np.ndarray       # (n_cos, n_phi)
    n_paths: int = 0
    bounce_class: str = "all"
    params: dict = field(default_factory=dict)

    @property
    def cos_edges(self):
        return np.linspace(-1.0, 1.0, self.n_cos + 1)

    @property
    def phi_edges(self):
        return np.linspace(0.0, 2.0 * np.pi, self.n_phi + 1)

    @property
    def solid_angle(self):
        return (2.0 / self.n_cos) * (2.0 * np.pi / self.n_phi)

    def centers(self):
        """Unit directions at bin centres, shape (n_cos, n_phi, 3)."""
        c = 0.5 * (self.cos_edges[1:] + self.cos_edges[:-1])
        ph = 0.5 * (self.phi_edges[1:] + self.phi_edges[:-1])
        return self.directions(*np.meshgrid(c, ph, indexing="ij"))

    def directions(self, cos_theta, phi):
        sin_theta = np.sqrt(np.maximum(1.0 - cos_theta ** 2, 0.0))
        other = np.cross(self.axis, self.ref)
        return (cos_theta[..., None] * self.axis
                + (sin_theta * np.cos(phi))[..., None] * self.ref
                + (sin_theta * np.sin(phi))[..., None] * other)

    def estimate(self):
        """Per-bin estimate of f |cos theta_o| (RGB)."""
        if self.n_paths == 0:
            return np.zeros_like(self.sums)
        return self.sums / (self.n_paths * self.solid_angle)

    def std_error(self):
        if self.n_paths == 0:
            return np.zeros_like(self.sums)
        n = self.n_paths
        mean = self.sums / n
        var = np.maximum(self.sq_sums / n - mean ** 2, 0.0)
        return np.sqrt(var / n) / self.solid_angle

    def total(self):
        return self.sums.sum(axis=(0, 1)) / max(self.n_paths, 1)

    def merge(self, other):
        return LobeTable(self.wi, self.axis, self.ref, self.n_cos, self.n_phi,
                         self.sums + other.sums, self.sq_sums + other.sq_sums,
                         self.counts + other.counts, self.n_paths + other.n_paths,
                         self.bounce_class, self.params)

    def to_csv(self, path):
        ce, pe = self.cos_edges, self.phi_edges
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["cos_theta_lo", "cos_theta_hi", "phi_lo", "phi_hi", "r", "g", "b", "count"])
            est = self.estimate()
            for i in range(self.n_cos):
                for j in range(self.n_phi):
                    wr.writerow([ce[i], ce[i + 1], pe[j], pe[j + 1], *est[i, j], int(self.counts[i, j])])


def _empty_table(wi, axis, ref, n_cos, n_phi, bounce_class, params):
    return LobeTable(np.asarray(wi, float), axis, ref, n_cos, n_phi,
                     np.zeros((n_cos, n_phi, 3)), np.zeros((n_cos, n_phi, 3)),
                     np.zeros((n_cos, n_phi), dtype=np.int64), 0, bounce_class, params)


def _frame_for(axis):
    axis = normalize(axis)
    f = FiberFrame.from_tangent(axis)
    return axis, f.b


def _bin_index(d, axis, ref, n_cos, n_phi):
    c = np.clip(dot(d, axis), -1.0, 1.0)
    other = np.cross(axis, ref)
    phi = np.mod(np.arctan2(dot(d, other), dot(d, ref)), 2.0 * np.pi)
    i = np.minimum(((c + 1.0) * 0.5 * n_cos).astype(np.int64), n_cos - 1)
    j = np.minimum((phi / (2.0 * np.pi) * n_phi).astype(np.int64), n_phi - 1)
    return i * n_phi + j


def _walk_partition(wi, p, n, rng, axis, ref, n_cos, n_phi, multi_from, max_bounces):
    """One independently seeded block of paths; returns per-class (sums, sq, counts)."""
    S = fiber_sggx(p.alpha, p.t).S
    k_s = np.broadcast_to(np.asarray(p.k_s, dtype=float), (3,))
    normal = normalize(p.normal)
    T = float(p.T)
    nb = n_cos * n_phi
    acc = {c: [np.zeros((nb, 3)), np.zeros((nb, 3)), np.zeros(nb, dtype=np.int64)]
           for c in ("single", "multi", "all")}
    if T <= 0.0 or n == 0:
        return acc

    front = dot(wi, normal) > 0.0
    d = np.broadcast_to(-wi, (n, 3)).copy()
    depth = np.full(n, T if front else 0.0)   # height above the back face
    weight = np.ones((n, 3))
    bounces = np.zeros(n, dtype=np.int64)

    def record(cls, d_out, w_out):
        idx = _bin_index(d_out, axis, ref, n_cos, n_phi)
        sums, sq, cnt = acc[cls]
        for ch in range(3):
            sums[:, ch] += np.bincount(idx, weights=w_out[:, ch], minlength=nb)
            sq[:, ch] += np.bincount(idx, weights=w_out[:, ch] ** 2, minlength=nb)
        cnt += np.bincount(idx, minlength=nb)

    while len(d) and (max_bounces is None or bounces.max(initial=0) <= max_bounces):
        sigma = fiber_sigma(d, p.t, p.alpha)
        dist = -np.log1p(-rng.random(len(d))) / sigma
        depth = depth + dist * dot(d, normal)
        out = (depth >= T) | (depth <= 0.0)
        if np.any(out):
            done = out & (bounces > 0)
            if np.any(done):
                dd, ww, bb = d[done], weight[done], bounces[done]
                record("all", dd, ww)
                s = bb == 1
                if np.any(s):
                    record("single", dd[s], ww[s])
                m = bb >= multi_from
                if np.any(m):
                    record("multi", dd[m], ww[m])
            keep = ~out
            d, depth, weight, bounces = d[keep], depth[keep], weight[keep], bounces[keep]
            if not len(d):
                break
        # scatter off a mirror flake seen from the incoming side
        u1, u2 = rng.random(len(d)), rng.random(len(d))
        m = sample_visible_normal(-d, S, u1, u2)
        d = d - 2.0 * dot(d, m)[:, None] * m
        d = normalize(d)
        weight = weight * k_s
        bounces = bounces + 1
        low = weight.max(axis=1) < ROULETTE_THRESHOLD
        if np.any(low):
            survive = rng.random(len(d)) < ROULETTE_SURVIVAL
            weight[low] /= ROULETTE_SURVIVAL
            keep = ~low | survive
            d, depth, weight, bounces = d[keep], depth[keep], weight[keep], bounces[keep]
    return acc


def walk_slab(wi, p, n_paths, seed=0, axis=None, ref=None, n_cos=20, n_phi=36,
              multi_from=2, max_bounces=None):
    """Random-walk ``n_paths`` paths through the slab ``p``; returns single/multi/all tables.

    ``axis`` (default: the slab normal) is the polar axis of the binning.
    ``multi_from`` is the smallest bounce count counted as multiple scattering.
    Seeding is per fixed-size path partition, so results do not depend on how
    partitions are scheduled.
    """
    if int(n_paths) != n_paths or n_paths < 1:
        raise ParameterError("n_paths must be a positive integer")
    n_paths = int(n_paths)
    wi = normalize(np.asarray(wi, dtype=float))
    if not isinstance(p, LayerParams):
        raise ParameterError("walk_slab expects LayerParams")
    normal = normalize(p.normal)
    if abs(dot(wi, normal)) <= 1e-6:
        raise ParameterError("incident direction is grazing")
    axis = normal if axis is None else normalize(np.asarray(axis, dtype=float))
    if ref is None:
        _, ref = _frame_for(axis)
    else:
        ref = normalize(np.asarray(ref, dtype=float) - dot(np.asarray(ref, float), axis) * axis)
    info = {"alpha": float(p.alpha), "T": float(p.T), "t": [float(c) for c in p.t],
            "k_s": [float(c) for c in np.broadcast_to(p.k_s, (3,))], "seed": int(seed)}
    tables = {c: _empty_table(wi, axis, ref, n_cos, n_phi, c, info) for c in ("single", "multi", "all")}
    nb = n_cos * n_phi
    for part, start in enumerate(range(0, n_paths, PARTITION)):
        n = min(PARTITION, n_paths - start)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), part])))
        acc = _walk_partition(wi, p, n, rng, axis, ref, n_cos, n_phi, multi_from, max_bounces)
        for c, (sums, sq, cnt) in acc.items():
            t = tables[c]
            t.sums += sums.reshape(n_cos, n_phi, 3)
            t.sq_sums += sq.reshape(n_cos, n_phi, 3)
            t.counts += cnt.reshape(n_cos, n_phi)
    for t in tables.values():
        t.n_paths = n_paths
    return tables


def azimuthal_uniformity(table, n_phi_bins=36):
    """Relative (population) standard deviation of the azimuthal marginal."""
    w = np.asarray(table.sums if isinstance(table, LobeTable) else table, dtype=float)
    if w.ndim == 3:
        w = w.sum(axis=2)
    marginal = w.sum(axis=0) if w.ndim == 2 else w
    if marginal.size % n_phi_bins:
        raise EstimationError(f"{marginal.size} azimuth bins cannot be grouped into {n_phi_bins}")
    marginal = marginal.reshape(n_phi_bins, -1).sum(axis=1)
    mean = marginal.mean()
    if not mean > 0.0:
        raise EstimationError("table carries no weight")
    return float(marginal.std() / mean)


MODELS = ("sggx_single_form", "asggx_form")


def _bin_average(table, fn, sub=4):
    """Average fn(directions) over each bin with a sub x sub midpoint rule."""
    ce, pe = table.cos_edges, table.phi_edges
    fc = (np.arange(sub) + 0.5) / sub
    cos = (ce[:-1, None] + np.diff(ce)[:, None] * fc).reshape(-1)
    phi = (pe[:-1, None] + np.diff(pe)[:, None] * fc).reshape(-1)
    C, P = np.meshgrid(cos, phi, indexing="ij")
    vals = fn(table.directions(C, P))
    shape = (table.n_cos, sub, table.n_phi, sub) + vals.shape[2:]
    return vals.reshape(shape).mean(axis=(1, 3))


def analytic_lobe(table, model, k, alpha, T, t=None, sub=4):
    """Bin-averaged k f(wi, wo) |cos theta_o| of a single-slab analytic lobe (luminance)."""
    t = np.asarray(table.params.get("t", [1.0, 0.0, 0.0]) if t is None else t, dtype=float)
    normal = table.axis
    p = LayerParams(np.ones(3), alpha, T, t, normal)
    wi = table.wi

    def fn(wo):
        lobe = single_scatter if model == "sggx_single_form" else multiple_scatter
        v = lobe(np.broadcast_to(wi, wo.shape), wo, p, clamp=True)
        f = (v.reflect + v.transmit)[..., 0]
        return k * f * np.abs(dot(wo, normal))

    return _bin_average(table, fn, sub)


def _hemisphere_mask(table, hemisphere):
    c = 0.5 * (table.cos_edges[1:] + table.cos_edges[:-1])
    same = np.sign(c) == np.sign(dot(table.wi, table.axis))
    mask = {"reflect": same, "transmit": ~same, "both": np.ones_like(same)}[hemisphere]
    return np.broadcast_to(mask[:, None], (table.n_cos, table.n_phi))


def fit_lobe(table, model, hemisphere="transmit", starts=None, sub=2):
    """Least-squares fit of an analytic slab lobe (free k, alpha, T) to a binned table.

    The table's polar axis must be the slab normal. Returns the fitted params,
    the relative L2 error over the chosen hemisphere and whether the solver
    reported convergence.
    """
    if model not in MODELS:
        raise ParameterError(f"unknown lobe model {model!r}")
    target = table.estimate().mean(axis=2)
    mask = _hemisphere_mask(table, hemisphere)
    data = target[mask]
    norm = np.linalg.norm(data)
    if not norm > 0.0:
        raise EstimationError("no weight in the requested hemisphere")

    def residual(x):
        model_vals = analytic_lobe(table, model, x[0], x[1], x[2], sub=sub)[mask]
        return (model_vals - data) / norm

    if starts is None:
        starts = [(a, T) for a in (0.2, 0.5, 0.9) for T in (0.5, 2.0)]
    best = None
    for a0, T0 in starts:
        shape = analytic_lobe(table, model, 1.0, a0, T0, sub=sub)[mask]
        k0 = float(np.dot(shape, data) / max(np.dot(shape, shape), 1e-300))
        k0 = min(max(k0, 1e-6), 1e3)
        res = least_squares(residual, [k0, a0, T0], bounds=([0.0, 0.01, 1e-3], [1e4, 1.0, 50.0]),
                            x_scale=[max(k0, 1e-3), 0.1, 0.5])
        err = float(np.linalg.norm(res.fun))
        if best is None or err < best[0]:
            best = (err, res)
    err, res = best
    return {"model": model, "hemisphere": hemisphere,
            "params": {"k": float(res.x[0]), "alpha": float(res.x[1]), "T": float(res.x[2])},
            "rel_l2_error": err, "converged": bool(res.success), "message": res.message}


def analytic_table(wi, p, model, n_cos=20, n_phi=36, sub=4):
    """A noise-free table filled from an analytic lobe, for self-consistency checks."""
    wi = normalize(np.asarray(wi, dtype=float))
    axis = normalize(p.normal)
    _, ref = _frame_for(axis)
    info = {"alpha": float(p.alpha), "T": float(p.T), "t": [float(c) for c in p.t]}
    t = _empty_table(wi, axis, ref, n_cos, n_phi, "analytic", info)
    k = float(np.mean(np.broadcast_to(p.k_s, (3,))))
    est = analytic_lobe(t, model, k, float(p.alpha), float(p.T), p.t, sub=sub)
    t.n_paths = 1
    t.sums = np.repeat(est[..., None], 3, axis=2) * t.solid_angle
    t.counts = np.ones((n_cos, n_phi), dtype=np.int64)
    return t
