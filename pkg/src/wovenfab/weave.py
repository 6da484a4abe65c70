"""Procedural woven geometry: pattern grids, yarn frames, tension and gaps.

Conventions: the weft runs horizontally (+x) and the warp vertically (+y);
the macroscopic normal is +z. A pattern grid has one row per weft yarn and
one column per warp yarn, with 1 where the weft lies on top. Texture
coordinates are measured in pattern repeats, so ``uv`` in [0,1)^2 spans one
repeat; values outside that range address neighbouring repeats.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .microflake import normalize

PATTERN_NAMES = ("plain", "twill", "twill90", "satin", "satin90")
WEFT, WARP = 0, 1

# Minimum thickness scale of the tension-aware thickness, by weave family.
S_MIN = {"plain": 1.0, "twill": 0.5, "satin": 0.5}

# Peak height of a yarn arch over one segment, in cell units.
ARCH_HEIGHT = 0.25


def family(name):
    return name.rstrip("90")


@dataclass(frozen=True)
class WeavePattern:
    id: int
    name: str
    grid: np.ndarray

    @property
    def family(self):
        return family(self.name)

    @property
    def s_min(self):
        return S_MIN[self.family]

    @property
    def shape(self):
        return self.grid.shape

    def to_text(self):
        return "\n".join(" ".join(str(int(v)) for v in row) for row in self.grid)


def _twill():
    row0 = np.array([1, 1, 0, 0])
    return np.stack([np.roll(row0, r) for r in range(4)])


def _satin():
    g = np.ones((5, 5), dtype=int)
    for r in range(5):
        g[r, (2 * r) % 5] = 0
    return g


def pattern_grid(pattern_id):
    """Built-in weave grids, ids 0..4 = plain, twill, twill90, satin, satin90.

    twill90 is the twill turned by 90 degrees, which reverses its diagonal
    (its transpose would only be a translated twill). satin90 is the
    transposed satin.
    """
    if isinstance(pattern_id, WeavePattern):
        return pattern_id
    if isinstance(pattern_id, str):
        if pattern_id not in PATTERN_NAMES:
            raise ParameterError(f"unknown weave pattern {pattern_id!r}")
        pattern_id = PATTERN_NAMES.index(pattern_id)
    if int(pattern_id) != pattern_id or not 0 <= pattern_id <= 4:
        raise ParameterError(f"pattern id must be in 0..4, got {pattern_id}")
    pattern_id = int(pattern_id)
    grid = {
        0: lambda: np.array([[1, 0], [0, 1]]),
        1: _twill,
        2: lambda: np.rot90(_twill()),
        3: _satin,
        4: lambda: _satin().T,
    }[pattern_id]()
    return WeavePattern(pattern_id, PATTERN_NAMES[pattern_id], np.ascontiguousarray(grid, dtype=int))


def validate_grid(grid):
    grid = np.asarray(grid)
    rows_ok = np.all(grid.min(axis=1) == 0) and np.all(grid.max(axis=1) == 1)
    cols_ok = np.all(grid.min(axis=0) == 0) and np.all(grid.max(axis=0) == 1)
    return bool(rows_ok and cols_ok)


@dataclass
class YarnParams:
    density: float = 100.0
    alpha_s: float = 0.5
    alpha_m: float = 0.5
    T_s: float = 1.0
    T_m: float = 1.0
    k_s_s: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))
    beta: float = 1.0
    xi: float = 1.0
    twist: float = 0.0

    def __post_init__(self):
        self.k_s_s = np.asarray(self.k_s_s, dtype=float).reshape(3)


@dataclass
class SurfacePoint:
    """Per-texel weave evaluation; every field is an array over texels.

    Index 1 is the upper layer and index 2 the lower one. ``t1``/``t2`` are
    fiber tangents (yarn tangent turned by the twist angle). ``has2`` is false
    where only one yarn covers the texel.
    """

    uv: np.ndarray
    top: np.ndarray
    n1: np.ndarray
    n2: np.ndarray
    t1: np.ndarray
    t2: np.ndarray
    mu1: np.ndarray
    mu2: np.ndarray
    gap: np.ndarray
    has2: np.ndarray
    ks_scale1: np.ndarray
    ks_scale2: np.ndarray


@dataclass(frozen=True)
class _Segments:
    """Run structure of each yarn of one kind, indexed [yarn, cell]."""

    offset: np.ndarray      # cells from segment start to this cell
    length: np.ndarray
    prev_length: np.ndarray
    next_length: np.ndarray
    on_top: np.ndarray
    seg_id: np.ndarray      # index of the segment within one repeat
    period: int
    n_segments: np.ndarray  # segments per repeat, per yarn


def _runs(seq):
    """Per-cell segment bookkeeping for one cyclic on/off sequence."""
    seq = np.asarray(seq, dtype=int)
    P = len(seq)
    # rotate so index 0 starts a segment
    starts = [i for i in range(P) if seq[i] != seq[i - 1]]
    if not starts:
        raise ParameterError("a yarn never changes sides; every row and column needs a 0 and a 1")
    s0 = starts[0]
    order = [(s0 + k) % P for k in range(P)]
    segs = []
    for k, c in enumerate(order):
        if k == 0 or seq[c] != seq[order[k - 1]]:
            segs.append([k, 0, int(seq[c])])
        segs[-1][1] += 1
    offset = np.zeros(P)
    length = np.zeros(P)
    prev_len = np.zeros(P)
    next_len = np.zeros(P)
    on_top = np.zeros(P, dtype=bool)
    seg_id = np.zeros(P, dtype=np.int64)
    n = len(segs)
    for si, (start, L, v) in enumerate(segs):
        for k in range(start, start + L):
            c = order[k]
            offset[c] = k - start
            length[c] = L
            prev_len[c] = segs[si - 1][1]
            next_len[c] = segs[(si + 1) % n][1]
            on_top[c] = bool(v)
            seg_id[c] = si
    return offset, length, prev_len, next_len, on_top, seg_id, n


def _segments(pattern, kind):
    grid = pattern.grid
    seqs = grid if kind == WEFT else (1 - grid).T
    parts = [_runs(s) for s in seqs]
    stack = [np.stack([p[i] for p in parts]) for i in range(6)]
    return _Segments(*stack, period=seqs.shape[1], n_segments=np.array([p[6] for p in parts]))


def _tension_from_runs(a, L, Lp, Ln, on_top):
    v = np.where(on_top, 0.0, 1.0)
    other = 1.0 - v
    first = a < 0.5 * L
    frac_a = (a + 0.5 * Lp) / (0.5 * (Lp + L))
    frac_b = (a - 0.5 * L) / (0.5 * (L + Ln))
    return np.where(first, other + (v - other) * frac_a, v + (other - v) * frac_b)


def tension_level(coord, pattern, kind, index=0):
    """Tension along a yarn: 0 at float centres, 1 at under-segment centres, linear between.

    ``coord`` is the along-yarn position in cells; ``index`` picks the yarn
    (row for the weft, column for the warp).
    """
    pattern = pattern_grid(pattern)
    seg = _segments(pattern, kind)
    coord = np.asarray(coord, dtype=float)
    index = np.asarray(index) % seg.offset.shape[0]
    cell = np.floor(coord).astype(np.int64) % seg.period
    a = seg.offset[index, cell] + (coord - np.floor(coord))
    return _tension_from_runs(a, seg.length[index, cell], seg.prev_length[index, cell],
                              seg.next_length[index, cell], seg.on_top[index, cell])


def tension_thickness(T, mu, s_min):
    """Thickness scaled by tension: T (s_min + (1 - mu)(1 - s_min))."""
    mu = np.asarray(mu, dtype=float)
    if np.any(mu < 0.0) or np.any(mu > 1.0):
        raise ParameterError("tension level must lie in [0, 1]")
    if not 0.0 < s_min <= 1.0:
        raise ParameterError("s_min must lie in (0, 1]")
    return np.asarray(T, dtype=float) * (s_min + (1.0 - mu) * (1.0 - s_min))


def _mix64(x):
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def hash_uniform(*keys):
    """Deterministic uniforms in [-1, 1) from integer keys (splitmix64 chain)."""
    h = np.uint64(0x9E3779B97F4A7C15)
    with np.errstate(over="ignore"):
        for k in keys:
            k = np.asarray(k).astype(np.int64).astype(np.uint64)
            h = _mix64(h + k + np.uint64(0x9E3779B97F4A7C15))
    return (h >> np.uint64(11)).astype(np.float64) * (2.0 / 2.0 ** 53) - 1.0


_EX = np.array([1.0, 0.0, 0.0])
_EY = np.array([0.0, 1.0, 0.0])
_EZ = np.array([0.0, 0.0, 1.0])


def _yarn(kind, pattern, seg, along_coord, cross_coord, yarn_params, noise, seed):
    """Frame, tension and coverage of one yarn kind at every texel."""
    n_yarns = seg.offset.shape[0]
    yarn_idx = np.floor(cross_coord).astype(np.int64)
    row = yarn_idx % n_yarns
    cell_abs = np.floor(along_coord).astype(np.int64)
    cell = cell_abs % seg.period
    a = seg.offset[row, cell] + (along_coord - cell_abs)
    L = seg.length[row, cell]
    on_top = seg.on_top[row, cell]
    mu = _tension_from_runs(a, L, seg.prev_length[row, cell], seg.next_length[row, cell], on_top)

    beta = np.full(a.shape, float(yarn_params.beta))
    ks_scale = np.ones(a.shape)
    if noise > 0.0:
        repeat = np.floor_divide(cell_abs - seg.offset[row, cell].astype(np.int64), seg.period)
        seg_abs = repeat * seg.n_segments[row] + seg.seg_id[row, cell]
        beta = beta * (1.0 + noise * hash_uniform(seed, kind, 0, yarn_idx, seg_abs))
        ks_scale = ks_scale + noise * hash_uniform(seed, kind, 1, yarn_idx, seg_abs)
        beta = np.maximum(beta, 0.0)
        ks_scale = np.maximum(ks_scale, 0.0)

    s = cross_coord - yarn_idx - 0.5
    half = 0.5 * float(yarn_params.xi)
    covered = np.abs(s) <= half
    sin_phi = np.clip(s / half, -1.0, 1.0)
    cos_phi = np.sqrt(1.0 - sin_phi ** 2)

    along, across = (_EX, _EY) if kind == WEFT else (_EY, _EX)
    sign = np.where(on_top, 1.0, -1.0)
    slope = beta * sign * ARCH_HEIGHT * np.pi / L * np.cos(np.pi * a / L)
    t_yarn = normalize(along + slope[..., None] * _EZ)
    n_long = normalize(_EZ - slope[..., None] * along)
    n = normalize(cos_phi[..., None] * n_long + (beta * sin_phi)[..., None] * across)

    tw = np.radians(float(yarn_params.twist))
    t_fiber = np.cos(tw) * t_yarn + np.sin(tw) * np.cross(n, t_yarn)
    return n, t_fiber, mu, covered, ks_scale


def eval_surface(uv, pattern, weft, warp, noise=0.0, seed=0):
    """Evaluate the woven surface at texture coordinates ``uv`` (..., 2)."""
    pattern = pattern_grid(pattern)
    uv = np.asarray(uv, dtype=float)
    n_rows, n_cols = pattern.shape
    x = uv[..., 0] * n_cols   # warp yarn index grows with x
    y = uv[..., 1] * n_rows   # weft yarn index grows with y

    fw = _yarn(WEFT, pattern, _segments(pattern, WEFT), x, y, weft, noise, seed)
    fp = _yarn(WARP, pattern, _segments(pattern, WARP), y, x, warp, noise, seed)
    cov_w, cov_p = fw[3], fp[3]

    grid_top_weft = pattern.grid[np.floor(y).astype(np.int64) % n_rows,
                                 np.floor(x).astype(np.int64) % n_cols] == 1
    weft_first = np.where(cov_w & cov_p, grid_top_weft, cov_w)

    def pick(i, first):
        a, b = fw[i], fp[i]
        sel = first[..., None] if a.ndim > first.ndim else first
        return np.where(sel, a, b)

    return SurfacePoint(
        uv=uv,
        top=np.where(weft_first, WEFT, WARP),
        n1=pick(0, weft_first), n2=pick(0, ~weft_first),
        t1=pick(1, weft_first), t2=pick(1, ~weft_first),
        mu1=pick(2, weft_first), mu2=pick(2, ~weft_first),
        gap=~(cov_w | cov_p),
        has2=cov_w & cov_p,
        ks_scale1=pick(4, weft_first), ks_scale2=pick(4, ~weft_first),
    )
