"""Fiber-like SGGX microflakes and the azimuthally-invariant (ASGGX) phase function.

All directions are arrays with a trailing axis of length 3 and broadcast
against each other. Everything is computed in float64.
"""
from dataclasses import dataclass

import numpy as np

from .errors import GrazingError, ParameterError

Z_AXIS = np.array([0.0, 0.0, 1.0])

# |cos| below this is treated as grazing by the checked public API.
GRAZING_EPS = 1e-6
# sin(angle(w, t)) below this makes the longitudinal plane of w undefined.
AZIMUTH_EPS = 1e-6
HALF_VECTOR_EPS = 1e-12


def dot(a, b):
    # explicit components: much faster than a reduction over a length-3 axis
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def norm(v):
    return np.sqrt(dot(v, v))


def normalize(v):
    v = np.asarray(v, dtype=float)
    return v / norm(v)[..., None]


def cross(a, b):
    return np.cross(a, b)


def orthonormal_basis(n):
    """Two unit vectors completing ``n`` to a right-handed frame (Duff et al. 2017)."""
    n = np.asarray(n, dtype=float)
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    sign = np.where(z >= 0.0, 1.0, -1.0)
    a = -1.0 / (sign + z)
    b = x * y * a
    s = np.stack([1.0 + sign * x * x * a, sign * b, -sign * x], axis=-1)
    t = np.stack([b, sign + y * y * a, -y], axis=-1)
    return s, t


@dataclass(frozen=True)
class FiberFrame:
    """Orthonormal frame whose ``t`` axis is the fiber (yarn) direction."""

    t: np.ndarray
    b: np.ndarray
    n: np.ndarray

    @classmethod
    def from_tangent(cls, t):
        t = normalize(t)
        b, n = orthonormal_basis(t)
        return cls(t, b, n)

    def to_local(self, w):
        """Coordinates of ``w`` as (along t, along b, along n)."""
        return np.stack([dot(w, self.t), dot(w, self.b), dot(w, self.n)], axis=-1)


def _tangent(frame):
    if isinstance(frame, FiberFrame):
        return frame.t
    return np.asarray(frame, dtype=float)


@dataclass(frozen=True)
class SggxMatrix:
    S: np.ndarray
    alpha: object = None

    @property
    def inverse(self):
        return np.linalg.inv(self.S)

    @property
    def det(self):
        return np.linalg.det(self.S)


def check_alpha(alpha):
    alpha = np.asarray(alpha, dtype=float)
    if np.any(~(alpha > 0.0)) or np.any(alpha > 1.0):
        raise ParameterError(f"roughness must lie in (0, 1], got {alpha}")
    return alpha


def fiber_sggx(alpha, frame):
    """Fiber-like S = I + (alpha^2 - 1) t t^T (eigenvalue alpha^2 along the fiber)."""
    alpha = check_alpha(alpha)
    t = normalize(_tangent(frame))
    a2 = alpha[..., None, None] ** 2
    S = np.eye(3) + (a2 - 1.0) * t[..., :, None] * t[..., None, :]
    return SggxMatrix(S, alpha)


def _as_matrix(S):
    return S.S if isinstance(S, SggxMatrix) else np.asarray(S, dtype=float)


def projected_area(w, S):
    """sigma(w) = sqrt(w^T S w)."""
    S = _as_matrix(S)
    w = np.asarray(w, dtype=float)
    q = np.einsum("...i,...ij,...j->...", w, S, w)
    return np.sqrt(np.maximum(q, 0.0))


def sggx_ndf(w, S):
    """D(w) = 1 / (pi sqrt|S| (w^T S^-1 w)^2).

    Normalized so that the integral of <v.w>_+ D(w) over the sphere equals sigma(v).
    """
    S = _as_matrix(S)
    w = np.asarray(w, dtype=float)
    Sinv = np.linalg.inv(S)
    q = np.einsum("...i,...ij,...j->...", w, Sinv, w)
    return 1.0 / (np.pi * np.sqrt(np.linalg.det(S)) * q * q)


# Closed forms for fiber matrices, used on the hot paths. They agree with the
# general-S versions above to rounding.

def fiber_sigma(w, t, alpha):
    c = dot(w, t)
    return np.sqrt(np.maximum(1.0 + (alpha * alpha - 1.0) * c * c, 0.0))


def fiber_ndf(w, t, alpha):
    c = dot(w, t)
    q = 1.0 + (1.0 / (alpha * alpha) - 1.0) * c * c
    return 1.0 / (np.pi * alpha * q * q)


def lambda_slope(w, S, normal=Z_AXIS):
    """Lambda(w) = sigma(w) / |cos theta| against the slab normal."""
    cos = np.abs(dot(w, normal))
    if np.any(cos <= GRAZING_EPS):
        raise GrazingError("direction is grazing with respect to the slab normal")
    return projected_area(w, S) / cos


def rotate_to_plane(wo, wi, frame):
    """Rotate ``wo`` about the fiber axis so its azimuth equals that of ``wi``.

    When ``wi`` is (nearly) parallel to the fiber its longitudinal plane is
    undefined and ``wo`` is returned unchanged.
    """
    t = normalize(_tangent(frame))
    wo = np.asarray(wo, dtype=float)
    wi = np.asarray(wi, dtype=float)
    along_o = dot(wo, t)
    perp_o = wo - along_o[..., None] * t
    perp_i = wi - dot(wi, t)[..., None] * t
    len_i = norm(perp_i)
    len_o = norm(perp_o)
    ok = len_i >= AZIMUTH_EPS
    e_i = perp_i / np.where(ok, len_i, 1.0)[..., None]
    rotated = along_o[..., None] * t + len_o[..., None] * e_i
    return np.where(ok[..., None], rotated, wo)


def _asggx_half_vector(wi, wo, t):
    h = wi + rotate_to_plane(wo, wi, t)
    length = norm(h)
    ok = length > HALF_VECTOR_EPS
    return h / np.where(ok, length, 1.0)[..., None], ok


def asggx_ndf_m(w, alpha_m, frame):
    """D_m(w) = 1 / (pi alpha_m q^2), q = w^T S^-1 w for the fiber matrix of alpha_m."""
    alpha_m = check_alpha(alpha_m)
    return fiber_ndf(np.asarray(w, dtype=float), normalize(_tangent(frame)), alpha_m)


def asggx_phase(wi, wo, S, frame):
    """f_p(wi -> wo) = D(h') / (2 sigma(wi)), h' the half-vector of wi and the rotated wo."""
    t = normalize(_tangent(frame))
    wi = np.asarray(wi, dtype=float)
    h, ok = _asggx_half_vector(wi, np.asarray(wo, dtype=float), t)
    value = sggx_ndf(h, S) / (2.0 * projected_area(wi, S))
    return np.where(ok, value, 0.0)


def sggx_phase(wi, wo, S):
    """Specular SGGX phase function D(h) / (4 sigma(wi)), h = normalize(wi + wo)."""
    wi = np.asarray(wi, dtype=float)
    h = wi + np.asarray(wo, dtype=float)
    length = norm(h)
    ok = length > HALF_VECTOR_EPS
    h = h / np.where(ok, length, 1.0)[..., None]
    return np.where(ok, sggx_ndf(h, S) / (4.0 * projected_area(wi, S)), 0.0)


def sample_visible_normal(wi, S, u1, u2):
    """Draw flake normals from <wi.h>_+ D(h) / sigma(wi).

    Heitz et al. 2015, "The SGGX microflake distribution", supplemental listing.
    ``S`` is a single 3x3 matrix shared by every sample.
    """
    S = _as_matrix(S)
    wi = np.asarray(wi, dtype=float)
    wk, wj = orthonormal_basis(wi)

    def proj(a, b):
        return np.einsum("...i,ij,...j->...", a, S, b)

    s_kk, s_jj, s_ii = proj(wk, wk), proj(wj, wj), proj(wi, wi)
    s_kj, s_ki, s_ji = proj(wk, wj), proj(wk, wi), proj(wj, wi)

    r = np.sqrt(u1)
    phi = 2.0 * np.pi * u2
    u = r * np.cos(phi)
    v = r * np.sin(phi)
    w = np.sqrt(np.maximum(1.0 - u * u - v * v, 0.0))

    det = np.abs(s_kk * s_jj * s_ii - s_kj * s_kj * s_ii - s_ki * s_ki * s_jj
                 - s_ji * s_ji * s_kk + 2.0 * s_kj * s_ki * s_ji)
    inv_sqrt_ii = 1.0 / np.sqrt(s_ii)
    tmp = np.sqrt(np.maximum(s_jj * s_ii - s_ji * s_ji, 1e-300))
    mk = np.sqrt(det) / tmp
    mj_x = -inv_sqrt_ii * (s_ki * s_ji - s_kj * s_ii) / tmp
    mj_y = inv_sqrt_ii * tmp
    mi_x, mi_y, mi_z = inv_sqrt_ii * s_ki, inv_sqrt_ii * s_ji, inv_sqrt_ii * s_ii

    x = u * mk + v * mj_x + w * mi_x
    y = v * mj_y + w * mi_y
    z = w * mi_z
    h = x[..., None] * wk + y[..., None] * wj + z[..., None] * wi
    return normalize(h)


def sphere_grid(n_theta=512, n_phi=1024):
    """Midpoint quadrature nodes and solid-angle weights over the unit sphere."""
    theta = (np.arange(n_theta) + 0.5) * np.pi / n_theta
    phi = (np.arange(n_phi) + 0.5) * 2.0 * np.pi / n_phi
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    w = np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)], axis=-1)
    weights = np.sin(th) * (np.pi / n_theta) * (2.0 * np.pi / n_phi)
    return w, weights
