"""Direct-lighting renderer for the two-light capture rig, plus image I/O.

Scene lengths are in inches. The patch lies in the z=0 plane centred on the
origin with its macroscopic normal along +z; the camera and front light sit
at z>0, the back light at z<0. Images are float arrays of shape (H, W, 3),
row 0 at the top.
"""
import json
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, ParameterError
from .fabric import eval_bsdf
from .microflake import dot, normalize
from .weave import eval_surface, pattern_grid

CM = 1.0 / 2.54
ROW_CHUNK = 32


def _fov_for(width, distance):
    return float(np.degrees(2.0 * np.arctan(0.5 * width / distance)))


@dataclass
class CaptureScene:
    camera_pos: tuple = (0.0, 0.0, 20.0 * CM)
    look_at: tuple = (0.0, 0.0, 0.0)
    fov_deg: float = _fov_for(0.25, 20.0 * CM)
    patch_width: float = 0.25
    patch_height: float = 0.25
    light_front_pos: tuple = (0.0, 0.0, 30.0 * CM)
    light_front_intensity: tuple = (200.0, 200.0, 200.0)
    light_back_pos: tuple = (0.0, 0.0, -30.0 * CM)
    light_back_intensity: tuple = (200.0, 200.0, 200.0)
    resolution: int = 512
    defocus_scale: float = 8.0
    defocus_sigma_px: float = 20.0
    supersample: bool = False

    def __post_init__(self):
        if int(self.resolution) != self.resolution or self.resolution < 1:
            raise ConfigError("resolution", f"resolution must be a positive integer, got {self.resolution}")
        self.resolution = int(self.resolution)
        for name in ("camera_pos", "look_at", "light_front_pos", "light_back_pos",
                     "light_front_intensity", "light_back_intensity"):
            v = getattr(self, name)
            try:
                v = tuple(float(c) for c in v)
            except (TypeError, ValueError):
                raise ConfigError(name) from None
            if len(v) != 3:
                raise ConfigError(name, f"field '{name}' needs 3 components")
            setattr(self, name, v)
        if self.camera_pos[2] <= 0:
            raise ConfigError("camera_pos", "camera must be on the front side (z > 0)")
        if self.light_front_pos[2] <= 0:
            raise ConfigError("light_front_pos", "front light must have z > 0")
        if self.light_back_pos[2] >= 0:
            raise ConfigError("light_back_pos", "back light must have z < 0")
        if not 0 < self.fov_deg < 180:
            raise ConfigError("fov_deg")

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("<root>", "scene must be a JSON object")
        known = set(cls.__dataclass_fields__)
        for k in d:
            if k not in known:
                raise ConfigError(k, f"unknown scene field '{k}'")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as e:
                raise ConfigError("<json>", f"{path}: line {e.lineno}: {e.msg}") from None
        return cls.from_dict(d)


@dataclass
class _Rays:
    hit: np.ndarray        # (S, H, W) pixel sample hits the patch
    point: np.ndarray      # (S, H, W, 3)
    wo: np.ndarray
    offsets: list = field(default_factory=list)


def _camera_rays(scene):
    res = scene.resolution
    cam = np.asarray(scene.camera_pos)
    forward = normalize(np.asarray(scene.look_at) - cam)
    up_hint = np.array([0.0, 1.0, 0.0]) if abs(forward[1]) < 0.99 else np.array([0.0, 0.0, 1.0])
    right = normalize(np.cross(forward, up_hint))
    up = np.cross(right, forward)
    half = np.tan(0.5 * np.radians(scene.fov_deg))
    offsets = [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] if scene.supersample else [(0.5, 0.5)]
    hits, points, wos = [], [], []
    idx = np.arange(res, dtype=float)
    for ox, oy in offsets:
        sx = (2.0 * (idx + ox) / res - 1.0) * half
        sy = (1.0 - 2.0 * (idx + oy) / res) * half
        gx, gy = np.meshgrid(sx, sy)
        d = normalize(forward + gx[..., None] * right + gy[..., None] * up)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = -cam[2] / d[..., 2]
        p = cam + t[..., None] * d
        hit = (t > 0) & (np.abs(p[..., 0]) <= 0.5 * scene.patch_width) & (np.abs(p[..., 1]) <= 0.5 * scene.patch_height)
        p = np.where(hit[..., None], p, 0.0)
        hits.append(hit)
        points.append(p)
        wos.append(normalize(cam - p))
    return _Rays(np.stack(hits), np.stack(points), np.stack(wos), offsets)


def _project(scene, x):
    """Continuous pixel coordinates (col, row) of world point ``x``."""
    cam = np.asarray(scene.camera_pos)
    forward = normalize(np.asarray(scene.look_at) - cam)
    up_hint = np.array([0.0, 1.0, 0.0]) if abs(forward[1]) < 0.99 else np.array([0.0, 0.0, 1.0])
    right = normalize(np.cross(forward, up_hint))
    up = np.cross(right, forward)
    v = np.asarray(x, dtype=float) - cam
    depth = v @ forward
    half = np.tan(0.5 * np.radians(scene.fov_deg))
    sx = (v @ right) / depth / half
    sy = (v @ up) / depth / half
    res = scene.resolution
    return 0.5 * (sx + 1.0) * res, 0.5 * (1.0 - sy) * res


def geometry_key(p):
    return (int(p.pattern), p.weft.density, p.warp.density, p.weft.xi, p.warp.xi,
            p.weft.twist, p.warp.twist, p.weft.beta, p.warp.beta, p.noise)


class Renderer:
    """Renders image pairs for one scene, caching camera rays and weave geometry."""

    def __init__(self, scene, threads=1, cache_size=8):
        self.scene = scene
        self.threads = max(1, int(threads))
        self.rays = _camera_rays(scene)
        self._cache = OrderedDict()
        self.cache_size = cache_size
        res = scene.resolution
        # defocus splat around the projected back light, per sample
        cx, cy = _project(scene, scene.light_back_pos)
        idx = np.arange(res, dtype=float)
        self._splat = []
        for ox, oy in self.rays.offsets:
            px, py = np.meshgrid(idx + ox, idx + oy)
            d2 = (px - cx) ** 2 + (py - cy) ** 2
            self._splat.append(scene.defocus_scale * np.exp(-d2 / (2.0 * scene.defocus_sigma_px ** 2)))
        self._splat = np.stack(self._splat)

    def surface(self, p, seed=0):
        key = geometry_key(p) + (int(seed),)
        sp = self._cache.get(key)
        if sp is not None:
            self._cache.move_to_end(key)
            return sp
        pattern = pattern_grid(p.pattern)
        rows, cols = pattern.shape
        pts = self.rays.point
        x_cells = (pts[..., 0] + 0.5 * self.scene.patch_width) * p.warp.density
        y_cells = (pts[..., 1] + 0.5 * self.scene.patch_height) * p.weft.density
        uv = np.stack([x_cells / cols, y_cells / rows], axis=-1)
        sp = eval_surface(uv, pattern, p.weft, p.warp, noise=p.noise, seed=seed)
        self._cache[key] = sp
        if len(self._cache) > self.cache_size:
            self._cache.popitem(last=False)
        return sp

    def _chunk(self, sp, p, rows):
        sc = self.scene
        sl = (slice(None), rows)
        sub = _slice_surface(sp, sl)
        pts = self.rays.point[sl]
        wo = self.rays.wo[sl]
        hit = self.rays.hit[sl]
        out = []
        for pos, intensity, front in ((sc.light_front_pos, sc.light_front_intensity, True),
                                      (sc.light_back_pos, sc.light_back_intensity, False)):
            to_light = np.asarray(pos) - pts
            r2 = dot(to_light, to_light)
            wi = to_light / np.sqrt(r2)[..., None]
            f = eval_bsdf(wi, wo, sub, p)
            lobe = f.reflect if front else f.transmit
            irradiance = np.abs(wi[..., 2]) / r2
            value = lobe * irradiance[..., None] * np.asarray(intensity)
            if not front:
                splat = self._splat[sl] / r2
                value = np.where(f.delta_transmit[..., None], splat[..., None] * np.asarray(intensity), value)
            value = np.where(hit[..., None], value, 0.0)
            out.append(value.mean(axis=0))
        return out

    def render_pair(self, p, seed=0):
        """(reflect, transmit) images for fabric ``p``."""
        sp = self.surface(p, seed)
        res = self.scene.resolution
        chunks = [slice(r, min(r + ROW_CHUNK, res)) for r in range(0, res, ROW_CHUNK)]
        if self.threads > 1:
            with ThreadPoolExecutor(self.threads) as pool:
                parts = list(pool.map(lambda rows: self._chunk(sp, p, rows), chunks))
        else:
            parts = [self._chunk(sp, p, rows) for rows in chunks]
        reflect = np.concatenate([a for a, _ in parts], axis=0)
        transmit = np.concatenate([b for _, b in parts], axis=0)
        return reflect, transmit


def _slice_surface(sp, sl):
    from .weave import SurfacePoint
    return SurfacePoint(**{k: getattr(sp, k)[sl] for k in SurfacePoint.__dataclass_fields__})


def render_pair(scene, p, seed=0, threads=1):
    return Renderer(scene, threads=threads, cache_size=1).render_pair(p, seed)


def downsample(img, to=16):
    """Box-filter average down to ``to`` x ``to`` pixels."""
    img = np.asarray(img, dtype=float)
    h, w = img.shape[:2]
    if h % to or w % to:
        raise ParameterError(f"cannot box-downsample {h}x{w} to {to}x{to}")
    bh, bw = h // to, w // to
    return img.reshape(to, bh, to, bw, *img.shape[2:]).mean(axis=(1, 3))


def write_pfm(img, path):
    img = np.asarray(img, dtype="<f4")
    h, w = img.shape[:2]
    color = img.ndim == 3
    with open(path, "wb") as fh:
        fh.write(f"{'PF' if color else 'Pf'}\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    lines = []
    pos = 0
    while len(lines) < 3:
        end = data.index(b"\n", pos)
        token = data[pos:end].strip()
        pos = end + 1
        if token:
            lines.append(token.decode("ascii"))
    header, dims, scale = lines
    if header not in ("PF", "Pf"):
        raise ValueError(f"{path}: not a PFM file")
    w, h = (int(v) for v in dims.split())
    scale = float(scale)
    dtype = "<f4" if scale < 0 else ">f4"
    channels = 3 if header == "PF" else 1
    arr = np.frombuffer(data, dtype=dtype, count=w * h * channels, offset=pos)
    arr = arr.reshape((h, w, channels) if channels == 3 else (h, w))[::-1]
    return arr.astype(np.float32)


def to_png_bytes(img):
    img = np.clip(np.asarray(img, dtype=float), 0.0, 1.0)
    return np.round(255.0 * img ** (1.0 / 2.2)).astype(np.uint8)


def write_png(img, path):
    from PIL import Image
    Image.fromarray(to_png_bytes(img)).save(path)


def read_png(path):
    from PIL import Image
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=float) / 255.0
    return arr ** 2.2


def write_image(img, path, format=None):
    fmt = format or ("pfm" if str(path).endswith(".pfm") else "png_gamma22")
    if fmt == "pfm":
        write_pfm(img, path)
    elif fmt == "png_gamma22":
        write_png(img, path)
    else:
        raise ValueError(f"unknown image format {fmt!r}")


def read_image(path):
    if str(path).endswith(".pfm"):
        return read_pfm(path)
    return read_png(path)
