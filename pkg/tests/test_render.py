import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wovenfab.errors import ConfigError, ParameterError
from wovenfab.fabric import FabricParams, sample_params_for_pattern
from wovenfab.render import (CM, CaptureScene, Renderer, _fov_for, _project, downsample, read_image,
                             read_pfm, render_pair, to_png_bytes, write_image, write_pfm)


def small_scene(res=64, patch=0.25, **kw):
    return CaptureScene(resolution=res, patch_width=patch, patch_height=patch,
                        fov_deg=_fov_for(patch, 20.0 * CM), **kw)


def colored(pattern=0, seed=1):
    return sample_params_for_pattern(np.random.default_rng(seed), pattern)


def test_black_fabric_without_gaps_renders_black():
    p = colored(3)
    p.k_d_r = np.zeros(3)
    p.k_d_t = np.zeros(3)
    for y in (p.weft, p.warp):
        y.k_s_s = np.zeros(3)
        y.xi = 1.0
    reflect, transmit = render_pair(small_scene(), p)
    assert np.all(reflect == 0) and np.all(transmit == 0)


def test_defocus_factor_at_projected_light_centre():
    scene = small_scene(res=65, patch=0.2, defocus_sigma_px=5.0)
    p = colored(0)
    p.weft.density = p.warp.density = 100.0
    p.weft.xi = p.warp.xi = 0.5
    cx, cy = _project(scene, scene.light_back_pos)
    assert (cx, cy) == pytest.approx((32.5, 32.5))
    r = Renderer(scene)
    sp = r.surface(p)
    assert sp.gap[0, 32, 32]
    _, transmit = r.render_pair(p)
    r2 = np.sum((np.asarray(scene.light_back_pos) - r.rays.point[0, 32, 32]) ** 2)
    factor = transmit[32, 32] * r2 / np.asarray(scene.light_back_intensity)
    assert factor == pytest.approx([8.0, 8.0, 8.0], rel=1e-12)


def test_gap_pixels_follow_gaussian():
    scene = small_scene(res=65, patch=0.2, defocus_sigma_px=5.0)
    p = colored(0)
    p.weft.density = p.warp.density = 100.0
    p.weft.xi = p.warp.xi = 0.5
    r = Renderer(scene)
    sp = r.surface(p)
    _, transmit = r.render_pair(p)
    rows, cols = np.nonzero(sp.gap[0])
    pts = r.rays.point[0, rows, cols]
    r2 = np.sum((np.asarray(scene.light_back_pos) - pts) ** 2, axis=-1)
    d2 = (cols + 0.5 - 32.5) ** 2 + (rows + 0.5 - 32.5) ** 2
    expected = 8.0 * np.exp(-d2 / (2 * 25.0)) * 200.0 / r2
    assert transmit[rows, cols, 0] == pytest.approx(expected, rel=1e-12)


def test_doubling_intensity_doubles_non_gap_pixels():
    p = colored(1)
    base = small_scene()
    twice = small_scene(light_front_intensity=(400.0,) * 3, light_back_intensity=(400.0,) * 3)
    a, b = render_pair(base, p), render_pair(twice, p)
    sp = Renderer(base).surface(p)
    open_ = ~sp.gap[0]
    for x, y in zip(a, b):
        assert np.array_equal(2.0 * x[open_], y[open_])


def test_images_are_finite_and_nonnegative():
    for pid in range(5):
        for img in render_pair(small_scene(48), colored(pid, seed=pid)):
            assert img.shape == (48, 48, 3)
            assert np.all(np.isfinite(img)) and np.all(img >= 0)


def test_pixels_off_the_patch_are_zero():
    scene = CaptureScene(resolution=64, patch_width=0.1, patch_height=0.1)
    reflect, transmit = render_pair(scene, colored(0))
    assert np.all(reflect[:4] == 0) and np.all(transmit[:, :4] == 0)
    assert reflect[16:48, 16:48].sum() > 0


def test_bit_identical_across_thread_counts():
    p = colored(4)
    p.noise = 0.1
    scene = small_scene(96)
    one = Renderer(scene, threads=1).render_pair(p, seed=3)
    many = Renderer(scene, threads=4).render_pair(p, seed=3)
    for a, b in zip(one, many):
        assert np.array_equal(a, b)


def test_deterministic_and_seed_free_without_noise():
    p = colored(2)
    scene = small_scene()
    a = render_pair(scene, p, seed=0)
    b = render_pair(scene, p, seed=17)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


def test_swapping_yarns_transposes_plain_weave():
    # 20 cells over 80 px: swapping weft and warp turns the plain grid into its
    # complement, which is the same weave shifted by one 4-px cell
    scene = small_scene(res=80, patch=0.2)
    p = colored(0)
    p.weft.density = p.warp.density = 100.0
    p.weft.xi = p.warp.xi = 1.0
    q = p.copy()
    q.weft, q.warp = p.warp, p.weft
    a, b = render_pair(scene, p), render_pair(scene, q)
    inner = (slice(4, -4), slice(4, -4))
    for x, y in zip(a, b):
        moved = np.roll(x.transpose(1, 0, 2), 4, axis=0)
        assert np.abs(moved - y)[inner].max() < 3e-3 * y.max()
    assert np.abs(a[0].transpose(1, 0, 2) - b[0])[inner].max() > 0.1 * b[0].max()


def test_supersampling_changes_little_on_smooth_fabric():
    # Lambertian-only fabric without gaps: shading varies only with light falloff
    p = colored(0)
    p.w = 0.0
    for y in (p.weft, p.warp):
        y.k_s_s = np.zeros(3)
        y.xi = 1.0
    plain = render_pair(small_scene(64), p)[0]
    ss = render_pair(small_scene(64, supersample=True), p)[0]
    inner = (slice(4, -4), slice(4, -4))
    assert np.allclose(plain[inner], ss[inner], rtol=1e-3)


def test_downsample_examples():
    assert np.allclose(downsample(np.full((64, 64, 3), 0.3), 16), 0.3, rtol=1e-15, atol=0)
    rng = np.random.default_rng(0)
    img = rng.random((512, 512, 3))
    d = downsample(img, 16)
    assert d[3, 5] == pytest.approx(img[96:128, 160:192].mean(axis=(0, 1)))
    checker = (np.indices((64, 64)).sum(axis=0) % 2).astype(float)
    assert np.allclose(downsample(checker, 16), 0.5)


def test_downsample_rejects_indivisible():
    with pytest.raises(ParameterError):
        downsample(np.zeros((100, 100, 3)), 16)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8))
def test_downsample_preserves_mean(bh, bw):
    img = np.random.default_rng(bh * 10 + bw).random((16 * bh, 16 * bw, 3))
    assert downsample(img, 16).mean() == pytest.approx(img.mean())


def test_pfm_round_trip_bit_exact(tmp_path):
    img = np.random.default_rng(2).random((17, 23, 3)).astype(np.float32) * 50
    path = tmp_path / "x.pfm"
    write_pfm(img, path)
    back = read_pfm(path)
    assert back.dtype == np.float32 and np.array_equal(back, img)
    assert open(path, "rb").read(3) == b"PF\n"


def test_png_gamma_and_clamp(tmp_path):
    img = np.array([[[0.5, -1.0, 2.0]]])
    assert to_png_bytes(img).tolist() == [[[186, 0, 255]]]
    path = tmp_path / "x.png"
    write_image(img, path)
    assert read_image(path)[0, 0, 0] == pytest.approx((186 / 255) ** 2.2)


def test_unknown_image_format(tmp_path):
    with pytest.raises(ValueError):
        write_image(np.zeros((2, 2, 3)), tmp_path / "x.exr", "exr")


def test_scene_json_round_trip(tmp_path):
    scene = small_scene(128, defocus_sigma_px=5.0)
    path = tmp_path / "scene.json"
    path.write_text(json.dumps(scene.to_dict()))
    assert CaptureScene.from_json(path) == scene


@pytest.mark.parametrize("bad", [{"resolution": 0}, {"camera_pos": [0, 0, -1]},
                                 {"light_back_pos": [0, 0, 5]}, {"warp_speed": 9}])
def test_scene_config_errors(bad):
    with pytest.raises(ConfigError):
        CaptureScene.from_dict(bad)


def test_default_scene_geometry():
    s = CaptureScene()
    assert s.camera_pos[2] == pytest.approx(20 / 2.54)
    assert s.light_front_pos[2] == pytest.approx(30 / 2.54)
    assert s.light_back_pos[2] == pytest.approx(-30 / 2.54)
    assert s.defocus_scale == 8.0 and s.defocus_sigma_px == 20.0


def test_surface_cache_reuses_geometry():
    r = Renderer(small_scene(32), cache_size=2)
    p = colored(1)
    q = p.copy()
    q.k_d_r = np.zeros(3)
    assert r.surface(p) is r.surface(q)
    q.weft.density += 1
    assert r.surface(p) is not r.surface(q)


def test_default_params_render():
    reflect, transmit = render_pair(small_scene(32), FabricParams())
    assert reflect.mean() > 0 and transmit.mean() > 0
