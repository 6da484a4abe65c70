"""Acceptance checks, one function per criterion, shared by the test suite and the CLI."""
import json
import os
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np

from .fabric import FabricParams
from .fit import (DEFAULT_WEIGHTS, multi_start, optimize, perturbation_steps, total_loss)
from .layer import LayerParams, multiple_scatter
from .microflake import asggx_phase, fiber_sggx, fiber_sigma, normalize, sphere_grid
from .oracle import MODELS, analytic_lobe, azimuthal_uniformity, fit_lobe, walk_slab
from .render import CaptureScene, Renderer
from .weave import S_MIN, YarnParams, pattern_grid, tension_thickness


@dataclass
class CriterionResult:
    number: int
    title: str
    passed: bool
    detail: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] criterion {self.number}: {self.title} ({self.seconds:.1f}s) {json.dumps(self.detail, default=_jsonable)}"


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    return str(v)


def _timed(number, title):
    def wrap(fn):
        def run(*args, **kwargs):
            t0 = time.perf_counter()
            passed, detail = fn(*args, **kwargs)
            return CriterionResult(number, title, bool(passed), detail, time.perf_counter() - t0)
        run.number = number
        run.title = title
        return run
    return wrap


def _direction(theta, phi):
    return np.array([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)])


@_timed(1, "ASGGX phase function integrates to 1 over the sphere")
def criterion_1(tol=2e-3, n_theta=512, n_phi=1024):
    t = np.array([0.0, 0.0, 1.0])
    w, weights = sphere_grid(n_theta, n_phi)
    integrals = {}
    for alpha in (0.1, 0.5, 1.0):
        S = fiber_sggx(alpha, t)
        for deg in (10.0, 45.0, 80.0):
            wi = _direction(np.radians(deg), 0.3)
            val = float(np.sum(asggx_phase(wi, w, S, t) * weights))
            integrals[f"alpha={alpha},theta={deg:g}"] = round(val, 5)
    worst = max(abs(v - 1.0) for v in integrals.values())
    return worst <= tol, {"max_abs_deviation": round(worst, 5), "integrals": integrals}


def _random_unit(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _rotate_about(v, axis, angle):
    axis = normalize(axis)
    c, s = np.cos(angle)[..., None], np.sin(angle)[..., None]
    return v * c + np.cross(axis, v) * s + axis * (np.sum(axis * v, -1, keepdims=True)) * (1 - c)


@_timed(2, "ASGGX reciprocity and azimuthal invariance")
def criterion_2(n=1000, tol=1e-9, seed=7):
    rng = np.random.default_rng(seed)
    t = _random_unit(rng, n)
    alpha = rng.uniform(0.05, 1.0, n)
    wi, wo = _random_unit(rng, n), _random_unit(rng, n)
    worst_recip = worst_recip_lobe = worst_az = 0.0
    for k in range(n):
        S = fiber_sggx(alpha[k], t[k])
        a = fiber_sigma(wi[k], t[k], alpha[k]) * asggx_phase(wi[k], wo[k], S, t[k])
        b = fiber_sigma(wo[k], t[k], alpha[k]) * asggx_phase(wo[k], wi[k], S, t[k])
        worst_recip = max(worst_recip, abs(a - b) / max(abs(a), abs(b), 1e-300))
        spin = rng.uniform(0, 2 * np.pi)
        c = asggx_phase(wi[k], _rotate_about(wo[k], t[k], np.array(spin)), S, t[k])
        d = asggx_phase(wi[k], wo[k], S, t[k])
        worst_az = max(worst_az, abs(c - d) / max(abs(d), 1e-300))
    # the multiple-scattering lobe itself, against a tilted slab
    normal = np.array([0.0, 0.0, 1.0])
    ok = (np.abs(wi[:, 2]) > 1e-3) & (np.abs(wo[:, 2]) > 1e-3)
    p = LayerParams(np.ones(3), alpha[ok], rng.uniform(0.1, 5.0, ok.sum()), t[ok], normal)
    f = multiple_scatter(wi[ok], wo[ok], p)
    g = multiple_scatter(wo[ok], wi[ok], p)
    fv, gv = (f.reflect + f.transmit)[:, 0], (g.reflect + g.transmit)[:, 0]
    worst_recip_lobe = float(np.max(np.abs(fv - gv) / np.maximum(np.maximum(fv, gv), 1e-300)))
    detail = {"phase_reciprocity": float(worst_recip), "lobe_reciprocity": worst_recip_lobe,
              "azimuthal_invariance": float(worst_az)}
    return max(detail.values()) <= tol, detail


SINGLE_CHECK_WI = _direction(np.radians(30.0), 0.0)
IN_PLANE_FIBER = np.array([np.cos(0.4), np.sin(0.4), 0.0])


@_timed(3, "single-bounce oracle lobe matches the analytic single-scattering lobe")
def criterion_3(n_paths=10 ** 7, seed=11):
    detail = {}
    passed = True
    for alpha in (0.3, 0.8):
        for T in (0.5, 2.0):
            p = LayerParams(np.ones(3), alpha, T, IN_PLANE_FIBER)
            tab = walk_slab(SINGLE_CHECK_WI, p, n_paths, seed=seed)["single"]
            est, se = tab.estimate()[..., 0], tab.std_error()[..., 0]
            ref = analytic_lobe(tab, "sggx_single_form", 1.0, alpha, T, sub=8)
            occupied = tab.counts > 0
            within = np.abs(est - ref) <= 3.0 * se
            frac = float(within[occupied].mean())
            detail[f"alpha={alpha},T={T}"] = round(frac, 4)
            passed &= frac >= 0.9
    return passed, detail


@_timed(4, "multi-bounce exit distribution is uniform in azimuth about the fiber")
def criterion_4(n_paths=10 ** 7, seed=13, fiber=(0.0, 0.0, 1.0)):
    t = np.asarray(fiber, dtype=float)
    p = LayerParams(np.ones(3), 0.5, 2.0, t)
    tabs = walk_slab(SINGLE_CHECK_WI, p, n_paths, seed=seed, axis=t, multi_from=3)
    u_multi = azimuthal_uniformity(tabs["multi"], 36)
    u_single = azimuthal_uniformity(tabs["single"], 36)
    return u_multi < 0.05, {"multi_relative_std": round(u_multi, 5),
                            "single_relative_std": round(u_single, 5)}


@_timed(5, "ASGGX fits the multi-bounce transmission lobe better than SGGX")
def criterion_5(n_paths=2 * 10 ** 6, seed=17):
    detail = {}
    passed = True
    for alpha, T in ((0.5, 2.0), (0.3, 1.0)):
        p = LayerParams(np.full(3, 0.9), alpha, T, IN_PLANE_FIBER)
        multi = walk_slab(SINGLE_CHECK_WI, p, n_paths, seed=seed)["multi"]
        err = {(m, h): fit_lobe(multi, m, h)["rel_l2_error"] for m in MODELS for h in ("transmit", "reflect")}
        trans_ok = err[("asggx_form", "transmit")] < err[("sggx_single_form", "transmit")]
        r_a, r_s = err[("asggx_form", "reflect")], err[("sggx_single_form", "reflect")]
        refl_ok = max(r_a, r_s) <= 2.0 * min(r_a, r_s)
        passed &= trans_ok and refl_ok
        detail[f"alpha={alpha},T={T}"] = {f"{m}/{h}": round(v, 4) for (m, h), v in err.items()}
    return passed, detail


@_timed(6, "tension-aware thickness endpoints")
def criterion_6():
    detail = {}
    ok = True
    for name in ("plain", "twill", "twill90", "satin", "satin90"):
        s_min = pattern_grid(name).s_min
        expected = {"plain": 1.0}.get(name, 0.5)
        for T in (0.1, 1.23, 3.75, 5.0):
            ok &= tension_thickness(T, 0.0, s_min) == T
            ok &= tension_thickness(T, 1.0, s_min) == s_min * T
        ok &= s_min == expected
        detail[name] = s_min
    ok &= S_MIN == {"plain": 1.0, "twill": 0.5, "satin": 0.5}
    return ok, detail


def prior_mean_params(pattern=1):
    fam = pattern_grid(pattern).family
    mb = DEFAULT_WEIGHTS.beta_prior[fam][0]
    mx = DEFAULT_WEIGHTS.xi_prior[fam][0]
    p = FabricParams(pattern=pattern)
    for y in (p.weft, p.warp):
        y.beta, y.xi = mb, mx
    return p


@_timed(7, "loss bookkeeping and weights")
def criterion_7(resolution=64):
    scene = CaptureScene(resolution=resolution)
    p = prior_mean_params(3)
    pair = Renderer(scene).render_pair(p)
    same = total_loss(pair, pair, p)
    # a prior term of exactly 2.0: satin, one gap scaling 0.1 below its mean
    q = prior_mean_params(3)
    q.weft.xi = 0.8
    prior_only = total_loss(pair, pair, q)
    ok = same == 0.0 and abs(prior_only - 0.002) < 1e-12
    return ok, {"identical_loss": same, "prior_only_total": prior_only,
                "w1": DEFAULT_WEIGHTS.w1, "w2": DEFAULT_WEIGHTS.w2}


def _yarn(density, alpha_s, T_s, k_s, beta, xi, twist=0.0):
    return YarnParams(density=density, alpha_s=alpha_s, alpha_m=min(1.0, 1.5 * alpha_s), T_s=T_s,
                      T_m=T_s, k_s_s=k_s, beta=beta, xi=xi, twist=twist)


def round_trip_targets():
    """Synthetic fabrics whose roughness/thickness follow the published recovery table."""
    return {
        "yellow plain": FabricParams(0, weft=_yarn(100, .26, 1.23, (.9, .8, .25), 1.0, .75),
                                     warp=_yarn(100, .26, 1.23, (.9, .8, .25), 1.0, .75),
                                     k_d_r=(.75, .6, .1), k_d_t=(.6, .5, .1), w=.5, w_m=1.0),
        "blue satin": FabricParams(3, weft=_yarn(120, .90, 3.75, (.25, .35, .85), .3, .9),
                                   warp=_yarn(150, .22, 1.12, (.25, .35, .85), .3, .9),
                                   k_d_r=(.1, .15, .55), k_d_t=(.1, .15, .5), w=.5, w_m=1.0),
        "brown satin": FabricParams(4, weft=_yarn(110, .80, 2.81, (.6, .4, .25), .3, .9),
                                    warp=_yarn(140, .34, 1.20, (.6, .4, .25), .3, .9),
                                    k_d_r=(.4, .25, .12), k_d_t=(.35, .2, .1), w=.5, w_m=1.0),
        "pink twill": FabricParams(1, weft=_yarn(90, .93, 1.08, (.9, .5, .6), 1.0, .9, -30),
                                   warp=_yarn(110, .87, 3.98, (.9, .5, .6), 1.0, .9, -30),
                                   k_d_r=(.8, .35, .45), k_d_t=(.7, .3, .4), w=.5, w_m=1.0),
        "green twill": FabricParams(2, weft=_yarn(100, .71, 2.16, (.3, .7, .35), 1.0, .9, -30),
                                    warp=_yarn(130, .50, 2.46, (.3, .7, .35), 1.0, .9, -30),
                                    k_d_r=(.15, .5, .2), k_d_t=(.12, .45, .15), w=.5, w_m=1.0),
    }


ROUND_TRIP_SCENE = dict(resolution=128, defocus_sigma_px=5.0)


def round_trip(name, starts=200, iters=300, seed=0, threads=1):
    gt = round_trip_targets()[name]
    scene = CaptureScene(**ROUND_TRIP_SCENE)
    renderer = Renderer(scene, threads=threads)
    target = renderer.render_pair(gt)
    t0 = time.perf_counter()
    init = multi_start(target, scene, starts, seed, renderer=renderer)
    state = optimize(target, scene, init, iters=iters, seed=seed, renderer=renderer)
    fitted = state.params
    out = {"pattern": (gt.pattern, fitted.pattern), "seconds": round(time.perf_counter() - t0, 1),
           "loss": (state.init_loss, state.best_loss)}
    for kind in ("warp", "weft"):
        g, f = getattr(gt, kind), getattr(fitted, kind)
        out[f"alpha_s_{kind}"] = (g.alpha_s, round(f.alpha_s, 3))
        out[f"T_s_{kind}"] = (g.T_s, round(f.T_s, 3))
    return out


@_timed(8, "synthetic round-trip recovery")
def criterion_8(starts=200, iters=300, seed=0, names=None, threads=1):
    names = names or list(round_trip_targets())
    runs = {n: round_trip(n, starts, iters, seed, threads) for n in names}
    pattern_hits = sum(r["pattern"][0] == r["pattern"][1] for r in runs.values())
    rough = [abs(r[k][0] - r[k][1]) for r in runs.values() for k in ("alpha_s_warp", "alpha_s_weft")]
    thick = [abs(r[k][0] - r[k][1]) for r in runs.values() for k in ("T_s_warp", "T_s_weft")]
    detail = {"pattern_correct": f"{pattern_hits}/{len(runs)}",
              "roughness_median": round(float(np.median(rough)), 3), "roughness_max": round(max(rough), 3),
              "thickness_median": round(float(np.median(thick)), 3), "thickness_max": round(max(thick), 3),
              "runs": runs}
    passed = (pattern_hits >= 4 * len(runs) / 5 and np.median(rough) <= 0.15 and max(rough) <= 0.35
              and np.median(thick) <= 0.8 and max(thick) <= 1.6)
    return passed, detail


@_timed(9, "discrete perturbation schedule conformance")
def criterion_9(iters=300, resolution=32, seed=3):
    gt = round_trip_targets()["green twill"]
    scene = CaptureScene(resolution=resolution, defocus_sigma_px=5.0 * resolution / 128)
    renderer = Renderer(scene)
    target = renderer.render_pair(gt)
    init = gt.copy()
    init.weft.density += 20.0
    init.warp.xi = 0.8
    state = optimize(target, scene, init, iters=iters, seed=seed, renderer=renderer)
    bad_steps = 0
    for mv in state.moves:
        d, tw, xi = perturbation_steps(mv["iteration"])
        expected = np.array([d, d, xi, xi, tw, tw])
        if not np.array_equal(np.abs(mv["steps"]), expected):
            bad_steps += 1
    iterations = [mv["iteration"] for mv in state.moves]
    cadence_ok = iterations == list(range(5, iters, 5))
    accepted = [mv for mv in state.moves if mv["accepted"]]
    lowers = all(mv["loss_candidate"] < mv["loss_before"] for mv in accepted)
    best = np.asarray(state.best_trace)
    monotone = bool(np.all(np.diff(best) <= 0.0))
    bands = {}
    for mv in state.moves:
        band = perturbation_steps(mv["iteration"])
        bands[str(band)] = bands.get(str(band), 0) + 1
    detail = {"moves": len(state.moves), "accepted": len(accepted), "bad_step_sizes": bad_steps,
              "cadence_ok": cadence_ok, "accepted_moves_lower_loss": lowers,
              "best_so_far_non_increasing": monotone, "moves_per_band": bands}
    return bad_steps == 0 and cadence_ok and lowers and monotone, detail


def _cli(*args, cwd=None):
    cmd = [sys.executable, "-m", "wovenfab.cli", *map(str, args)]
    return subprocess.run(cmd, cwd=cwd, capture_output=True, text=True)


def _read(path):
    with open(path, "rb") as fh:
        return fh.read()


@_timed(10, "render and fit are bit-identical across reruns and thread counts")
def criterion_10(resolution=64):
    detail = {}
    with tempfile.TemporaryDirectory() as tmp:
        params = os.path.join(tmp, "params.json")
        scene = os.path.join(tmp, "scene.json")
        round_trip_targets()["pink twill"].to_json(params)
        with open(scene, "w") as fh:
            json.dump({"resolution": resolution, "defocus_sigma_px": 5.0}, fh)
        outputs = {}
        for tag, threads in (("a", 1), ("b", 1), ("c", 4)):
            r = _cli("render", params, scene, os.path.join(tmp, tag), "--seed", 5, "--threads", threads)
            if r.returncode != 0:
                return False, {"render_error": r.stderr[-500:]}
            outputs[tag] = [_read(os.path.join(tmp, f"{tag}_{k}.pfm")) for k in ("reflect", "transmit")]
        detail["render_rerun_identical"] = outputs["a"] == outputs["b"]
        detail["render_threads_identical"] = outputs["a"] == outputs["c"]

        fits = {}
        for tag, threads in (("a", 1), ("b", 1), ("c", 3)):
            out = os.path.join(tmp, f"fit_{tag}.json")
            r = _cli("fit", os.path.join(tmp, "a_reflect.pfm"), os.path.join(tmp, "a_transmit.pfm"), scene,
                     "--starts", 2, "--iters", 6, "--seed", 9, "--threads", threads, "--out", out)
            if r.returncode != 0:
                return False, {**detail, "fit_error": r.stderr[-500:]}
            with open(out) as fh:
                rep = json.load(fh)
            rep["report"].pop("wall_time_s", None)
            fits[tag] = json.dumps(rep, sort_keys=True)
        detail["fit_rerun_identical"] = fits["a"] == fits["b"]
        detail["fit_threads_identical"] = fits["a"] == fits["c"]
    return all(detail.values()), detail


CRITERIA = (criterion_1, criterion_2, criterion_3, criterion_4, criterion_5,
            criterion_6, criterion_7, criterion_8, criterion_9, criterion_10)


def run(numbers=None, stream=None):
    stream = stream or sys.stdout
    results = []
    for fn in CRITERIA:
        if numbers and fn.number not in numbers:
            continue
        res = fn()
        print(res.line(), file=stream, flush=True)
        results.append(res)
    return results
