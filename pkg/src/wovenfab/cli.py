"""Command-line entry point: render, fit, oracle, gen-dataset, validate.

Exit codes: 0 success, 1 runtime or numeric failure, 2 usage or config error.
"""
import argparse
import csv
import json
import os
import sys

import numpy as np

from .errors import ConfigError, EstimationError, FitError, ParameterError
from .fabric import FabricParams, sample_params_for_pattern
from .layer import LayerParams
from .render import CaptureScene, Renderer, read_image, write_image


class UsageError(Exception):
    pass


def _print_config(command, args, **extra):
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    cfg.update(extra)
    print(json.dumps({"command": command, "config": cfg}, indent=2, sort_keys=True, default=str), flush=True)


def _write_pair(prefix, pair):
    paths = []
    for name, img in zip(("reflect", "transmit"), pair):
        for ext, fmt in (("pfm", "pfm"), ("png", "png_gamma22")):
            path = f"{prefix}_{name}.{ext}"
            write_image(img, path, fmt)
            paths.append(path)
    return paths


def _load_scene(path, **overrides):
    scene = CaptureScene.from_json(path)
    for k, v in overrides.items():
        if v is not None:
            setattr(scene, k, v)
    scene.__post_init__()
    return scene


def cmd_render(args):
    params = FabricParams.from_json(args.params)
    scene = _load_scene(args.scene, supersample=True if args.supersample else None)
    _print_config("render", args, params=params.to_dict(), scene=scene.to_dict())
    pair = Renderer(scene, threads=args.threads).render_pair(params, seed=args.seed)
    for path in _write_pair(args.out_prefix, pair):
        print(path)
    return 0


def cmd_fit(args):
    from .fit import Objective, multi_start, optimize
    scene = _load_scene(args.scene)
    target = [np.asarray(read_image(p), dtype=float) for p in (args.reflect, args.transmit)]
    res = scene.resolution
    for path, img in zip((args.reflect, args.transmit), target):
        if img.shape[:2] != (res, res):
            raise UsageError(f"{path} is {img.shape[1]}x{img.shape[0]} but the scene renders {res}x{res}")
    _print_config("fit", args, scene=scene.to_dict())
    renderer = Renderer(scene, threads=args.threads)
    init = multi_start(target, scene, args.starts, args.seed, renderer=renderer)
    if args.iters > 0:
        state = optimize(target, scene, init, iters=args.iters, seed=args.seed, renderer=renderer)
        report = state.report()
        fitted = state.params
    else:
        fitted = init
        loss = Objective(target, renderer)(init)
        report = {"init_params": init.to_dict(), "init_loss": loss, "final_params": init.to_dict(),
                  "best_loss": loss, "iterations": 0, "loss_trace": [], "discrete_moves": [],
                  "seed": args.seed, "wall_time_s": 0.0}
    with open(args.out, "w") as fh:
        json.dump({"params": fitted.to_dict(), "report": report}, fh, indent=2)
    stem = os.path.splitext(args.out)[0]
    paths = _write_pair(stem, renderer.render_pair(fitted))
    print(args.out)
    for p in paths:
        print(p)
    print(f"loss: initial {report['init_loss']:.6g} best {report['best_loss']:.6g}")
    return 0


def _parse_wi(text):
    try:
        theta, phi = (float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"--wi expects 'theta,phi' in degrees, got {text!r}") from None
    th, ph = np.radians(theta), np.radians(phi)
    return np.array([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)])


def _load_layer(path):
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError("<json>", f"{path}: line {e.lineno}: {e.msg}") from None
    for name in ("alpha", "T", "t"):
        if name not in d:
            raise ConfigError(name)
    k_s = d.get("k_s", 1.0)
    k_s = np.broadcast_to(np.asarray(k_s, dtype=float), (3,)).copy()
    alpha = float(d["alpha"])
    if not 0 < alpha <= 1:
        raise ConfigError("alpha", "field 'alpha' must lie in (0, 1]")
    if float(d["T"]) < 0:
        raise ConfigError("T", "field 'T' must be nonnegative")
    t = np.asarray(d["t"], dtype=float)
    if t.shape != (3,) or not np.linalg.norm(t) > 0:
        raise ConfigError("t", "field 't' must be a nonzero 3-vector")
    layer = LayerParams(k_s, alpha, float(d["T"]), t, np.asarray(d.get("normal", [0.0, 0.0, 1.0]), dtype=float))
    return layer, d


def cmd_oracle(args):
    from .oracle import MODELS, azimuthal_uniformity, fit_lobe, walk_slab
    if args.paths < 1:
        raise UsageError("--paths must be at least 1")
    layer, raw = _load_layer(args.layer)
    wi = _parse_wi(args.wi)
    multi_from = int(raw.get("multi_from", 2))
    _print_config("oracle", args, layer=raw, multi_from=multi_from)
    tables = walk_slab(wi, layer, args.paths, seed=args.seed, multi_from=multi_from)
    stem = os.path.splitext(args.out)[0]
    for cls in ("single", "multi"):
        path = f"{stem}_{cls}.csv"
        tables[cls].to_csv(path)
        print(path)
    if args.fit_both:
        about_fiber = walk_slab(wi, layer, args.paths, seed=args.seed, axis=layer.t, multi_from=multi_from)
        summary = {"azimuthal_uniformity": azimuthal_uniformity(about_fiber["multi"], 36)}
        for hem in ("transmit", "reflect"):
            for m in MODELS:
                summary[f"{m}/{hem}"] = fit_lobe(tables["multi"], m, hem)["rel_l2_error"]
        summary["asggx_beats_sggx_transmit"] = summary["asggx_form/transmit"] < summary["sggx_single_form/transmit"]
        print("summary " + json.dumps(summary))
    return 0


def cmd_gen_dataset(args):
    if args.per_pattern < 1:
        raise UsageError("--per-pattern must be at least 1")
    scene = _load_scene(args.scene) if args.scene else CaptureScene(resolution=args.resolution)
    _print_config("gen-dataset", args, scene=scene.to_dict())
    os.makedirs(args.out, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    renderer = Renderer(scene, threads=args.threads, cache_size=1)
    rows = []
    for pattern in range(5):
        for i in range(args.per_pattern):
            p = sample_params_for_pattern(rng, pattern)
            stem = f"p{pattern}_{i:04d}"
            p.to_json(os.path.join(args.out, stem + ".json"))
            _write_pair(os.path.join(args.out, stem), renderer.render_pair(p))
            rows.append({"id": stem, "pattern": pattern, "params": stem + ".json",
                         "reflect": stem + "_reflect.pfm", "transmit": stem + "_transmit.pfm",
                         "density_weft": p.weft.density, "density_warp": p.warp.density})
    with open(os.path.join(args.out, "manifest.csv"), "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(rows[0]))
        wr.writeheader()
        wr.writerows(rows)
    print(os.path.join(args.out, "manifest.csv"))
    return 0


def cmd_validate(args):
    from . import validate
    numbers = None
    if args.only:
        try:
            numbers = {int(v) for v in args.only.split(",")}
        except ValueError:
            raise UsageError(f"--only expects comma-separated criterion numbers, got {args.only!r}") from None
    _print_config("validate", args)
    results = validate.run(numbers)
    return 0 if all(r.passed for r in results) else 1


def build_parser():
    ap = argparse.ArgumentParser(prog="wovenfab", description="Woven fabric appearance: render, fit, validate.")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("render", help="render the reflection/transmission pair")
    r.add_argument("params")
    r.add_argument("scene")
    r.add_argument("out_prefix")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--supersample", action="store_true")
    r.add_argument("--threads", type=int, default=1)
    r.set_defaults(func=cmd_render)

    f = sub.add_parser("fit", help="recover fabric parameters from an image pair")
    f.add_argument("reflect")
    f.add_argument("transmit")
    f.add_argument("scene")
    f.add_argument("--starts", type=int, default=200)
    f.add_argument("--iters", type=int, default=300)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", default="fitted.json")
    f.add_argument("--threads", type=int, default=1)
    f.set_defaults(func=cmd_fit)

    o = sub.add_parser("oracle", help="Monte Carlo slab reference lobes")
    o.add_argument("layer")
    o.add_argument("--wi", default="30,0", help="incident direction 'theta,phi' in degrees")
    o.add_argument("--paths", type=lambda s: int(float(s)), default=10 ** 6)
    o.add_argument("--out", default="lobe.csv")
    o.add_argument("--fit-both", action="store_true")
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--threads", type=int, default=1)
    o.set_defaults(func=cmd_oracle)

    g = sub.add_parser("gen-dataset", help="sample parameters and render training pairs")
    g.add_argument("--per-pattern", type=int, default=2)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default="dataset")
    g.add_argument("--scene", default=None)
    g.add_argument("--resolution", type=int, default=512)
    g.add_argument("--threads", type=int, default=1)
    g.set_defaults(func=cmd_gen_dataset)

    v = sub.add_parser("validate", help="run the acceptance checks")
    v.add_argument("--only", default=None, help="comma-separated criterion numbers")
    v.set_defaults(func=cmd_validate)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (FitError, EstimationError, ParameterError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
