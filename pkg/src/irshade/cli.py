"""Command line interface: ``irshade <command> ...``.

Commands: ``calibrate gamma|falloff``, ``albedo``, ``refine``, ``render``,
``synth``, ``eval loo|dist`` and ``run`` (whole pipeline from a config).
Every command exits with status 0 on success and 1 on any error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import yaml

log = logging.getLogger("irshade")


def _seed(args):
    return int(time.time_ns() % (2 ** 31)) if getattr(args, "random_seed", False) else args.seed


def _light(args, gamma=1.0):
    from .shading import LightModel
    return LightModel(args.brightness, args.ambient, gamma)


def _load_config(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    return yaml.safe_load(p.read_text()) or {}


def _linear_views(views, gamma):
    from .shading import linearize
    return [v.with_image(linearize(v.image, gamma) if v.image.gamma_applied else v.image)
            for v in views]


def _require_gamma(args, cfg):
    g = args.gamma if args.gamma is not None else cfg.get("light", {}).get("gamma")
    if g is None:
        raise ValueError("gamma is not specified; pass --gamma or run `irshade calibrate gamma` first")
    return float(g)


# commands ---------------------------------------------------------------------


def cmd_calibrate_gamma(args):
    from .calibration import build_sphere_samples, fit_gamma_ransac
    from .io import load_views, read_mesh

    views = load_views(args.views, gamma_applied=True)
    samples = build_sphere_samples(read_mesh(args.sphere), views, _light(args), args.albedo)
    fit = fit_gamma_ransac(samples, min(args.n_samples, len(samples)), args.iterations,
                           args.threshold, _seed(args))
    print(f"gamma {fit.gamma:.6f}")
    print(f"inlier_ratio {fit.inlier_ratio:.4f}")
    print(f"pairs {len(samples)}")
    if args.config:
        p = Path(args.config)
        doc = (yaml.safe_load(p.read_text()) or {}) if p.exists() else {}
        doc.setdefault("light", {})["gamma"] = float(fit.gamma)
        p.write_text(yaml.safe_dump(doc, sort_keys=True))
        print(f"wrote gamma to {p}")


def cmd_calibrate_falloff(args):
    from .calibration import fit_falloff_exponent
    from .io import read_falloff_csv

    d, i = read_falloff_csv(args.samples)
    fit = fit_falloff_exponent((d, i))
    print(f"exponent {fit.exponent:.6f}")
    print(f"scale {fit.scale:.6g}")


def cmd_albedo(args):
    from .albedo import AlbedoEstimator
    from .io import load_views, read_mesh, save_albedo

    cfg = _load_config(args.config)
    gamma = _require_gamma(args, cfg)
    views = _linear_views(load_views(args.views), gamma)
    est = AlbedoEstimator(args.mode, args.variance_target, lambda_pairwise=args.lambda_pairwise,
                          seed=_seed(args))
    est.fit(read_mesh(args.mesh), views, _light(args))
    save_albedo(args.out, est.model_)
    if est.model_.mode == "global":
        print(f"albedo {est.model_.global_value:.6g}")
    else:
        print(f"groups {est.n_groups_}: " + " ".join(f"{v:.6g}" for v in est.model_.group_values))
    print(f"wrote {args.out}")


def cmd_refine(args):
    from .io import iteration_rows, load_albedo, load_views, read_mesh, write_csv, write_mesh
    from .refine import RefinementConfig, refine

    cfg = _load_config(args.config)
    rcfg = dict(cfg.get("refinement", {}))
    for flag, key in (("lambda1", "lambda1"), ("lambda2", "lambda2"), ("iters", "iterations")):
        if getattr(args, flag) is not None:
            rcfg[key] = getattr(args, flag)
    gamma = _require_gamma(args, cfg)
    views = _linear_views(load_views(args.views), gamma)
    config = RefinementConfig(lambda1=float(rcfg.get("lambda1", 1.0)),
                              lambda2=float(rcfg.get("lambda2", 0.1)),
                              outer_iterations=int(rcfg.get("iterations", 10)),
                              convergence_tol=rcfg.get("convergence_tol"),
                              displacement_cap=rcfg.get("displacement_cap"),
                              nl_floor=float(rcfg.get("nl_floor", 0.05)))
    result = refine(read_mesh(args.mesh), views, load_albedo(args.albedo), _light(args), config)
    write_mesh(args.out, result.mesh)
    if args.diagnostics:
        write_csv(args.diagnostics, iteration_rows(result.history))
    last = result.history[-1]
    print(f"iterations {len(result.history)} converged {result.converged}")
    print(f"E_p {last.E_p:.6g} E_s {last.E_s:.6g} E_r {last.E_r:.6g} max_delta {last.max_delta:.6g}")
    print(f"wrote {args.out}")


def cmd_render(args):
    from .io import load_albedo, load_views, read_mesh, write_image
    from .shading import render_shading_image

    mesh = read_mesh(args.mesh)
    albedo = load_albedo(args.albedo)
    light = _light(args, args.gamma if args.gamma is not None else 1.0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, v in enumerate(load_views(args.views, load_images=False)):
        name = v.name or f"view{k:02d}"
        write_image(out / f"{name}.{args.format}", render_shading_image(mesh, v, albedo, light))
    print(f"rendered {k + 1} views to {out}")


def cmd_synth(args):
    from .io import save_scene
    from .synth import generate_scene

    params = {}
    if args.views is not None:
        params["n_views"] = args.views
    for item in args.param or []:
        key, _, value = item.partition("=")
        params[key] = yaml.safe_load(value)
    scene = generate_scene(args.kind, params, seed=_seed(args))
    save_scene(args.out, scene)
    print(f"{args.kind}: {scene.truth.n_vertices} vertices, {len(scene.views)} views -> {args.out}")


def cmd_eval_loo(args):
    from .evaluate import leave_one_out_eval
    from .io import load_scene, write_csv
    from .refine import RefinementConfig

    scene = load_scene(args.scene)
    cfg = _load_config(args.config).get("refinement", {})
    config = RefinementConfig(lambda1=float(cfg.get("lambda1", 1.0)), lambda2=float(cfg.get("lambda2", 0.1)),
                              outer_iterations=int(cfg.get("iterations", 10)))
    reports = leave_one_out_eval(scene, config)
    rows = [r.as_row() for r in reports]
    if args.out:
        write_csv(args.out, rows)
    else:
        import csv
        w = csv.DictWriter(sys.stdout, fieldnames=list(rows[0].keys()) if rows else ["view"])
        w.writeheader()
        w.writerows(rows)


def cmd_eval_dist(args):
    from .evaluate import align_icp, mesh_distance
    from .io import read_mesh

    mesh = read_mesh(args.mesh)
    truth = read_mesh(args.truth)
    if args.icp:
        al = align_icp(mesh, truth, max_distance=args.max_distance)
        mesh = mesh.with_vertices(al.apply(mesh.vertices))
    mean, mx = mesh_distance(mesh, truth)
    print(f"mean {mean:.6f} mm")
    print(f"max {mx:.6f} mm")


def cmd_run(args):
    from .pipeline import ProjectConfig, run_pipeline

    overrides = {}
    if args.output:
        overrides["paths"] = {"output": str(Path(args.output).resolve())}
    if args.random_seed:
        overrides["deterministic"] = False
    res = run_pipeline(ProjectConfig.load(args.config, overrides))
    print(f"refined mesh: {res.mesh.n_vertices} vertices; gamma {res.gamma:.4f}")
    if res.distance is not None:
        print(f"distance to truth: mean {res.distance[0]:.4f} mm, max {res.distance[1]:.4f} mm")
    print(f"manifest {res.manifest}")


# parser -----------------------------------------------------------------------


def _common(p, light=True):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--random-seed", action="store_true", help="seed from the clock instead of --seed")
    if light:
        p.add_argument("--brightness", type=float, default=1.0, help="global brightness multiplier")
        p.add_argument("--ambient", type=float, default=0.0)


def build_parser():
    ap = argparse.ArgumentParser(prog="irshade", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    cal = sub.add_parser("calibrate", help="radiometric calibration")
    csub = cal.add_subparsers(dest="what", required=True)
    g = csub.add_parser("gamma", help="fit the camera gamma from a white sphere")
    g.add_argument("--sphere", required=True)
    g.add_argument("--views", required=True)
    g.add_argument("--albedo", type=float, required=True, help="c*rho of the sphere")
    g.add_argument("--n-samples", type=int, default=1000)
    g.add_argument("--iterations", type=int, default=1000)
    g.add_argument("--threshold", type=float, default=0.05)
    g.add_argument("--config", help="YAML config that receives light.gamma")
    _common(g)
    g.set_defaults(func=cmd_calibrate_gamma)
    f = csub.add_parser("falloff", help="fit the light falloff exponent")
    f.add_argument("--samples", required=True, help="CSV with distance,intensity columns")
    f.set_defaults(func=cmd_calibrate_falloff)

    a = sub.add_parser("albedo", help="estimate the albedo model")
    a.add_argument("--mode", choices=("global", "grouped"), default="global")
    a.add_argument("--mesh", required=True)
    a.add_argument("--views", required=True)
    a.add_argument("--gamma", type=float)
    a.add_argument("--config")
    a.add_argument("--variance-target", type=float, default=0.95)
    a.add_argument("--lambda-pairwise", type=float)
    a.add_argument("--out", default="albedo.txt")
    _common(a)
    a.set_defaults(func=cmd_albedo)

    r = sub.add_parser("refine", help="refine a mesh against shading images")
    r.add_argument("--mesh", required=True)
    r.add_argument("--views", required=True)
    r.add_argument("--albedo", required=True)
    r.add_argument("--gamma", type=float)
    r.add_argument("--config")
    r.add_argument("--lambda1", type=float)
    r.add_argument("--lambda2", type=float)
    r.add_argument("--iters", type=int)
    r.add_argument("--out", required=True)
    r.add_argument("--diagnostics")
    _common(r)
    r.set_defaults(func=cmd_refine)

    rd = sub.add_parser("render", help="render shading images of a mesh")
    rd.add_argument("--mesh", required=True)
    rd.add_argument("--views", required=True)
    rd.add_argument("--albedo", required=True)
    rd.add_argument("--gamma", type=float)
    rd.add_argument("--format", choices=("png", "pfm"), default="png")
    rd.add_argument("--out", required=True)
    _common(rd)
    rd.set_defaults(func=cmd_render)

    s = sub.add_parser("synth", help="generate a synthetic scene")
    s.add_argument("--kind", default="bumpy_sphere",
                   choices=("sphere", "bumpy_sphere", "relief_plane", "two_material_plane"))
    s.add_argument("--views", type=int)
    s.add_argument("--param", action="append", help="extra generation parameter key=value")
    s.add_argument("--out", required=True)
    _common(s, light=False)
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("eval", help="evaluation protocols")
    esub = e.add_subparsers(dest="what", required=True)
    lo = esub.add_parser("loo", help="leave-one-out image RMSE")
    lo.add_argument("--scene", required=True)
    lo.add_argument("--config")
    lo.add_argument("--out", help="CSV report (stdout when omitted)")
    lo.set_defaults(func=cmd_eval_loo)
    di = esub.add_parser("dist", help="mesh-to-truth distance")
    di.add_argument("--mesh", required=True)
    di.add_argument("--truth", required=True)
    di.add_argument("--icp", action="store_true")
    di.add_argument("--max-distance", type=float)
    di.set_defaults(func=cmd_eval_dist)

    run = sub.add_parser("run", help="run the whole pipeline from a YAML config")
    run.add_argument("--config", required=True)
    run.add_argument("--output")
    run.add_argument("--random-seed", action="store_true")
    run.set_defaults(func=cmd_run)
    return ap


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure maps to exit status 1
        if args.verbose > 1:
            raise
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
