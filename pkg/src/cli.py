"""
Command Line
============
    python src/cli.py render      --scene sphere|bumpy --out dir/ [--lights rig.json] [--cast-shadows]
    python src/cli.py calibrate   --images dir/ --proxy dir/ --keypoints 500 --d 1.0 --out rig.json
    python src/cli.py reconstruct --images dir/ --proxy dir/ --config cfg.toml --out outdir/
    python src/cli.py evaluate    --truth dir/ --recon outdir/
    python src/cli.py sweep       --scene bumpy --distances 1 2 5 10 --out dir/

Exit codes: 0 success, 2 invalid input, 3 solver divergence.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys
from typing import List, Optional

import settings
from calibration import calibrate_joint, refine_alternating
from core import normalize_observations, sample_keypoints
from errors import InputValidationError, SolverDivergence
from figures import sweep_figure
from image_io import (load_depth, load_observations, load_proxy, load_rig, save_depth, save_gradients,
                      save_keypoints_csv, save_normal_map, save_observations, save_proxy, save_rig,
                      save_validity_masks, write_pfm)
from integration import depth_error, export_mesh
from pipeline import evaluate_distance_sweep, load_config, reconstruct
from renderer import make_bumpy_scene, make_ring_rig, make_sphere_scene, perturb_proxy, render

logger = logging.getLogger(__name__)


def _depth_path(path: str) -> str:
    return os.path.join(path, "depth.pfm") if os.path.isdir(path) else path


def cmd_render(args) -> None:
    rig = load_rig(args.lights) if args.lights else make_ring_rig(args.n_lights, args.distance)
    if args.scene == "sphere":
        scene = make_sphere_scene(args.radius, rig, size=args.size, cast_shadows=args.cast_shadows)
    else:
        scene = make_bumpy_scene(args.freq, args.amp, rig, size=args.size, cast_shadows=args.cast_shadows)

    obs = render(scene)
    save_observations(obs, os.path.join(args.out, "images"), fmt=args.format)
    proxy = perturb_proxy(scene.proxy_truth, args.proxy_sigma, args.smooth_scale, args.seed)
    save_proxy(proxy, os.path.join(args.out, "proxy"))
    save_proxy(scene.proxy_truth, os.path.join(args.out, "truth"))
    save_depth(scene.depth_truth(), os.path.join(args.out, "truth", "depth.pfm"))
    write_pfm(os.path.join(args.out, "truth", "albedo.pfm"), scene.albedo)
    save_rig(rig, os.path.join(args.out, "rig.json"))
    logger.info("✓ Rendered %s scene with %d lights to %s", args.scene, rig.n_lights, args.out)


def _load_inputs(args):
    proxy = load_proxy(args.proxy)
    obs = normalize_observations(load_observations(args.images, proxy.plane))
    return obs, proxy


def cmd_calibrate(args) -> None:
    config = load_config(args.config)
    calibration = config.calibration
    if args.d is not None:
        calibration = dataclasses.replace(calibration, d=args.d)
    obs, proxy = _load_inputs(args)
    keypoints = sample_keypoints(proxy, obs, args.keypoints or config.keypoints,
                                 config.seed if args.seed is None else args.seed)
    result = refine_alternating(calibrate_joint(keypoints, calibration), keypoints, calibration)
    save_rig(result.rig, args.out)
    if args.keypoints_csv:
        save_keypoints_csv(keypoints, args.keypoints_csv)
    logger.info("✓ Calibrated %d lights from %d key points -> %s", result.rig.n_lights, keypoints.count, args.out)


def cmd_reconstruct(args) -> None:
    config = load_config(args.config)
    if args.keypoints:
        config = dataclasses.replace(config, keypoints=args.keypoints)
    if args.d is not None:
        config = config.with_distance(args.d)
    obs, proxy = _load_inputs(args)
    truth = load_depth(_depth_path(args.truth), proxy.plane) if args.truth else None

    result = reconstruct(obs, proxy, config, truth=truth)

    out = args.out
    os.makedirs(out, exist_ok=True)
    save_depth(result.depth, os.path.join(out, "depth.pfm"))
    save_normal_map(result.normals.normals, os.path.join(out, "normals.pfm"),
                    mask=result.normals.mask, preview_path=os.path.join(out, "normals.png"))
    save_gradients(result.gradients, os.path.join(out, "gradients"))
    save_rig(result.rig, os.path.join(out, "rig.json"))
    save_keypoints_csv(result.keypoints, os.path.join(out, "keypoints.csv"))
    export_mesh(result.depth, os.path.join(out, f"mesh.{args.mesh_format}"))
    if args.save_masks:
        save_validity_masks(result.valid.valid, os.path.join(out, "valid"))
    if args.emit_report == "json":
        with open(os.path.join(out, "report.json"), "w") as f:
            json.dump(result.report.to_dict(), f, indent=2)
    logger.info("✓ Reconstruction written to %s (%s)", out, result.report.stop_reason)


def cmd_evaluate(args) -> None:
    truth = load_depth(_depth_path(args.truth))
    recon = load_depth(_depth_path(args.recon), truth.plane)
    error = depth_error(recon, truth, fit_scale=args.fit_scale)
    print(json.dumps({"depth_error": error, "fit_scale": args.fit_scale}))


def cmd_sweep(args) -> None:
    config = load_config(args.config)
    if args.keypoints:
        config = dataclasses.replace(config, keypoints=args.keypoints)
    table = evaluate_distance_sweep(args.scene, args.distances, config,
                                    n_lights=args.n_lights, size=args.size)
    os.makedirs(args.out, exist_ok=True)
    table.to_csv(os.path.join(args.out, "sweep.csv"), index=False)
    table.to_json(os.path.join(args.out, "sweep.json"), orient="records", indent=2)
    sweep_figure(table).write_html(os.path.join(args.out, "sweep.html"))
    print(table.to_string(index=False))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Near point light photometric reconstruction")
    parser.add_argument("--log-level", default=None, help="Logging level (default: PSRECON_LOG_LEVEL or INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="Render a synthetic scene")
    p.add_argument("--scene", choices=["sphere", "bumpy"], default="sphere")
    p.add_argument("--lights", help="Rig JSON (default: 5-light ring)")
    p.add_argument("--n-lights", type=int, default=5)
    p.add_argument("--distance", type=float, default=1.0, help="Ring rig distance (default: 1.0)")
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--radius", type=float, default=0.3, help="Sphere radius (default: 0.3)")
    p.add_argument("--freq", type=float, default=2.0)
    p.add_argument("--amp", type=float, default=0.03)
    p.add_argument("--cast-shadows", action="store_true")
    p.add_argument("--proxy-sigma", type=float, default=0.0, help="Proxy normal error in degrees")
    p.add_argument("--smooth-scale", type=float, default=8.0)
    p.add_argument("--seed", type=int, default=settings.DEFAULT_SEED)
    p.add_argument("--format", choices=["pfm", "png"], default="pfm")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("calibrate", help="Calibrate near point lights")
    p.add_argument("--images", required=True)
    p.add_argument("--proxy", required=True)
    p.add_argument("--keypoints", type=int, default=None)
    p.add_argument("--d", type=float, default=None, help="Prior light distance")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--keypoints-csv", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("reconstruct", help="Run the full reconstruction loop")
    p.add_argument("--images", required=True)
    p.add_argument("--proxy", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--keypoints", type=int, default=None)
    p.add_argument("--d", type=float, default=None)
    p.add_argument("--truth", default=None, help="Ground-truth depth.pfm (or its directory)")
    p.add_argument("--mesh-format", choices=["obj", "ply"], default="obj")
    p.add_argument("--emit-report", choices=["json", "none"], default="json")
    p.add_argument("--save-masks", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("evaluate", help="Depth error of a reconstruction")
    p.add_argument("--truth", required=True)
    p.add_argument("--recon", required=True)
    p.add_argument("--fit-scale", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="Depth error vs. light distance")
    p.add_argument("--scene", choices=["sphere", "bumpy"], default="bumpy")
    p.add_argument("--distances", type=float, nargs="+", default=[1, 2, 3, 5, 7, 10])
    p.add_argument("--n-lights", type=int, default=5)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--keypoints", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    settings.setup_logging(args.log_level)
    try:
        args.func(args)
    except (InputValidationError, SolverDivergence) as e:
        logger.error("❌ %s: %s", type(e).__name__, e)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
