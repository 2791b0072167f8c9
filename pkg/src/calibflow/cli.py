"""Command-line front end.

Subcommands: gen-synth, flow-gt, calibrate, init-semantic, evaluate,
sequence-median. Outputs go under ``--out``, which defaults to
``$CALIBFLOW_OUT`` or the current directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path


from . import __version__
from .dataio import (
    PerturbationRange,
    SceneSpec,
    derive_instance_set_2d,
    format_pose,
    generate_scene,
    load_calib,
    load_pose,
    load_scene,
    load_velodyne_bin,
    parse_poses,
    perturb,
    save_pose,
    save_scene,
)
from .errors import CalibrationError
from .flow import ground_truth_flow, write_cfl
from .metrics import SE3_CONVENTION, evaluate
from .pnp import RansacConfig
from .refine import (
    FilePredictor,
    OraclePredictor,
    OraclePredictorConfig,
    RefinementConfig,
    refine_stages,
    sequence_median,
)
from .semantic_init import DEFAULT_LATERAL_SIGN, read_instances, semantic_initialize, write_instances

OUT_ENV = "CALIBFLOW_OUT"
log = logging.getLogger("calibflow")


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {v}")
    return v


def _non_negative_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {v}")
    return v


def _non_negative_float(text: str) -> float:
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {text}")
    return v


def _out_dir(args) -> Path:
    d = Path(args.out or os.environ.get(OUT_ENV) or ".")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _config(args) -> dict:
    skip = {"func", "verbose"}
    return {k: v for k, v in vars(args).items() if k not in skip}


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


# ---------------------------------------------------------------------------
# inputs shared by several commands


def _load_inputs(scene_dir, cloud_path, calib_path, gt_path):
    """Cloud, intrinsics and (optional) ground truth from a scene archive or
    from a KITTI-style cloud + calib pair."""
    if scene_dir:
        scene = load_scene(scene_dir)
        t_gt = load_pose(gt_path) if gt_path else scene.t_gt
        return scene.cloud, scene.intrinsics, t_gt
    if not (cloud_path and calib_path):
        raise ValueError("give --scene, or both --cloud and --calib")
    cloud = load_velodyne_bin(cloud_path)
    K, _ = load_calib(calib_path)
    t_gt = load_pose(gt_path) if gt_path else None
    return cloud, K, t_gt


def _initial_pose(args, t_gt, seed):
    if args.t_init:
        return load_pose(args.t_init)
    if t_gt is None:
        raise ValueError("--t-init is required when no ground truth is available")
    rng_range = PerturbationRange(args.max_translation, args.max_rotation)
    return perturb(t_gt, rng_range, seed)


def _add_input_args(p, gt=True):
    p.add_argument("--scene", type=Path, help="scene archive directory (from gen-synth)")
    p.add_argument("--cloud", type=Path, help="velodyne .bin point cloud")
    p.add_argument("--calib", type=Path, help="KITTI-style calib file (P2, Tr)")
    if gt:
        p.add_argument("--gt", type=Path, help="ground-truth pose file (overrides the archive)")


def _add_perturb_args(p):
    p.add_argument("--t-init", type=Path, help="initial pose file; otherwise ground truth is perturbed")
    p.add_argument("--max-translation", type=_non_negative_float, default=1.5, help="meters (default 1.5)")
    p.add_argument("--max-rotation", type=_non_negative_float, default=20.0, help="degrees (default 20)")
    p.add_argument("--seed", type=_non_negative_int, default=0)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_synth(args) -> int:
    spec = SceneSpec(
        points=args.points,
        instances=args.instances,
        instance_points=args.instance_points,
        focal=args.focal,
        rng_seed=args.seed,
    )
    scene = generate_scene(spec)
    out = _out_dir(args)
    save_scene(out, scene)
    if args.instances:
        a = derive_instance_set_2d(
            scene.instances, scene.intrinsics, scene.t_gt, exact_centroids=args.exact_centroids
        )
        write_instances(out / "instances2d.txt", a)
    _write_json(out / "scene.json", {"config": _config(args), "seed": args.seed, "version": __version__})
    print(f"wrote {out}: {len(scene.cloud)} points, {len(scene.instances)} instances")
    return 0


def cmd_flow_gt(args) -> int:
    cloud, K, t_gt = _load_inputs(args.scene, args.cloud, args.calib, args.gt)
    if t_gt is None:
        raise ValueError("ground truth pose required (--gt)")
    t_init = _initial_pose(args, t_gt, args.seed)
    field = ground_truth_flow(cloud, K, t_init, t_gt)
    out = _out_dir(args)
    path = out / args.name
    write_cfl(path, field)
    print(f"wrote {path}: {int(field.mask.sum())} flow pixels")
    return 0


def _make_predictor(args, t_gt):
    if args.predictor == "file":
        if not args.flow_dir:
            raise ValueError("--flow-dir is required for the file predictor")
        return FilePredictor(args.flow_dir)
    if t_gt is None:
        raise ValueError(f"the {args.predictor} predictor needs ground truth")
    if args.predictor == "exact":
        return OraclePredictor(OraclePredictorConfig(t_gt))
    return OraclePredictor(
        OraclePredictorConfig(
            t_gt,
            noise_sigma_px=args.noise_sigma,
            outlier_fraction=args.outlier_fraction,
            rng_seed=args.seed,
        )
    )


def _calibrate_one(args, scene_dir, out: Path, frame_seed: int) -> dict:
    cloud, K, t_gt = _load_inputs(scene_dir, args.cloud, args.calib, args.gt)
    t_init = _initial_pose(args, t_gt, frame_seed)
    predictor = _make_predictor(args, t_gt)
    cfg = RefinementConfig(n_valid=args.n_valid, ransac=RansacConfig(rng_seed=args.ransac_seed))
    stages = refine_stages(cloud, K, t_init, predictor, cfg, frame_id=args.frame_id)
    pose = [r for r in stages if r.ok][-1].pose

    out.mkdir(parents=True, exist_ok=True)
    save_pose(out / "pred_pose.txt", pose)
    save_pose(out / "init_pose.txt", t_init)
    (out / "stage_poses.txt").write_text("".join(format_pose(r.pose) for r in stages))

    with open(out / "stage_errors.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "ok", "n_rect", "n_inliers", "E_t", "E_R", "MSEE"])
        w.writerow([0, True, "", "", *_errors_row(t_init, t_gt)])
        for r in stages:
            w.writerow([r.stage, r.ok, r.n_rect, r.n_inliers, *_errors_row(r.pose, t_gt)])

    doc = {
        "config": _config(args),
        "seed": frame_seed,
        "version": __version__,
        "se3_convention": SE3_CONVENTION,
        "stages": [
            {"stage": r.stage, "ok": r.ok, "n_rect": r.n_rect, "n_inliers": r.n_inliers, "reason": r.reason}
            for r in stages
        ],
        "pose": pose.matrix()[:3].tolist(),
    }
    if t_gt is None:
        doc["metrics"] = "unavailable"
        table = "metrics unavailable: no ground truth"
    else:
        report = evaluate(pose, t_gt, t_init)
        doc["metrics"] = report.to_dict()
        table = report.table()
    _write_json(out / "report.json", doc)
    (out / "report.txt").write_text(table + "\n")
    return {"out": str(out), "table": table, "pose": pose}


def _errors_row(T, t_gt):
    if t_gt is None:
        return ["", "", ""]
    r = evaluate(T, t_gt)
    return [repr(r.E_t), repr(r.E_R), repr(r.MSEE)]


def _calibrate_job(payload):
    args, scene_dir, out, seed = payload
    return _calibrate_one(args, scene_dir, Path(out), seed)


def cmd_calibrate(args) -> int:
    out = _out_dir(args)
    scenes = args.scene or [None]
    if len(scenes) == 1:
        res = _calibrate_one(args, scenes[0], out, args.seed)
        print(res["table"])
        print(f"pose written to {out / 'pred_pose.txt'}")
        return 0
    jobs = [(args, s, str(out / f"frame{i:04d}"), args.seed + i) for i, s in enumerate(scenes)]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            results = list(ex.map(_calibrate_job, jobs))
    else:
        results = [_calibrate_job(j) for j in jobs]
    (out / "poses.txt").write_text("".join(format_pose(r["pose"]) for r in results))
    for r in results:
        print(f"{r['out']}:")
        print(r["table"])
    print(f"{len(results)} frames, poses written to {out / 'poses.txt'}")
    return 0


def cmd_init_semantic(args) -> int:
    a = read_instances(args.instances2d, 2)
    b = read_instances(args.instances3d, 3)
    K, _ = load_calib(args.calib)
    ransac = RansacConfig(inlier_threshold_px=args.threshold, rng_seed=args.seed)
    pose = semantic_initialize(a, b, K, ransac, args.lateral_sign)
    out = _out_dir(args)
    save_pose(out / args.name, pose)
    doc = {"config": _config(args), "seed": args.seed, "version": __version__, "pose": pose.matrix()[:3].tolist()}
    if args.gt:
        doc["metrics"] = evaluate(pose, load_pose(args.gt)).to_dict()
    _write_json(out / "init_report.json", doc)
    print(format_pose(pose), end="")
    return 0


def cmd_evaluate(args) -> int:
    pred = load_pose(args.pred)
    gt = load_pose(args.gt)
    init = load_pose(args.init) if args.init else None
    report = evaluate(pred, gt, init, convention=args.convention)
    out = _out_dir(args)
    _write_json(
        out / args.name,
        {
            "config": _config(args),
            "version": __version__,
            "metrics": report.to_dict(),
            "se3_convention": SE3_CONVENTION,
        },
    )
    print(report.table())
    return 0


def cmd_sequence_median(args) -> int:
    poses = []
    for path in args.poses:
        poses += parse_poses(Path(path).read_text())
    res = sequence_median(poses, args.outlier_threshold)
    out = _out_dir(args)
    save_pose(out / args.name, res.pose)
    doc = {
        "config": _config(args),
        "version": __version__,
        "frames": len(poses),
        "outliers": res.outliers,
        "distances": res.distances.tolist(),
        "pose": res.pose.matrix()[:3].tolist(),
    }
    if args.gt:
        doc["metrics"] = evaluate(res.pose, load_pose(args.gt)).to_dict()
    _write_json(out / "median_report.json", doc)
    print(format_pose(res.pose), end="")
    if res.outliers:
        print(f"{len(res.outliers)} outlier frame(s): {res.outliers}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="calibflow", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--out", type=Path, help=f"output directory (default ${OUT_ENV} or .)")
        p.set_defaults(func=func)
        return p

    p = add("gen-synth", cmd_gen_synth, "generate a synthetic scene archive")
    p.add_argument("--points", type=_positive_int, default=5000)
    p.add_argument("--instances", type=_non_negative_int, default=0)
    p.add_argument("--instance-points", type=_positive_int, default=150)
    p.add_argument("--focal", type=float, default=400.0)
    p.add_argument("--exact-centroids", action="store_true",
                   help="shift 2D instance masks onto the projected 3D centroids")
    p.add_argument("--seed", type=_non_negative_int, default=0)

    p = add("flow-gt", cmd_flow_gt, "write the ground-truth calibration flow as CFL1")
    _add_input_args(p)
    _add_perturb_args(p)
    p.add_argument("--name", default="flow_gt.cfl")

    p = add("calibrate", cmd_calibrate, "iterative refinement from an initial extrinsic")
    p.add_argument("--scene", type=Path, nargs="+", help="one or more scene archives")
    p.add_argument("--cloud", type=Path)
    p.add_argument("--calib", type=Path)
    p.add_argument("--gt", type=Path)
    _add_perturb_args(p)
    p.add_argument("--predictor", choices=("exact", "noisy", "file"), default="exact")
    p.add_argument("--noise-sigma", type=_non_negative_float, default=0.5)
    p.add_argument("--outlier-fraction", type=_non_negative_float, default=0.1)
    p.add_argument("--flow-dir", type=Path, help="directory of stage<k>_<frame>.cfl files")
    p.add_argument("--frame-id", default="000000")
    p.add_argument("--n-valid", type=_positive_int, default=10)
    p.add_argument("--ransac-seed", type=_non_negative_int, default=0)
    p.add_argument("--jobs", type=_positive_int, default=1, help="parallel frames (several --scene)")

    p = add("init-semantic", cmd_init_semantic, "coarse extrinsic from instance centroids")
    p.add_argument("--instances2d", type=Path, required=True)
    p.add_argument("--instances3d", type=Path, required=True)
    p.add_argument("--calib", type=Path, required=True)
    p.add_argument("--gt", type=Path)
    p.add_argument("--lateral-sign", type=float, choices=(-1.0, 1.0), default=DEFAULT_LATERAL_SIGN)
    p.add_argument("--threshold", type=float, default=8.0, help="RANSAC inlier threshold (px)")
    p.add_argument("--seed", type=_non_negative_int, default=0)
    p.add_argument("--name", default="init_pose.txt")

    p = add("evaluate", cmd_evaluate, "metrics of a predicted pose against ground truth")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--init", type=Path, help="initial pose, enables MRR")
    p.add_argument("--convention", choices=("geodesic", "half-angle"), default="geodesic")
    p.add_argument("--name", default="metrics.json")

    p = add("sequence-median", cmd_sequence_median, "median extrinsic over per-frame poses")
    p.add_argument("poses", nargs="+", type=Path, help="pose files, one or more poses each")
    p.add_argument("--outlier-threshold", type=float, default=0.1)
    p.add_argument("--gt", type=Path)
    p.add_argument("--name", default="median_pose.txt")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CalibrationError, ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"calibflow {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
