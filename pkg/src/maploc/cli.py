"""Command line interface.

Exit codes: 0 success, 1 usage error, 2 malformed input data (DataError),
3 numerical failure on valid inputs (NumericalError).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys

import numpy as np

from . import io as mio
from .degeneracy import DegeneracyParams, detect, spectrum
from .errors import DataError, NumericalError
from .evaluate import ate, map_accuracy, map_completeness, rpe, rpe_per_meter
from .geometry import Pose
from .pipeline import (_degeneracy_dict, emit_reports, load_map,
                       load_sequence, run)
from .registration import RegistrationParams, align, reference_hessian
from .synth import generate, load_scene_spec, write_sequence

logger = logging.getLogger("maploc")


def _load_cfg(args):
    cfg = mio.load_config(getattr(args, "config", None))
    overrides = getattr(args, "overrides", None)
    if overrides:
        cfg = mio.apply_overrides(cfg, overrides)
    return cfg


def _cmd_localize(args) -> int:
    cfg = _load_cfg(args)
    if args.verbose:
        cfg["verbose"] = True
    prior_map = load_map(args.map, voxel_size=cfg["voxel_size"])
    sequence = load_sequence(args.scans, args.odom, args.imu)
    groundtruth = mio.read_tum(args.groundtruth) if args.groundtruth else None
    result = run(prior_map, sequence, cfg, groundtruth=groundtruth)
    paths = emit_reports(result, args.out)
    print(f"states: {result.report['num_states']}")
    if result.metrics is not None:
        print(f"ate_rmse_cm: {result.metrics.ate_rmse_cm:.9g}")
    for key in sorted(paths):
        print(f"{key}: {paths[key]}")
    return 0


def _cmd_synth(args) -> int:
    spec = load_scene_spec(args.spec)
    result = generate(spec)
    paths = write_sequence(result, args.out)
    print(f"scans: {len(result.scans)}")
    print(f"imu samples: {len(result.imu)}")
    print(f"map points: {len(result.gt_map)}")
    for key in sorted(paths):
        print(f"{key}: {paths[key]}")
    return 0


def _cmd_eval_traj(args) -> int:
    est = mio.read_tum(args.est)
    ref = mio.read_tum(args.ref)
    a = ate(est, ref)
    r = rpe(est, ref, delta=args.delta)
    per_meter = rpe_per_meter(est, ref)
    print(f"ate_rmse_cm: {a.rmse_cm:.9g}")
    print(f"rpe_rmse_cm: {r.rmse_cm:.9g}")
    print(f"rpe_rot_rmse_rad: {r.rot_rmse_rad:.9g}")
    print("rpe_per_meter_cm: "
          + ("n/a" if per_meter is None else f"{per_meter:.9g}"))
    print(f"matched_pairs: {a.pairs}")
    return 0


def _cmd_eval_map(args) -> int:
    est = mio.read_cloud(args.est)
    ref = mio.read_cloud(args.ref)
    acc = map_accuracy(est, ref, threshold=args.threshold)
    com = map_completeness(est, ref, threshold=args.threshold)
    print(f"map_acc_cm: {acc:.9g}")
    print(f"map_com_percent: {com:.9g}")
    return 0


def _cmd_degeneracy_report(args) -> int:
    cfg = _load_cfg(args)
    prior_map = load_map(args.map, voxel_size=cfg["voxel_size"])
    scan = mio.read_cloud(args.scan)
    tx, ty, tz, qx, qy, qz, qw = args.pose
    pose = Pose(mio.quaternion_to_rotation(qx, qy, qz, qw),
                np.array([tx, ty, tz]))
    reg = cfg["registration"]
    result = align(scan.points, prior_map.index, pose,
                   RegistrationParams(
                       max_correspondence_distance=reg[
                           "max_correspondence_distance"],
                       max_iterations=reg["max_iterations"],
                       convergence_threshold=reg["convergence_threshold"],
                       kernel_width=reg["kernel_width"]),
                   workers=cfg["threads"])
    deg = cfg["degeneracy"]
    threshold = deg["d_e_threshold"]
    report = detect(result, spectrum(reference_hessian(result.correspondences)),
                    DegeneracyParams(
                        d_e_threshold=(math.inf if threshold is None
                                       else threshold),
                        s_thres=deg["s_thres"],
                        min_correspondences=deg["min_correspondences"]))
    out = _degeneracy_dict(report)
    out["residual_rms"] = float(result.residual_rms)
    out["iterations"] = int(result.iterations)
    out["converged"] = bool(result.converged)
    print(json.dumps(mio.sanitize_json(out), indent=2, sort_keys=True))
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maploc",
        description="Prior-map-assisted LiDAR localization toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("localize",
                       help="fuse odometry, scans, and IMU against a map")
    p.add_argument("--map", required=True, help="prior map (.pcd or .ply)")
    p.add_argument("--scans", required=True, help="directory of .pcd scans")
    p.add_argument("--odom", required=True, help="odometry trajectory (TUM)")
    p.add_argument("--imu", help="IMU stream (CSV), optional")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--groundtruth",
                   help="GT trajectory (TUM); adds metrics to the report")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE",
                   help="override a config entry, repeatable")
    p.add_argument("--verbose", action="store_true",
                   help="info logging plus an optimizer trace file")
    p.set_defaults(func=_cmd_localize)

    p = sub.add_parser("synth", help="generate a synthetic scene")
    p.add_argument("--spec", required=True, help="scene spec (JSON)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_synth, verbose=False)

    p = sub.add_parser("eval-traj", help="trajectory metrics (ATE/RPE)")
    p.add_argument("--est", required=True, help="estimated trajectory (TUM)")
    p.add_argument("--ref", required=True, help="reference trajectory (TUM)")
    p.add_argument("--delta", type=int, default=1,
                   help="RPE window, frames (default 1)")
    p.set_defaults(func=_cmd_eval_traj, verbose=False)

    p = sub.add_parser("eval-map", help="map accuracy and completeness")
    p.add_argument("--est", required=True, help="estimated map (.pcd/.ply)")
    p.add_argument("--ref", required=True, help="reference map (.pcd/.ply)")
    p.add_argument("--threshold", type=float, default=0.20,
                   help="inlier distance, meters (default 0.20)")
    p.set_defaults(func=_cmd_eval_map, verbose=False)

    p = sub.add_parser("degeneracy-report",
                       help="register one scan and report degeneracy")
    p.add_argument("--map", required=True, help="prior map (.pcd or .ply)")
    p.add_argument("--scan", required=True, help="scan to register (.pcd)")
    p.add_argument("--pose", required=True, type=float, nargs=7,
                   metavar=("TX", "TY", "TZ", "QX", "QY", "QZ", "QW"),
                   help="initial pose, translation then quaternion (w last)")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE",
                   help="override a config entry, repeatable")
    p.set_defaults(func=_cmd_degeneracy_report, verbose=False)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help, nonzero for usage errors
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
