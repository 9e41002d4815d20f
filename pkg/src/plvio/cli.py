"""Command-line interface.

Subcommands:
  simulate        emit sensor streams (IMU CSV, feature tracks, ground truth)
  run             estimate a trajectory from streams or inline simulation
  evaluate        ATE RMSE between two TUM trajectory files
  check-jacobians run all finite-difference suites, exit nonzero on failure
  bench           median-of-5 ATE over the feature-toggle matrix
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import io as pio
from .config import RunConfig
from .diagnostics import run_all
from .evaluation import evaluate_ate, median_protocol
from .frontend_sim import ObservationSynthesizer, SimWorld, synthesize_imu
from .pipeline import run_pipeline


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    if getattr(args, "sync_loop_detection", False):
        cfg = cfg.replace(sync_loop_detection=True)
    if getattr(args, "disable_lines", False):
        cfg = cfg.replace(enable_lines=False)
    if getattr(args, "disable_points", False):
        cfg = cfg.replace(enable_points=False)
    if getattr(args, "disable_loop_closure", False):
        cfg = cfg.replace(enable_loop_closure=False)
    return cfg


def _add_common(p):
    p.add_argument("--config", help="flat key=value configuration file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--sync-loop-detection", action="store_true",
                   help="force synchronous (deterministic) loop detection")
    p.add_argument("--disable-lines", action="store_true")
    p.add_argument("--disable-points", action="store_true")
    p.add_argument("--disable-loop-closure", action="store_true")
    p.add_argument("--output", default=".", help="output directory")


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    os.makedirs(args.output, exist_ok=True)
    traj = cfg.make_trajectory()
    gravity = np.array([0.0, 0.0, -9.81])
    center = (traj.center() if cfg.trajectory == "square"
              else np.asarray(cfg.traj_center))
    world = SimWorld.generate(seed=cfg.seed, n_points=cfg.n_world_points,
                              n_segments=cfg.n_world_segments,
                              radius=cfg.world_radius, center=center)
    camera = cfg.camera_model()
    imu = synthesize_imu(traj, cfg.noise_params(), cfg.seed, cfg.imu_rate_hz,
                         gravity, init_gyro_bias=cfg.init_gyro_bias,
                         init_accel_bias=cfg.init_accel_bias, noisy=cfg.imu_noisy)
    synth = ObservationSynthesizer(
        world, traj, camera, noise_px=cfg.pixel_sigma,
        outlier_rate=cfg.outlier_rate, dropout_rate=cfg.dropout_rate,
        seed=cfg.seed, max_points_per_frame=cfg.max_points_per_frame,
        max_lines_per_frame=cfg.max_lines_per_frame,
        descriptor_flip_prob=cfg.descriptor_flip_prob)
    cam_dt = 1.0 / cfg.camera_rate_hz
    n_frames = int(round(traj.duration * cfg.camera_rate_hz))
    frames, gt = [], []
    for k in range(n_frames):
        fr = synth.frame(k, k * cam_dt)
        frames.append(fr)
        gt.append(pio.TrajectorySample(fr.timestamp, fr.gt_body_pose))

    pio.write_imu_csv(os.path.join(args.output, "imu.csv"), imu)
    pio.write_tracks(os.path.join(args.output, "tracks.txt"), frames)
    pio.write_groundtruth_csv(os.path.join(args.output, "groundtruth.csv"), gt)
    cfg.to_file(os.path.join(args.output, "config.used"))
    print(f"wrote imu.csv ({len(imu)} samples), tracks.txt ({n_frames} frames), "
          f"groundtruth.csv to {args.output}")
    return 0


def cmd_run(args) -> int:
    cfg = _load_config(args)
    os.makedirs(args.output, exist_ok=True)
    if args.streams:
        imu = pio.ingest_imu_csv(os.path.join(args.streams, "imu.csv"))
        frames = pio.ingest_tracks(os.path.join(args.streams, "tracks.txt"))
        gt_path = os.path.join(args.streams, "groundtruth.csv")
        gt = pio.read_groundtruth_csv(gt_path) if os.path.exists(gt_path) else None
        result = run_pipeline(cfg, imu_samples=imu, frames=frames, gt_samples=gt)
        if gt:
            result.gt_samples = gt
    else:
        result = run_pipeline(cfg)

    est_path = os.path.join(args.output, "trajectory.tum")
    pio.write_trajectory_tum(est_path, result.samples)
    print(f"wrote {est_path} ({len(result.samples)} poses)")
    if result.gt_samples:
        gt_path = os.path.join(args.output, "groundtruth.tum")
        pio.write_trajectory_tum(gt_path, result.gt_samples)
        ate = evaluate_ate(result.samples, result.gt_samples)
        print(f"ATE RMSE vs ground truth: {ate['rmse_m']:.6f} m")
    return 0


def cmd_evaluate(args) -> int:
    est = pio.read_trajectory_tum(args.estimate)
    gt = pio.read_trajectory_tum(args.groundtruth)
    ate = evaluate_ate(est, gt)
    print(f"ATE RMSE: {ate['rmse_m']:.6f} m over {ate['n_pairs']} pose pairs")
    print(f"mean: {float(np.mean(ate['per_pose_errors'])):.6f} m, "
          f"median: {float(np.median(ate['per_pose_errors'])):.6f} m, "
          f"max: {float(np.max(ate['per_pose_errors'])):.6f} m")
    return 0


def cmd_check_jacobians(args) -> int:
    results = run_all(n=args.count, tolerance=args.tolerance)
    failed = False
    for name, (err, ok) in results.items():
        print(f"{name:24s} worst relative error {err:.3e}  "
              f"{'PASS' if ok else 'FAIL'}")
        failed |= not ok
    return 1 if failed else 0


def cmd_bench(args) -> int:
    cfg = _load_config(args)
    variants = {
        "points_only": cfg.replace(enable_lines=False, enable_loop_closure=False),
        "points_lines": cfg.replace(enable_lines=True, enable_loop_closure=False),
        "points_lines_loop": cfg.replace(enable_lines=True, enable_loop_closure=True),
    }
    print(f"median-of-{args.repeats} ATE RMSE, base seed {cfg.seed}")
    for name, vcfg in variants.items():
        def one(seed, vcfg=vcfg):
            result = run_pipeline(vcfg.replace(seed=seed))
            return evaluate_ate(result.samples, result.gt_samples)["rmse_m"]
        med, values = median_protocol(one, n=args.repeats, base_seed=cfg.seed)
        vals = ", ".join(f"{v:.4f}" for v in values)
        print(f"{name:20s} median {med:.4f} m   runs: [{vals}]")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="plvio", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="emit synthetic sensor streams")
    _add_common(p)

    p = sub.add_parser("run", help="run the estimator")
    _add_common(p)
    p.add_argument("--streams", help="directory with imu.csv/tracks.txt "
                                     "(inline simulation when omitted)")

    p = sub.add_parser("evaluate", help="ATE between two TUM trajectories")
    p.add_argument("estimate")
    p.add_argument("groundtruth")

    p = sub.add_parser("check-jacobians", help="finite-difference suites")
    p.add_argument("--count", type=int, default=500)
    p.add_argument("--tolerance", type=float, default=1e-5)

    p = sub.add_parser("bench", help="median-of-n over the toggle matrix")
    _add_common(p)
    p.add_argument("--repeats", type=int, default=5)

    args = parser.parse_args(argv)
    handlers = {
        "simulate": cmd_simulate,
        "run": cmd_run,
        "evaluate": cmd_evaluate,
        "check-jacobians": cmd_check_jacobians,
        "bench": cmd_bench,
    }
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
