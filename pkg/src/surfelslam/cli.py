"""Command-line entry points: simulate | run | evaluate | render | optimize-graph.

Exit codes: 0 success, 2 configuration error, 3 pipeline failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from surfelslam import io as sio
from surfelslam.evaluation import MetricReport, ate_rmse_sim3, depth_l1_scale_aligned, psnr, ssim
from surfelslam.oracle import NoiseModel, OracleFrontend, generate_scene
from surfelslam.pipeline import (
    PipelineError,
    RunConfig,
    load_or_generate_scene,
    manifest_values,
    run_pipeline,
    write_run_outputs,
)
from surfelslam.rasterizer import render

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PIPELINE = 3


class ConfigError(ValueError):
    pass


def _parse_value(current, raw):
    raw = raw.strip()
    if isinstance(current, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if current is None:
        if raw.lower() in ("none", ""):
            return None
        try:
            return float(raw) if "." in raw or "e" in raw.lower() else int(raw)
        except ValueError:
            return raw
    return raw


def _set_nested(config, dotted, raw):
    """Assign a flat ``section.key = value`` entry onto the run config."""
    parts = dotted.split(".")
    try:
        if len(parts) == 1:
            setattr(config, parts[0], _parse_value(getattr(config, parts[0]), raw))
        elif len(parts) == 2:
            section = getattr(config, parts[0])
            value = _parse_value(getattr(section, parts[1]), raw)
            setattr(config, parts[0], dataclasses.replace(section, **{parts[1]: value}))
        else:
            raise AttributeError(dotted)
    except AttributeError as err:
        raise ConfigError(f"unknown config key {dotted!r}") from err


def config_from_args(args) -> RunConfig:
    config = RunConfig()
    if getattr(args, "config", None):
        for key, raw in sio.read_flat_config(args.config).items():
            _set_nested(config, key, raw)
    mapping = {
        "scene": "scene_dir", "seed": "seed", "frames": "frame_count",
        "surfels": "surfel_count", "extent": "extent", "clip_length": "clip_length",
        "refine_iters": "refine_iters", "refine_keyframes": "refine_keyframes",
        "eval_stride": "eval_stride",
    }
    for arg_name, field_name in mapping.items():
        val = getattr(args, arg_name, None)
        if val is not None:
            setattr(config, field_name, val)
    for flag in ("disable_loop_closure", "disable_voxelization", "disable_refine"):
        if getattr(args, flag, False):
            setattr(config, flag, True)
    if getattr(args, "sim3", False):
        config.sim3_trajectories = True
    noise_fields = {
        "pose_rot_std": "pose_rot_std", "pose_trans_std": "pose_trans_std",
        "scale_drift": "per_submap_scale_drift", "point_noise_std": "point_noise_std",
    }
    noise_updates = {
        field: getattr(args, arg)
        for arg, field in noise_fields.items()
        if getattr(args, arg, None) is not None
    }
    if getattr(args, "zero_noise", False):
        config.noise = NoiseModel.zero(rng_seed=config.seed)
    if noise_updates:
        config.noise = dataclasses.replace(config.noise, **noise_updates)
    if getattr(args, "noise_seed", None) is not None:
        config.noise = dataclasses.replace(config.noise, rng_seed=args.noise_seed)
    elif config.noise.rng_seed == 0 and config.seed != 0:
        config.noise = dataclasses.replace(config.noise, rng_seed=config.seed)
    return config


def _add_common_scene_args(p):
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--surfels", type=int, default=None)
    p.add_argument("--extent", type=float, default=None)
    p.add_argument("--clip-length", dest="clip_length", type=int, default=None)
    p.add_argument("--zero-noise", action="store_true")
    p.add_argument("--pose-rot-std", dest="pose_rot_std", type=float, default=None)
    p.add_argument("--pose-trans-std", dest="pose_trans_std", type=float, default=None)
    p.add_argument("--scale-drift", dest="scale_drift", type=float, default=None)
    p.add_argument("--point-noise-std", dest="point_noise_std", type=float, default=None)
    p.add_argument("--noise-seed", dest="noise_seed", type=int, default=None)
    p.add_argument("--config", default=None, help="flat key=value config file")


def cmd_simulate(args) -> int:
    config = config_from_args(args)
    scene = generate_scene(config.scene_config())
    frontend = OracleFrontend(scene, config.noise)
    from surfelslam.tracker import partition

    predictions = []
    for submap in partition(range(scene.frame_count), frontend, config.clip_length):
        for f in submap.frame_ids:
            if len(predictions) <= f:
                predictions.append(submap.predictions[f])
    from surfelslam.oracle import write_scene_dir

    write_scene_dir(scene, args.out, predictions)
    sio.write_flat_config(Path(args.out) / "manifest.txt", manifest_values(config))
    print(f"scene written to {args.out}: {scene.frame_count} frames, "
          f"{len(scene.surfels)} surfels")
    return EXIT_OK


def cmd_run(args) -> int:
    config = config_from_args(args)
    scene = load_or_generate_scene(config)
    result = run_pipeline(scene, config)
    write_run_outputs(result, config, args.out)
    psnr_txt = "exact" if result.report.psnr_exact else f"{result.report.psnr_mean:.2f}dB"
    print(
        f"run complete: ATE={result.report.ate_rmse:.3e} psnr={psnr_txt} "
        f"surfels={result.report.num_surfels} loops={result.num_loop_closures} "
        f"({result.wall_time:.1f}s)"
    )
    return EXIT_OK


def cmd_evaluate(args) -> int:
    est = sio.read_tum(args.traj, sim3=args.sim3)
    gt = sio.read_tum(args.gt)
    report = MetricReport(scene=args.traj, seed=0)
    report.ate_rmse = ate_rmse_sim3(est, gt)
    report.num_frames = len(est)
    if args.renders and args.scene:
        scene_dir = Path(args.scene)
        renders = sorted(Path(args.renders).glob("[0-9]*.png"))
        depth_l1s = []
        for r in renders:
            frame = r.stem
            target = scene_dir / "rgb" / f"{frame}.png"
            if not target.exists():
                continue
            a = sio.read_rgb_png(r)
            b = sio.read_rgb_png(target)
            report.psnr_per_view.append(psnr(a, b))
            report.ssim_per_view.append(ssim(a, b))
            depth_render = Path(args.renders) / f"{frame}_depth.png"
            depth_target = scene_dir / "depth" / f"{frame}.png"
            if depth_render.exists() and depth_target.exists():
                d_r = sio.read_depth_png(depth_render)
                d_t = sio.read_depth_png(depth_target)
                try:
                    depth_l1s.append(depth_l1_scale_aligned(d_r, d_t))
                except ValueError:
                    pass
        if depth_l1s:
            report.depth_l1 = float(np.mean(depth_l1s))
    report.write_csv(args.out)
    print(f"report written to {args.out} (ate={report.ate_rmse:.4g})")
    return EXIT_OK


def cmd_render(args) -> int:
    surfels = sio.read_surfel_ply(args.map)
    poses = sio.read_tum(args.poses, sim3=args.sim3)
    intr = sio.read_intrinsics(args.intrinsics)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for idx, (_, pose) in enumerate(poses):
        buf = render(surfels, pose, intr)
        sio.write_rgb_png(out / f"{idx:06d}.png", buf.color)
        depth = buf.depth / np.maximum(buf.accumulation, 1e-12)
        depth = np.where(buf.accumulation > 0.5, depth, 0.0)
        sio.write_depth_png(out / f"{idx:06d}_depth.png", depth)
    print(f"rendered {len(poses)} views to {out}")
    return EXIT_OK


def cmd_optimize_graph(args) -> int:
    from surfelslam.pose_graph import load_graph, optimize, save_graph

    graph = load_graph(args.graph)
    report = optimize(graph)
    save_graph(args.out, graph)
    print(
        f"chi2 {report.initial_chi2:.6g} -> {report.final_chi2:.6g} "
        f"in {report.iterations} iterations (converged={report.converged})"
    )
    if not report.converged and report.final_chi2 > report.initial_chi2:
        return EXIT_PIPELINE
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="surfelslam",
                                     description="Gaussian-surfel SLAM at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate and serialize a synthetic scene")
    _add_common_scene_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run", help="full SLAM pipeline on a scene")
    _add_common_scene_args(p)
    p.add_argument("--scene", default=None, help="serialized scene directory")
    p.add_argument("--out", required=True)
    p.add_argument("--disable-loop-closure", dest="disable_loop_closure", action="store_true")
    p.add_argument("--disable-voxelization", dest="disable_voxelization", action="store_true")
    p.add_argument("--disable-refine", dest="disable_refine", action="store_true")
    p.add_argument("--refine-iters", dest="refine_iters", type=int, default=None)
    p.add_argument("--refine-keyframes", dest="refine_keyframes", type=int, default=None)
    p.add_argument("--eval-stride", dest="eval_stride", type=int, default=None)
    p.add_argument("--sim3", action="store_true",
                   help="write trajectories with a leading scale column")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("evaluate", help="metrics from trajectories and renders")
    p.add_argument("--traj", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--renders", default=None)
    p.add_argument("--scene", default=None)
    p.add_argument("--sim3", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("render", help="render a map PLY along a trajectory")
    p.add_argument("--map", required=True)
    p.add_argument("--poses", required=True)
    p.add_argument("--intrinsics", required=True)
    p.add_argument("--sim3", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("optimize-graph", help="solve a VERTEX_SIM3/EDGE_SIM3 file")
    p.add_argument("--graph", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_optimize_graph)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PipelineError as exc:
        print(f"pipeline failure: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
