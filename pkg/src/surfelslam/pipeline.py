"""Full-system orchestration: track -> detect -> relocalize -> PGO -> correct ->
fuse/prune/refine, with tracking and mapping in separate threads.

The tracking stage streams keyframe packets into a bounded queue; the mapping
stage consumes them in order, so results are deterministic for a fixed config
and seed.  Pose-graph corrections travel through the same queue, keeping the
two stages consistent without shared mutable state.
"""

from __future__ import annotations

import queue
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field, asdict, is_dataclass
from pathlib import Path

import numpy as np

from surfelslam import io as sio
from surfelslam.evaluation import MetricReport, ate_rmse_sim3, depth_l1_scale_aligned, psnr, ssim
from surfelslam.geometry import Sim3Transform
from surfelslam.loop_closure import build_constraint, detect, estimate_scale
from surfelslam.mapper import (
    FusionConfig,
    GlobalSurfelMap,
    RefinementConfig,
    VoxelizationConfig,
    adaptive_voxelize,
    fuse,
    loop_correct,
    prediction_surfels,
    prune,
    refine,
)
from surfelslam.oracle import (
    InsufficientOverlapError,
    NoiseModel,
    OracleFrontend,
    SceneConfig,
    SyntheticScene,
    generate_scene,
)
from surfelslam.pose_graph import (
    SolverConfig,
    apply_solution,
    build_graph,
    optimize,
    save_graph,
)
from surfelslam.rasterizer import RasterConfig, render
from surfelslam.tracker import ChainedTrajectory, inter_submap_constraint, partition


class PipelineError(RuntimeError):
    """Unrecoverable pipeline failure (solver divergence, bad scene, ...)."""


@dataclass
class RunConfig:
    """Everything a run needs; all resolved values land in the manifest."""

    # scene source: a serialized directory, or synthetic generation parameters
    scene_dir: str | None = None
    seed: int = 0
    extent: float = 4.0
    surfel_count: int = 1500
    frame_count: int = 96
    width: int = 64
    height: int = 48
    # tracking
    clip_length: int = 8
    noise: NoiseModel = field(default_factory=NoiseModel)
    # loop closure
    loop_min_gap: int = 2
    loop_feature_threshold: float = 1.2
    min_covisibility: float = 0.25
    max_loops_per_pair: int = 1
    omega_sequential: float = 1.0
    omega_inter: float = 1.0
    omega_loop: float = 0.5
    pgo_schedule: str = "per_submap"  # per_submap | final
    solver: SolverConfig = field(default_factory=SolverConfig)
    # mapping
    voxel: VoxelizationConfig = field(default_factory=VoxelizationConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    raster: RasterConfig = field(default_factory=RasterConfig)
    refine_iters: int = 20
    refine_keyframes: int = 4
    refine_stride: int = 1
    # ablation flags
    disable_loop_closure: bool = False
    disable_voxelization: bool = False
    disable_refine: bool = False
    disable_mapping: bool = False
    # output
    sim3_trajectories: bool = False
    eval_stride: int = 4
    output_dir: str | None = None

    def scene_config(self) -> SceneConfig:
        return SceneConfig(
            extent=self.extent, surfel_count=self.surfel_count,
            frame_count=self.frame_count, seed=self.seed,
            width=self.width, height=self.height,
        )


@dataclass
class RunResult:
    scene: SyntheticScene
    pre_pgo: ChainedTrajectory
    node_poses: dict  # frame -> Sim3Transform, post-PGO
    submap_of: dict
    map: GlobalSurfelMap
    loop_edges: list
    solve_reports: list
    report: MetricReport
    num_loop_closures: int
    wall_time: float
    fusion_stats: list = field(default_factory=list)
    pruned_total: int = 0
    refine_reports: list = field(default_factory=list)

    def trajectory(self, which="post"):
        poses = self.node_poses if which == "post" else self.pre_pgo.poses
        return [(self.scene.timestamp(f), poses[f]) for f in sorted(poses)]


def _flatten(obj, prefix=""):
    out = {}
    if is_dataclass(obj) and not isinstance(obj, type):
        obj = asdict(obj)
    if isinstance(obj, dict):
        for k, v in obj.items():
            key = f"{prefix}.{k}" if prefix else str(k)
            if is_dataclass(v) or isinstance(v, dict):
                out.update(_flatten(v, key))
            else:
                out[key] = v
    else:
        out[prefix] = obj
    return out


def manifest_values(config: RunConfig) -> dict:
    return _flatten(config)


class _MapperStage:
    """Consumes keyframe packets and correction messages in stream order."""

    def __init__(self, config: RunConfig, scene: SyntheticScene):
        self.config = config
        self.scene = scene
        self.map = GlobalSurfelMap()
        self.observations = OrderedDict()
        self.fusion_stats = []
        self.pruned_total = 0
        self.refine_reports = []
        self.frames_seen = 0
        self.error = None

    def handle_frame(self, frame_id, pose, prediction, rgb, depth):
        cfg = self.config
        intr = self.scene.intrinsics
        self.map.keyframe_poses[frame_id] = pose
        self.pruned_total += prune(
            self.map, frame_id, rgb, depth, intr, cfg.fusion, cfg.raster
        )
        if cfg.disable_voxelization:
            candidates = prediction_surfels(prediction)
        else:
            candidates = adaptive_voxelize(prediction, cfg.voxel)
        stats = fuse(self.map, candidates, frame_id, pose, intr, cfg.fusion,
                     cfg.raster, submap_id=prediction.submap_id)
        self.fusion_stats.append(stats)

        self.observations[frame_id] = (rgb, depth)
        while len(self.observations) > cfg.refine_keyframes:
            self.observations.popitem(last=False)
        self.frames_seen += 1
        if (not cfg.disable_refine and cfg.refine_iters > 0
                and self.frames_seen % cfg.refine_stride == 0):
            report = refine(
                self.map, list(self.observations), self.observations, intr,
                RefinementConfig(iterations=cfg.refine_iters,
                                 keyframes=cfg.refine_keyframes),
                cfg.raster,
            )
            self.refine_reports.append(report)

    def handle_correction(self, updates):
        loop_correct(self.map, updates)

    def run(self, inbox: queue.Queue):
        try:
            while True:
                msg = inbox.get()
                if msg[0] == "finish":
                    return
                if msg[0] == "frame":
                    self.handle_frame(*msg[1:])
                elif msg[0] == "correct":
                    self.handle_correction(msg[1])
        except Exception as exc:  # surfaced by the orchestrator after join
            self.error = exc


def _observed_views(scene: SyntheticScene, frame_id):
    buffers, _ = scene.gt_render(frame_id)
    depth = buffers.depth / np.maximum(buffers.accumulation, 1e-12)
    depth = np.where(buffers.accumulation > 0.5, depth, 0.0)
    return buffers.color, depth


def run_pipeline(scene: SyntheticScene, config: RunConfig) -> RunResult:
    """Execute the two-stage SLAM pipeline on a scene; returns all artifacts."""
    t_start = time.perf_counter()
    frontend = OracleFrontend(scene, config.noise, config.min_covisibility)
    inbox: queue.Queue = queue.Queue(maxsize=8)
    mapper = _MapperStage(config, scene)
    worker = None
    if not config.disable_mapping:
        worker = threading.Thread(target=mapper.run, args=(inbox,), daemon=True)
        worker.start()

    def post(msg):
        if worker is not None:
            inbox.put(msg)

    node_poses: dict = {}
    chained_initial: dict = {}  # pose at creation time, before any correction
    submap_of: dict = {}
    frame_order: list = []
    sealed = []  # stripped submaps
    bag = []
    loop_edges = []
    loop_pairs = {}
    solve_reports = []
    world = Sim3Transform.identity()

    def chained_view():
        return ChainedTrajectory(list(frame_order), dict(node_poses), dict(submap_of), {})

    def run_pgo():
        nonlocal world
        traj = chained_view()
        graph = build_graph(traj, loop_edges, config.omega_sequential, config.omega_inter)
        report = optimize(graph, config.solver)
        solve_reports.append(report)
        if not report.converged and report.final_chi2 > report.initial_chi2:
            raise PipelineError("pose graph optimization diverged")
        old = dict(node_poses)
        updates = apply_solution(graph, old)
        for f, (old_p, new_p, _) in updates.items():
            node_poses[f] = new_p
        post(("correct", {f: (new_p, delta) for f, (_, new_p, delta) in updates.items()}))
        # continue chaining from the corrected transform of the latest submap,
        # reconstructed from a frame that submap owns (its origin node carries
        # the previous submap's scale context)
        last_submap = sealed[-1]
        f_owned = last_submap.frame_ids[-1]
        world = node_poses[f_owned].compose(
            last_submap.local_poses[f_owned].as_sim3().inverse()
        )

    try:
        for submap in partition(range(scene.frame_count), frontend, config.clip_length):
            if sealed:
                prev = sealed[-1]
                shared = prev.frame_ids[-1]
                c = inter_submap_constraint(
                    prev, submap, prev.predictions[shared], submap.predictions[shared]
                )
                world = world.compose(c)
            for f in submap.frame_ids:
                if f in node_poses:
                    continue
                node_poses[f] = world.compose(submap.local_poses[f].as_sim3())
                chained_initial[f] = node_poses[f]
                submap_of[f] = submap.submap_id
                frame_order.append(f)
                rgb, depth = _observed_views(scene, f)
                post(("frame", f, node_poses[f], submap.predictions[f], rgb, depth))

            new_loops = False
            if not config.disable_loop_closure and bag:
                for j in submap.frame_ids:
                    for cand in detect(bag, submap.descriptor, j,
                                       config.loop_min_gap, config.loop_feature_threshold):
                        pair = (cand.historical_submap, cand.current_submap)
                        if loop_pairs.get(pair, 0) >= config.max_loops_per_pair:
                            continue
                        hist = sealed[cand.historical_submap]
                        try:
                            reloc = frontend.reinterpret(j, hist.descriptor)
                        except InsufficientOverlapError:
                            continue
                        cur_pred = submap.predictions[j]
                        both = reloc.valid & cur_pred.valid
                        if both.sum() < 10:
                            continue
                        s_star = estimate_scale(cur_pred.points_cam[both],
                                                reloc.points_cam[both])
                        i = hist.frame_ids[0]
                        edge = build_constraint(
                            reloc.pose_in_submap, hist.local_poses[i], s_star,
                            current_node=j, historical_node=i, omega=config.omega_loop,
                        )
                        loop_edges.append(edge)
                        loop_pairs[pair] = loop_pairs.get(pair, 0) + 1
                        new_loops = True
            sealed.append(submap.stripped())
            bag.append(submap.descriptor)
            if new_loops and config.pgo_schedule == "per_submap":
                run_pgo()

        pre_pgo = ChainedTrajectory(
            list(frame_order), chained_initial, dict(submap_of), {}
        )
        if loop_edges and config.pgo_schedule == "final":
            run_pgo()
        post(("finish",))
        if worker is not None:
            worker.join()
            if mapper.error is not None:
                raise PipelineError(f"mapping stage failed: {mapper.error}") from mapper.error
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(str(exc)) from exc

    wall = time.perf_counter() - t_start
    report = _evaluate(scene, node_poses, mapper.map, config)
    return RunResult(
        scene=scene,
        pre_pgo=pre_pgo,
        node_poses=node_poses,
        submap_of=submap_of,
        map=mapper.map,
        loop_edges=loop_edges,
        solve_reports=solve_reports,
        report=report,
        num_loop_closures=len(loop_edges),
        wall_time=wall,
        fusion_stats=mapper.fusion_stats,
        pruned_total=mapper.pruned_total,
        refine_reports=mapper.refine_reports,
    )


def _evaluate(scene, node_poses, map_, config: RunConfig) -> MetricReport:
    report = MetricReport(scene=f"synthetic-seed{scene.seed}", seed=scene.seed)
    est = [(scene.timestamp(f), node_poses[f]) for f in sorted(node_poses)]
    gt = [(scene.timestamp(f), scene.pose(f)) for f in sorted(node_poses)]
    report.ate_rmse = ate_rmse_sim3(est, gt)
    report.num_frames = len(est)
    report.num_surfels = len(map_)
    if len(map_) == 0:
        return report
    depth_l1s = []
    for f in sorted(node_poses)[:: config.eval_stride]:
        target_rgb, target_depth = _observed_views(scene, f)
        buf = render(map_.surfels, node_poses[f], scene.intrinsics, config.raster)
        report.psnr_per_view.append(psnr(buf.color, target_rgb))
        report.ssim_per_view.append(ssim(buf.color, target_rgb))
        rendered_depth = buf.depth / np.maximum(buf.accumulation, 1e-12)
        try:
            depth_l1s.append(
                depth_l1_scale_aligned(rendered_depth, target_depth, buf.accumulation)
            )
        except ValueError:
            pass
    if depth_l1s:
        report.depth_l1 = float(np.mean(depth_l1s))
    return report


def load_or_generate_scene(config: RunConfig) -> SyntheticScene:
    if config.scene_dir is not None:
        from surfelslam.oracle import load_scene_dir

        scene = load_scene_dir(config.scene_dir)
    else:
        scene = generate_scene(config.scene_config())
    scene.raster_config = config.raster if config.scene_dir else scene.raster_config
    return scene


def write_run_outputs(result: RunResult, config: RunConfig, out_dir):
    """Trajectories, map PLY, constraint file, report.csv, and the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ts = {f: result.scene.timestamp(f) for f in result.pre_pgo.frame_ids}
    sio.write_tum(out / "traj_pre_pgo.txt", result.pre_pgo.as_tuples(ts),
                  sim3=config.sim3_trajectories)
    sio.write_tum(out / "traj_post_pgo.txt", result.trajectory("post"),
                  sim3=config.sim3_trajectories)
    sio.write_surfel_ply(out / "map.ply", result.map.surfels)
    traj = ChainedTrajectory(sorted(result.node_poses), result.node_poses,
                             result.submap_of, {})
    graph = build_graph(traj, result.loop_edges, config.omega_sequential,
                        config.omega_inter)
    save_graph(out / "constraints.g2o", graph)
    result.report.write_csv(out / "report.csv")
    manifest = manifest_values(config)
    manifest["result.num_loop_closures"] = result.num_loop_closures
    manifest["result.wall_time_sec"] = f"{result.wall_time:.3f}"
    manifest["result.num_surfels"] = len(result.map)
    sio.write_flat_config(out / "manifest.txt", manifest)
