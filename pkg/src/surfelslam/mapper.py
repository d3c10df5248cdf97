"""Incremental global surfel map: voxelization, gated fusion, pruning,
lightweight appearance refinement, and rigid loop correction.

Surfels are rigidly bound to their originating keyframe; loop corrections warp
each keyframe's primitives by the pose delta without re-rendering.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from surfelslam.evaluation import psnr
from surfelslam.geometry import Sim3Transform, quat_canonicalize, quat_mul
from surfelslam.oracle import FramePrediction
from surfelslam.rasterizer import (
    DEFAULT_RASTER_CONFIG,
    CameraIntrinsics,
    LossWeights,
    RasterConfig,
    SurfelArrays,
    grad_color_opacity,
    per_surfel_max_weight,
    render,
)


@dataclass(frozen=True)
class VoxelizationConfig:
    """2x2 block merging policy.

    A block is merged when its camera-frame depth range (max - min) stays
    below the threshold: ``depth_threshold`` scene units when set, otherwise
    ``relative_depth_threshold`` times the block's median depth.
    """

    depth_threshold: float | None = None
    relative_depth_threshold: float = 0.05

    def __post_init__(self):
        if self.depth_threshold is not None and self.depth_threshold <= 0:
            raise ValueError("depth_threshold must be positive")
        if self.relative_depth_threshold <= 0:
            raise ValueError("relative_depth_threshold must be positive")


@dataclass(frozen=True)
class FusionConfig:
    accum_threshold: float = 0.5
    prune_rgb_error: float = 0.2
    prune_depth_error_frac: float = 0.10
    prune_contribution_floor: float = 0.1

    def __post_init__(self):
        if not 0 < self.accum_threshold < 1:
            raise ValueError("accum_threshold must be in (0, 1)")
        if min(self.prune_rgb_error, self.prune_depth_error_frac,
               self.prune_contribution_floor) <= 0:
            raise ValueError("prune thresholds must be positive")


@dataclass(frozen=True)
class RefinementConfig:
    iterations: int = 20
    keyframes: int = 4
    initial_step: float = 0.1
    min_step: float = 1e-6
    loss: LossWeights = field(default_factory=LossWeights)


@dataclass
class GlobalSurfelMap:
    """World-frame surfel store with keyframe bindings and current poses."""

    surfels: SurfelArrays = field(default_factory=SurfelArrays.empty)
    keyframe_poses: dict = field(default_factory=dict)  # kf_id -> Sim3Transform

    def __len__(self):
        return len(self.surfels)

    @property
    def keyframe_index(self):
        """keyframe_id -> surfel indices; covers every surfel exactly once."""
        out = {}
        for i, kf in enumerate(self.surfels.keyframe_ids):
            out.setdefault(int(kf), []).append(i)
        return out

    def insert(self, new: SurfelArrays):
        unknown = set(np.unique(new.keyframe_ids).tolist()) - set(self.keyframe_poses)
        if unknown:
            raise KeyError(f"surfels bound to unregistered keyframes {sorted(unknown)}")
        self.surfels = SurfelArrays.concatenate([self.surfels, new])

    def remove(self, indices):
        keep = np.ones(len(self.surfels), dtype=bool)
        keep[np.asarray(indices, dtype=int)] = False
        self.surfels = self.surfels.select(keep)

    def copy(self) -> "GlobalSurfelMap":
        return GlobalSurfelMap(self.surfels.copy(), dict(self.keyframe_poses))


# ---------------------------------------------------------------------------
# adaptive voxelization (2x2 block merging)
# ---------------------------------------------------------------------------


def adaptive_voxelize(pred: FramePrediction, cfg: VoxelizationConfig = VoxelizationConfig()):
    """Merge each flat 2x2 pixel block of predicted surfels into one primitive.

    Blocks whose depth variation exceeds the threshold, or that touch invalid
    pixels, pass through unmerged; odd image edges are excluded from merging.
    Returned surfels stay in the camera frame.
    """
    h, w = pred.grid_shape
    idx = np.arange(h * w).reshape(h, w)
    h2, w2 = h // 2, w // 2
    blocks = np.stack(
        [
            idx[0 : 2 * h2 : 2, 0 : 2 * w2 : 2],
            idx[0 : 2 * h2 : 2, 1 : 2 * w2 : 2],
            idx[1 : 2 * h2 : 2, 0 : 2 * w2 : 2],
            idx[1 : 2 * h2 : 2, 1 : 2 * w2 : 2],
        ],
        axis=-1,
    ).reshape(-1, 4)

    z = pred.points_cam[:, 2]
    all_valid = pred.valid[blocks].all(axis=1)
    bz = z[blocks]
    depth_range = bz.max(axis=1) - bz.min(axis=1)
    if cfg.depth_threshold is not None:
        tau = np.full(len(blocks), cfg.depth_threshold)
    else:
        tau = cfg.relative_depth_threshold * np.median(bz, axis=1)
    mergeable = all_valid & (depth_range <= tau)

    merged_blocks = blocks[mergeable]
    means = pred.points_cam[merged_blocks].mean(axis=1)
    scales = pred.scales[merged_blocks].mean(axis=1)
    opac = pred.opacities[merged_blocks].mean(axis=1)
    colors = pred.colors[merged_blocks].mean(axis=1)
    conf = pred.confidences[merged_blocks].mean(axis=1)
    quats = pred.rotations[merged_blocks]  # (B, 4, 4)
    ref = quats[:, 0:1, :]
    sign = np.where(np.sum(quats * ref, axis=2, keepdims=True) < 0, -1.0, 1.0)
    qsum = np.sum(quats * sign, axis=1)
    qsum /= np.linalg.norm(qsum, axis=1, keepdims=True)
    merged = SurfelArrays(
        means, quat_canonicalize(qsum), scales, opac, colors, conf,
        np.full(len(means), -1, np.int64), np.full(len(means), -1, np.int64),
    )

    # everything not merged passes through: unmergeable blocks and edge strips
    passthrough_mask = pred.valid.copy()
    passthrough_mask[merged_blocks.reshape(-1)] = False
    pi = np.flatnonzero(passthrough_mask)
    passthrough = SurfelArrays(
        pred.points_cam[pi], pred.rotations[pi], pred.scales[pi], pred.opacities[pi],
        pred.colors[pi], pred.confidences[pi],
        np.full(len(pi), -1, np.int64), np.full(len(pi), -1, np.int64),
    )
    return SurfelArrays.concatenate([merged, passthrough])


def prediction_surfels(pred: FramePrediction) -> SurfelArrays:
    """All valid per-pixel surfels of a prediction, unmerged, camera frame."""
    pi = np.flatnonzero(pred.valid)
    return SurfelArrays(
        pred.points_cam[pi], pred.rotations[pi], pred.scales[pi], pred.opacities[pi],
        pred.colors[pi], pred.confidences[pi],
        np.full(len(pi), -1, np.int64), np.full(len(pi), -1, np.int64),
    )


# ---------------------------------------------------------------------------
# fusion
# ---------------------------------------------------------------------------


def transform_surfels(surfels: SurfelArrays, t: Sim3Transform) -> SurfelArrays:
    """Camera->world per the node pose: means by the Sim(3) action, rotations
    left-composed, tangent scales multiplied by the pose scale."""
    q = t.rotation.array()
    return SurfelArrays(
        t.act(surfels.means),
        quat_canonicalize(quat_mul(q[None, :], surfels.quats)),
        t.scale * surfels.scales,
        surfels.opacities.copy(),
        surfels.colors.copy(),
        surfels.confidences.copy(),
        surfels.keyframe_ids.copy(),
        surfels.submap_ids.copy(),
    )


def fuse(map_: GlobalSurfelMap, new_surfels: SurfelArrays, keyframe_id: int,
         pose: Sim3Transform, intr: CameraIntrinsics,
         cfg: FusionConfig = FusionConfig(),
         raster_cfg: RasterConfig = DEFAULT_RASTER_CONFIG,
         submap_id: int = -1) -> dict:
    """Insert camera-frame surfels where the map's accumulation is still low.

    The gate renders the current map's accumulation from the keyframe pose and
    keeps only candidates whose own projected pixel is below the threshold.
    """
    if keyframe_id not in map_.keyframe_poses:
        map_.keyframe_poses[keyframe_id] = pose
    n_cand = len(new_surfels)
    if n_cand == 0:
        return {"candidates": 0, "inserted": 0}
    if len(map_) == 0:
        keep = np.ones(n_cand, dtype=bool)
    else:
        buf = render(map_.surfels, pose, intr, raster_cfg)
        z = new_surfels.means[:, 2]
        px = np.round(intr.fx * new_surfels.means[:, 0] / z + intr.cx).astype(int)
        py = np.round(intr.fy * new_surfels.means[:, 1] / z + intr.cy).astype(int)
        inside = (px >= 0) & (px < intr.width) & (py >= 0) & (py < intr.height) & (z > 0)
        accum = np.zeros(n_cand)
        accum[inside] = buf.accumulation[py[inside], px[inside]]
        keep = accum < cfg.accum_threshold
    world = transform_surfels(new_surfels.select(keep), pose)
    world.keyframe_ids[:] = keyframe_id
    world.submap_ids[:] = submap_id
    map_.insert(world)
    return {"candidates": n_cand, "inserted": int(keep.sum())}


# ---------------------------------------------------------------------------
# pruning
# ---------------------------------------------------------------------------


def prune(map_: GlobalSurfelMap, keyframe_id: int, observed_rgb, observed_depth,
          intr: CameraIntrinsics, cfg: FusionConfig = FusionConfig(),
          raster_cfg: RasterConfig = DEFAULT_RASTER_CONFIG) -> int:
    """Remove surfels that contribute to pixels with large reconstruction error."""
    if len(map_) == 0:
        return 0
    pose = map_.keyframe_poses[keyframe_id]
    buf = render(map_.surfels, pose, intr, raster_cfg)
    covered = buf.accumulation > 0.5
    rgb_err = np.max(np.abs(buf.color - observed_rgb), axis=2) > cfg.prune_rgb_error
    depth_norm = buf.depth / np.maximum(buf.accumulation, 1e-12)
    obs = np.asarray(observed_depth, dtype=float)
    depth_err = (obs > 0) & (
        np.abs(depth_norm - obs) > cfg.prune_depth_error_frac * obs
    )
    marked = covered & (rgb_err | depth_err)
    if not marked.any():
        return 0
    _, max_marked = per_surfel_max_weight(map_.surfels, pose, intr, marked, raster_cfg)
    victims = np.flatnonzero(max_marked > cfg.prune_contribution_floor)
    if len(victims):
        map_.remove(victims)
    return int(len(victims))


# ---------------------------------------------------------------------------
# refinement (color + opacity only; geometry fixed)
# ---------------------------------------------------------------------------


@dataclass
class RefinementReport:
    losses: list
    psnr_before: float
    psnr_after: float
    accepted_steps: int


def refine(map_: GlobalSurfelMap, keyframe_ids, observations, intr: CameraIntrinsics,
           cfg: RefinementConfig = RefinementConfig(),
           raster_cfg: RasterConfig = DEFAULT_RASTER_CONFIG) -> RefinementReport:
    """Backtracking gradient descent on the colors/opacities of the surfels
    bound to the given keyframes; the summed loss never increases.

    ``observations`` maps keyframe_id -> (rgb, depth) targets.
    """
    keyframe_ids = [k for k in keyframe_ids if k in observations]
    views = [(map_.keyframe_poses[k], *observations[k]) for k in keyframe_ids]
    target_mask = np.isin(map_.surfels.keyframe_ids, np.asarray(keyframe_ids, dtype=np.int64))

    def view_psnrs():
        vals = []
        for pose, rgb, _ in views:
            buf = render(map_.surfels, pose, intr, raster_cfg)
            vals.append(psnr(buf.color, rgb))
        finite = [v for v in vals if math.isfinite(v)]
        return float(np.mean(finite)) if finite else float("inf")

    def total_loss_and_grads(with_grads=True):
        total = 0.0
        gc = np.zeros((len(map_.surfels), 3))
        go = np.zeros(len(map_.surfels))
        for pose, rgb, depth in views:
            if with_grads:
                c, o, l = grad_color_opacity(
                    map_.surfels, pose, intr, rgb, depth, cfg.loss, raster_cfg
                )
                gc += c
                go += o
                total += l
            else:
                from surfelslam.rasterizer import render_loss

                total += render_loss(render(map_.surfels, pose, intr, raster_cfg),
                                     rgb, depth, cfg.loss)
        return total, gc, go

    psnr_before = view_psnrs()
    if cfg.iterations == 0 or not views or not target_mask.any():
        return RefinementReport([], psnr_before, psnr_before, 0)

    loss, gc, go = total_loss_and_grads()
    losses = [loss]
    accepted = 0
    step_scale = cfg.initial_step  # warm-started across iterations
    for _ in range(cfg.iterations):
        gc[~target_mask] = 0.0
        go[~target_mask] = 0.0
        gnorm = max(float(np.max(np.abs(gc))), float(np.max(np.abs(go))))
        if gnorm < 1e-14:
            break
        step = step_scale / gnorm  # first try moves ~step_scale in attribute units
        colors0 = map_.surfels.colors.copy()
        opac0 = map_.surfels.opacities.copy()
        improved = False
        while step >= cfg.min_step / gnorm:
            map_.surfels.colors = np.clip(colors0 - step * gc, 0.0, 1.0)
            map_.surfels.opacities = np.clip(opac0 - step * go, 0.0, 1.0)
            new_loss, new_gc, new_go = total_loss_and_grads()
            if new_loss < loss:
                loss, gc, go = new_loss, new_gc, new_go
                losses.append(loss)
                accepted += 1
                improved = True
                step_scale = min(2.0 * step * gnorm, cfg.initial_step)
                break
            step *= 0.5
        if not improved:
            map_.surfels.colors = colors0
            map_.surfels.opacities = opac0
            break
    return RefinementReport(losses, psnr_before, view_psnrs(), accepted)


# ---------------------------------------------------------------------------
# loop correction
# ---------------------------------------------------------------------------


def loop_correct(map_: GlobalSurfelMap, updates: dict) -> int:
    """Rigidly warp each keyframe's primitives by its pose delta.

    ``updates`` maps keyframe_id -> (new_pose, delta) with
    ``delta = new * old^-1``; every keyframe holding surfels must be covered.
    Returns the number of moved surfels.
    """
    kfs = np.unique(map_.surfels.keyframe_ids)
    missing = [int(k) for k in kfs if int(k) not in updates]
    if missing:
        raise KeyError(f"no pose delta for keyframes {missing[:10]}")
    moved = 0
    for kf in kfs:
        new_pose, delta = updates[int(kf)]
        sel = map_.surfels.keyframe_ids == kf
        idx = np.flatnonzero(sel)
        if not len(idx):
            continue
        q = delta.rotation.array()
        map_.surfels.means[idx] = delta.act(map_.surfels.means[idx])
        map_.surfels.quats[idx] = quat_canonicalize(
            quat_mul(q[None, :], map_.surfels.quats[idx])
        )
        map_.surfels.scales[idx] = delta.scale * map_.surfels.scales[idx]
        moved += len(idx)
    for kf, (new_pose, _) in updates.items():
        if kf in map_.keyframe_poses:
            map_.keyframe_poses[kf] = new_pose
    return moved
