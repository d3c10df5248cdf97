"""Submap partitioning and trajectory chaining.

The incoming stream is cut into fixed-length clips with a one-frame overlap;
the overlap frame is re-predicted under the new submap's re-initialized state,
which is what yields the inter-submap alignment constraint.  Chained world
poses live in Sim(3): the per-submap scale ratio estimated at each boundary is
carried into the node scales, so downstream fusion and pose-graph edges see
the accumulated scale state.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from surfelslam.geometry import SE3Pose, Sim3Transform
from surfelslam.loop_closure import estimate_scale
from surfelslam.oracle import FramePrediction, SubmapDescriptor


@dataclass
class Submap:
    """A sealed clip: contiguous frames with poses in the clip's first-frame frame."""

    submap_id: int
    frame_ids: tuple
    local_poses: dict  # frame_id -> SE3Pose (frame -> submap origin)
    descriptor: SubmapDescriptor
    predictions: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        first = self.frame_ids[0]
        pose0 = self.local_poses[first]
        if np.linalg.norm(pose0.translation) > 1e-12 or abs(pose0.rotation.w - 1.0) > 1e-12:
            raise ValueError("first local pose of a submap must be identity")

    @property
    def overlap_frame_id(self):
        return self.frame_ids[-1]

    def stripped(self) -> "Submap":
        """Drop interior predictions, keeping only the boundary frames' data."""
        keep = {self.frame_ids[0], self.frame_ids[-1]}
        return replace(self, predictions={f: p for f, p in self.predictions.items() if f in keep})


@dataclass
class ChainedTrajectory:
    """Per-keyframe Sim(3) world poses; world frame = first frame of submap 0."""

    frame_ids: list
    poses: dict  # frame_id -> Sim3Transform (keyframe -> world)
    submap_of: dict  # frame_id -> owning submap id (earliest containing submap)
    submap_transforms: dict  # submap_id -> Sim3Transform (submap frame -> world)

    def as_tuples(self, timestamps=None):
        ts = timestamps or {f: float(f) for f in self.frame_ids}
        return [(ts[f], self.poses[f]) for f in self.frame_ids]


def partition(frame_ids, frontend, clip_length: int) -> Iterator[Submap]:
    """Cut the stream into submaps of ``clip_length`` frames with one-frame overlap.

    ``frontend`` supplies per-frame predictions under a given submap context
    (``predict(frame_id, submap_id, origin_frame_id)``) and submap descriptors;
    the overlap frame is re-predicted under the new submap's fresh state.
    """
    frame_ids = list(frame_ids)
    if clip_length < 2:
        raise ValueError("clip_length must be at least 2")
    if len(frame_ids) < 2:
        raise ValueError("stream must contain at least 2 frames")
    start = 0
    submap_id = 0
    while start < len(frame_ids) - 1:
        ids = tuple(frame_ids[start : start + clip_length])
        preds = {f: frontend.predict(f, submap_id, ids[0]) for f in ids}
        local = {f: preds[f].pose_in_submap for f in ids}
        desc = frontend.descriptor(submap_id, ids)
        yield Submap(submap_id, ids, local, desc, preds)
        start += clip_length - 1
        submap_id += 1


def inter_submap_constraint(a: Submap, b: Submap, pred_a: FramePrediction,
                            pred_b: FramePrediction) -> Sim3Transform:
    """Alignment of adjacent submaps from their shared frame (b origin -> a origin).

    Rotation/translation come from the two pose estimates of the shared frame;
    the scale is the least-squares ratio between the two point-cloud
    interpretations (new over old), i.e. the per-boundary scale drift.
    """
    if a.overlap_frame_id != b.frame_ids[0]:
        raise ValueError(
            f"submaps {a.submap_id}/{b.submap_id} do not share an overlap frame"
        )
    if pred_a.frame_id != a.overlap_frame_id or pred_b.frame_id != b.frame_ids[0]:
        raise ValueError("predictions must be of the shared frame")
    both = pred_a.valid & pred_b.valid
    s_star = estimate_scale(pred_b.points_cam[both], pred_a.points_cam[both])
    rel = pred_a.pose_in_submap.compose(pred_b.pose_in_submap.inverse())
    return Sim3Transform(s_star, rel.rotation, rel.translation)


def chain(submaps, constraints) -> ChainedTrajectory:
    """Compose inter-submap constraints into continuous Sim(3) world poses.

    ``constraints[k]`` aligns ``submaps[k+1]`` to ``submaps[k]``.  Every frame
    is owned by the earliest submap containing it; frame 0's world pose is the
    identity (gauge).
    """
    submaps = list(submaps)
    if len(constraints) != len(submaps) - 1:
        raise ValueError(
            f"need {len(submaps) - 1} constraints for {len(submaps)} submaps, "
            f"got {len(constraints)}"
        )
    frame_ids = []
    poses = {}
    submap_of = {}
    submap_transforms = {}
    world = Sim3Transform.identity()
    for k, sm in enumerate(submaps):
        if k > 0:
            world = world.compose(constraints[k - 1])
        submap_transforms[sm.submap_id] = world
        for f in sm.frame_ids:
            if f in poses:
                continue
            poses[f] = world.compose(sm.local_poses[f].as_sim3())
            submap_of[f] = sm.submap_id
            frame_ids.append(f)
    frame_ids.sort()
    return ChainedTrajectory(frame_ids, poses, submap_of, submap_transforms)
