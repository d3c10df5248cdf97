"""Loop detection against the descriptor bag and Sim(3) constraint assembly.

Detection is descriptor-distance matching with a recency gate; the heavy
lifting (conditioned re-prediction) lives in the oracle.  The relative-scale
estimator is the closed-form least-squares minimizer of
``sum_k || mu_b_k - s * mu_a_k ||^2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from surfelslam.geometry import SE3Pose, Sim3Transform


class ScaleEstimationError(ValueError):
    """Degenerate or inconsistent point clouds for relative-scale estimation."""


@dataclass(frozen=True)
class LoopCandidate:
    current_frame: int
    historical_frame: int
    historical_submap: int
    current_submap: int


@dataclass(frozen=True)
class Sim3Constraint:
    """One pose-graph edge: measurement of (T_from^W)^-1 * T_to^W."""

    from_node: int
    to_node: int
    measurement: Sim3Transform
    omega: float = 1.0
    kind: str = "loop"  # sequential | inter_submap | loop

    def __post_init__(self):
        if self.omega <= 0:
            raise ValueError("information weight must be positive")


def detect(bag, current, frame_id, min_submap_gap=2, feature_threshold=1.2):
    """At most one loop candidate for the frame, against sufficiently old submaps."""
    candidates = [
        d for d in bag
        if d.submap_id <= current.submap_id - min_submap_gap
        and d.feature_distance(current) < feature_threshold
    ]
    if not candidates:
        return []
    best = min(candidates, key=lambda d: d.feature_distance(current))
    return [
        LoopCandidate(
            current_frame=frame_id,
            historical_frame=best.frame_ids[0],
            historical_submap=best.submap_id,
            current_submap=current.submap_id,
        )
    ]


def estimate_scale(points_b, points_a, min_points=10, mad_reject=False):
    """Closed-form s* = (sum mu_b . mu_a) / (sum |mu_a|^2), the exact minimizer.

    ``mad_reject`` enables one pass of 3-MAD outlier rejection on per-point
    residual norms before re-solving (off by default; the estimator is plain
    least squares).
    """
    b = np.asarray(points_b, dtype=float)
    a = np.asarray(points_a, dtype=float)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 3:
        raise ValueError("point lists must be matching (N, 3) arrays")
    if a.shape[0] < min_points:
        raise ScaleEstimationError(f"need at least {min_points} points, got {a.shape[0]}")

    def solve(bb, aa):
        denom = float(np.sum(aa * aa))
        if denom < 1e-12:
            raise ScaleEstimationError("degenerate denominator: |mu_a| ~ 0")
        return float(np.sum(bb * aa)) / denom

    s = solve(b, a)
    if mad_reject:
        resid = np.linalg.norm(b - s * a, axis=1)
        med = np.median(resid)
        mad = np.median(np.abs(resid - med))
        keep = np.abs(resid - med) <= 3.0 * max(mad, 1e-12)
        if keep.sum() >= min_points:
            s = solve(b[keep], a[keep])
    if s <= 0:
        raise ScaleEstimationError(f"non-positive scale {s}: relocalization inconsistent")
    return s


def build_constraint(reloc_pose: SE3Pose, hist_pose: SE3Pose, s_star: float,
                     current_node: int, historical_node: int,
                     omega: float = 0.5) -> Sim3Constraint:
    """Assemble the Sim(3) loop edge from the relocalized and historical poses.

    The relative pose is ``(T_j^a)^-1 * T_i^a`` (current j, historical i); its
    rotation pairs with the estimated scale, and its translation is carried at
    the current node's scale so the constraint is metrically consistent (the
    zero-noise contract pins this: GT poses must satisfy the edge exactly).
    """
    if s_star <= 0:
        raise ValueError("scale must be positive")
    rel = reloc_pose.inverse().compose(hist_pose)
    measurement = Sim3Transform(s_star, rel.rotation, s_star * rel.translation)
    return Sim3Constraint(current_node, historical_node, measurement, omega, "loop")
