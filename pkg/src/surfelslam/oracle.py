"""Simulated feed-forward frontend: synthetic scenes and per-frame predictions.

Plays the role of the recurrent prediction model: given a frame and a submap
context it emits a camera pose (relative to the submap origin) plus a
pixel-aligned point cloud with surfel attributes, corrupted by configurable
drift and noise.  Conditioning on a historical submap descriptor re-predicts
the frame in that submap's frame and scale, which is what loop closure
consumes.

All randomness is keyed on (seed, stream tag, submap, frame), so predictions
are pure functions of their arguments and runs are bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from surfelslam import io as sio
from surfelslam.geometry import (
    SE3Pose,
    UnitQuaternion,
    pk_compose,
    pk_exp,
    quat_canonicalize,
    quat_conj,
    quat_mul,
)
from surfelslam.rasterizer import (
    CameraIntrinsics,
    RasterConfig,
    SurfelArrays,
    per_surfel_max_weight,
    render_with_argmax,
)


class InsufficientOverlapError(RuntimeError):
    """Conditioned re-prediction refused: too little covisibility with the submap."""


@dataclass(frozen=True)
class NoiseModel:
    """Frontend error model.

    ``pose_*_std`` are per-frame random-walk steps composed on the left in the
    tangent space.  ``drift_growth`` makes steps grow with the in-submap frame
    index (forgetting-style accumulating drift); ``cold_start_factor`` adds
    extra noise to the first steps after a hidden-state reset, decaying with
    ``cold_start_decay``.  ``per_submap_scale_drift`` multiplies the scale
    state at every submap boundary.
    """

    pose_rot_std: float = 0.002
    pose_trans_std: float = 0.004
    per_submap_scale_drift: float = 1.02
    point_noise_std: float = 0.01
    rng_seed: int = 0
    drift_growth: float = 0.3
    cold_start_factor: float = 5.0
    cold_start_decay: float = 1.2
    reloc_factor: float = 1.0

    def __post_init__(self):
        if min(self.pose_rot_std, self.pose_trans_std, self.point_noise_std) < 0:
            raise ValueError("noise stds must be non-negative")
        if self.per_submap_scale_drift <= 0:
            raise ValueError("scale drift must be positive")

    @classmethod
    def zero(cls, rng_seed=0):
        return cls(0.0, 0.0, 1.0, 0.0, rng_seed, 0.0, 0.0, 1.0, 0.0)


@dataclass(frozen=True)
class SceneConfig:
    extent: float = 4.0
    surfel_count: int = 2000
    frame_count: int = 120
    seed: int = 0
    width: int = 64
    height: int = 48
    fov_deg: float = 60.0
    ring_radius_frac: float = 0.22
    surface_opacity: float = 0.95
    coverage_factor: float = 0.5
    near_plane: float = 1e-3  # frustum margin culling handles camera-plane blowups


@dataclass
class SyntheticScene:
    surfels: SurfelArrays
    trajectory: list  # [(timestamp, SE3Pose camera->world)]
    intrinsics: CameraIntrinsics
    extent: float = 4.0
    seed: int = 0
    pixel_scale_factor: float = 2.0  # predicted footprint stddev, in pixels at depth z
    raster_config: RasterConfig = field(default_factory=RasterConfig)
    _render_cache: dict = field(default_factory=dict, repr=False)
    _visible_cache: dict = field(default_factory=dict, repr=False)

    @property
    def frame_count(self):
        return len(self.trajectory)

    def pose(self, frame_id) -> SE3Pose:
        return self.trajectory[frame_id][1]

    def timestamp(self, frame_id) -> float:
        return self.trajectory[frame_id][0]

    def gt_render(self, frame_id):
        """Cached ground-truth render: (buffers, per-pixel argmax surfel index)."""
        if frame_id not in self._render_cache:
            buffers, arg_w, _ = render_with_argmax(
                self.surfels, self.pose(frame_id), self.intrinsics, self.raster_config
            )
            self._render_cache[frame_id] = (buffers, arg_w)
        return self._render_cache[frame_id]

    def visible_surfels(self, frame_id, min_weight=0.05):
        """Indices of GT surfels with blending weight above min_weight in the frame."""
        key = (frame_id, min_weight)
        if key not in self._visible_cache:
            max_all, _ = per_surfel_max_weight(
                self.surfels, self.pose(frame_id), self.intrinsics, None, self.raster_config
            )
            self._visible_cache[key] = frozenset(np.flatnonzero(max_all >= min_weight).tolist())
        return self._visible_cache[key]


@dataclass(frozen=True)
class SubmapState:
    """Per-submap prediction context: origin frame, drifted scale, noise model."""

    submap_id: int
    origin_frame_id: int
    scale_state: float
    noise: NoiseModel


@dataclass
class FramePrediction:
    frame_id: int
    submap_id: int
    pose_in_submap: SE3Pose  # camera -> submap-origin frame
    points_cam: np.ndarray  # (N, 3) pixel-aligned, camera frame
    valid: np.ndarray  # (N,) bool, pixels with enough GT coverage
    rotations: np.ndarray  # (N, 4) wxyz, camera frame
    scales: np.ndarray  # (N, 2)
    opacities: np.ndarray
    colors: np.ndarray  # (N, 3)
    confidences: np.ndarray
    grid_shape: tuple  # (H, W)


@dataclass(frozen=True)
class SubmapDescriptor:
    """Stand-in for a cached hidden state: what relocalization needs to condition on."""

    submap_id: int
    anchor_pose_world: SE3Pose
    scale_state: float
    feature: np.ndarray
    frame_ids: tuple

    def feature_distance(self, other: "SubmapDescriptor") -> float:
        return float(np.linalg.norm(self.feature - other.feature))


# ---------------------------------------------------------------------------
# scene synthesis
# ---------------------------------------------------------------------------


def _plane_patch(rng, count, origin, u_axis, v_axis, u_len, v_len, normal, base_color,
                 opacity, coverage):
    """Jittered grid of surfels tiling one rectangular face."""
    aspect = u_len / v_len
    nu = max(1, int(round(math.sqrt(count * aspect))))
    nv = max(1, int(math.ceil(count / nu)))
    us = (np.arange(nu) + 0.5) / nu
    vs = (np.arange(nv) + 0.5) / nv
    uu, vv = np.meshgrid(us, vs, indexing="ij")
    uu = uu.ravel()[:count]
    vv = vv.ravel()[:count]
    hu, hv = u_len / nu, v_len / nv
    uu = uu + rng.uniform(-0.3, 0.3, uu.shape) / nu
    vv = vv + rng.uniform(-0.3, 0.3, vv.shape) / nv
    n = len(uu)
    means = (origin[None, :] + np.outer(uu * u_len, u_axis) + np.outer(vv * v_len, v_axis))
    # micro-relief off the plane keeps blending depths strictly distinct, so
    # last-ulp pose differences cannot reorder coincident surfels
    means = means + np.outer(rng.normal(0.0, 2e-3 * max(hu, hv), n), normal)

    rot = np.stack([u_axis, v_axis, normal], axis=1)
    if np.linalg.det(rot) < 0:
        rot = np.stack([v_axis, u_axis, normal], axis=1)
    base_quat = UnitQuaternion.from_matrix(rot).array()
    spin = rng.uniform(0, 2 * math.pi, n)
    half = 0.5 * spin
    spin_quat = np.stack(
        [np.cos(half), np.sin(half) * 0.0, np.sin(half) * 0.0, np.sin(half)], axis=1
    )
    quats = quat_canonicalize(quat_mul(base_quat[None, :], spin_quat))

    scale = coverage * max(hu, hv)
    scales = np.full((n, 2), scale) * rng.uniform(0.9, 1.1, (n, 2))

    freq = rng.uniform(0.8, 2.5, 2)
    phase = rng.uniform(0, 2 * math.pi, 3)
    wave = np.sin(2 * math.pi * (np.outer(uu, freq[:1]) + np.outer(vv, freq[1:]))[:, 0][:, None]
                  + phase[None, :])
    colors = np.clip(base_color[None, :] + 0.18 * wave + rng.normal(0, 0.02, (n, 3)), 0.05, 0.98)

    return SurfelArrays(
        means, quats, scales, np.full(n, opacity), colors, np.ones(n),
        np.full(n, -1, np.int64), np.full(n, -1, np.int64),
    )


def generate_scene(config: SceneConfig) -> SyntheticScene:
    """Deterministic colored-room scene with a closed-loop outward-looking orbit."""
    if config.surfel_count < 100:
        raise ValueError("surfel_count must be at least 100")
    if config.extent <= 0.5:
        raise ValueError(f"extent {config.extent} too small for the camera ring")
    rng = np.random.default_rng(config.seed)
    e = config.extent
    h = 0.6 * e
    half = e / 2.0

    ex, ey, ez = np.eye(3)
    faces = [
        # origin, u_axis, v_axis, u_len, v_len, inward normal
        (np.array([-half, -half, 0.0]), ex, ey, e, e, ez),          # floor
        (np.array([-half, -half, h]), ex, ey, e, e, -ez),           # ceiling
        (np.array([-half, -half, 0.0]), ey, ez, e, h, ex),          # wall x = -half
        (np.array([half, -half, 0.0]), ey, ez, e, h, -ex),          # wall x = +half
        (np.array([-half, -half, 0.0]), ex, ez, e, h, ey),          # wall y = -half
        (np.array([-half, half, 0.0]), ex, ez, e, h, -ey),          # wall y = +half
    ]
    # two boxes outside the camera ring for parallax / depth discontinuities
    box_size = 0.14 * e
    for angle in (0.8, 3.6):
        r = 0.38 * e
        cx, cy = r * math.cos(angle), r * math.sin(angle)
        x0, y0 = cx - box_size / 2, cy - box_size / 2
        s = box_size
        faces += [
            (np.array([x0, y0, s]), ex, ey, s, s, ez),              # top
            (np.array([x0, y0, 0.0]), ey, ez, s, s, -ex),           # -x side
            (np.array([x0 + s, y0, 0.0]), ey, ez, s, s, ex),
            (np.array([x0, y0, 0.0]), ex, ez, s, s, -ey),
            (np.array([x0, y0 + s, 0.0]), ex, ez, s, s, ey),
        ]

    areas = np.array([f[3] * f[4] for f in faces])
    counts = np.maximum(4, (config.surfel_count * areas / areas.sum()).astype(int))
    palette = rng.uniform(0.2, 0.85, (len(faces), 3))
    parts = [
        _plane_patch(rng, int(c), o, u, v, ul, vl, n, base, config.surface_opacity,
                     config.coverage_factor)
        for (o, u, v, ul, vl, n), c, base in zip(faces, counts, palette)
    ]
    surfels = SurfelArrays.concatenate(parts)

    fov = math.radians(config.fov_deg)
    fx = config.width / (2.0 * math.tan(fov / 2.0))
    intr = CameraIntrinsics(fx, fx, (config.width - 1) / 2.0, (config.height - 1) / 2.0,
                            config.width, config.height)

    ring_r = config.ring_radius_frac * e
    cam_z = 0.5 * h
    trajectory = []
    n = config.frame_count
    for i in range(n):
        theta = 2 * math.pi * i / n
        c, s = math.cos(theta), math.sin(theta)
        pos = np.array([ring_r * c, ring_r * s, cam_z])
        right = np.array([s, -c, 0.0])
        down = np.array([0.0, 0.0, -1.0])
        forward = np.array([c, s, 0.0])
        rot = np.stack([right, down, forward], axis=1)
        trajectory.append((i / 30.0, SE3Pose(UnitQuaternion.from_matrix(rot), pos)))

    return SyntheticScene(
        surfels, trajectory, intr, extent=e, seed=config.seed,
        raster_config=RasterConfig(near_plane=config.near_plane),
    )


# ---------------------------------------------------------------------------
# predictions
# ---------------------------------------------------------------------------


def _step_rng(noise, tag, submap_id, frame_id):
    return np.random.default_rng(
        [noise.rng_seed & 0x7FFFFFFF, tag, submap_id & 0x7FFFFFFF, frame_id]
    )


def _pose_noise(noise: NoiseModel, submap_id: int, origin: int, frame_id: int) -> SE3Pose:
    """Left-composed random-walk noise accumulated from the submap origin."""
    if noise.pose_rot_std == 0.0 and noise.pose_trans_std == 0.0 or frame_id <= origin:
        return SE3Pose.identity()
    packed = None
    for k in range(origin + 1, frame_id + 1):
        idx = k - origin
        shaping = (1.0 + noise.drift_growth * idx) * (
            1.0 + noise.cold_start_factor * math.exp(-(idx - 1) / noise.cold_start_decay)
        )
        rng = _step_rng(noise, 11, submap_id, k)
        delta = np.zeros(7)
        delta[0:3] = rng.normal(0.0, noise.pose_trans_std * shaping, 3)
        delta[3:6] = rng.normal(0.0, noise.pose_rot_std * shaping, 3)
        step = pk_exp(delta)
        packed = step if packed is None else pk_compose(step, packed)
    return SE3Pose(UnitQuaternion.from_array(packed[4:8]), packed[1:4])


def _pixel_grid(intr: CameraIntrinsics):
    xs = np.arange(intr.width, dtype=float)
    ys = np.arange(intr.height, dtype=float)
    gx, gy = np.meshgrid(xs, ys)
    dirs = np.stack([(gx - intr.cx) / intr.fx, (gy - intr.cy) / intr.fy, np.ones_like(gx)], axis=-1)
    return dirs.reshape(-1, 3)


def _pixel_points(scene: SyntheticScene, frame_id: int):
    """Per-pixel metric points, attributes, and validity from the GT render."""
    buffers, arg_w = scene.gt_render(frame_id)
    intr = scene.intrinsics
    accum = buffers.accumulation.reshape(-1)
    depth = buffers.depth.reshape(-1)
    valid = (accum > 0.5) & (depth > 0)
    z = np.where(valid, depth / np.maximum(accum, 1e-12), 1.0)
    points = _pixel_grid(intr) * z[:, None]

    arg = arg_w.reshape(-1).copy()
    missing = arg < 0
    arg[missing] = 0
    q_wc = scene.pose(frame_id).rotation.array()
    rot_world = scene.surfels.quats[arg]
    rot_cam = quat_canonicalize(quat_mul(quat_conj(q_wc)[None, :], rot_world))
    rot_cam[missing] = np.array([1.0, 0, 0, 0])
    opac = scene.surfels.opacities[arg].copy()
    opac[missing] = 0.0
    colors = buffers.color.reshape(-1, 3)
    conf = accum.copy()
    scale = scene.pixel_scale_factor * z / intr.fx
    scales = np.stack([scale, scale], axis=1)
    return points, valid, rot_cam, scales, opac, colors, conf


def predict_frame(scene: SyntheticScene, frame_id: int, state: SubmapState) -> FramePrediction:
    """Per-frame prediction in the submap frame, at the submap's drifted scale."""
    if not 0 <= frame_id < scene.frame_count:
        raise IndexError(f"frame {frame_id} outside trajectory")
    noise = state.noise
    t_origin = scene.pose(state.origin_frame_id)
    rel = t_origin.inverse().compose(scene.pose(frame_id))
    scaled = SE3Pose(rel.rotation, state.scale_state * rel.translation)
    pose = _pose_noise(noise, state.submap_id, state.origin_frame_id, frame_id).compose(scaled)

    points_m, valid, rot, scales, opac, colors, conf = _pixel_points(scene, frame_id)
    points = state.scale_state * points_m
    if noise.point_noise_std > 0:
        rng = _step_rng(noise, 13, state.submap_id, frame_id)
        points = points + rng.normal(0.0, noise.point_noise_std, points.shape)
    return FramePrediction(
        frame_id, state.submap_id, pose, points, valid, rot,
        state.scale_state * scales, opac, colors, conf,
        (scene.intrinsics.height, scene.intrinsics.width),
    )


def covisibility(scene: SyntheticScene, frame_id: int, submap_frame_ids) -> float:
    """Fraction of the frame's visible GT surfels covered by the submap's frames."""
    seen = scene.visible_surfels(frame_id)
    if not seen:
        return 0.0
    coverage = set()
    for f in submap_frame_ids:
        coverage |= scene.visible_surfels(f)
    return len(seen & coverage) / len(seen)


def reinterpret_frame(scene: SyntheticScene, frame_id: int, descriptor: SubmapDescriptor,
                      noise: NoiseModel, min_covisibility: float = 0.25) -> FramePrediction:
    """Conditioned forward pass: interpret the frame in a historical submap's context.

    Returns the relocalized pose (camera -> descriptor submap origin) and the
    point cloud at the descriptor's scale state.  Raises
    :class:`InsufficientOverlapError` when GT covisibility is below threshold,
    simulating relocalization failure.
    """
    covis = covisibility(scene, frame_id, descriptor.frame_ids)
    if covis < min_covisibility:
        raise InsufficientOverlapError(
            f"frame {frame_id} covisibility {covis:.3f} with submap "
            f"{descriptor.submap_id} below {min_covisibility}"
        )
    rel = descriptor.anchor_pose_world.inverse().compose(scene.pose(frame_id))
    pose = SE3Pose(rel.rotation, descriptor.scale_state * rel.translation)
    if noise.pose_rot_std > 0 or noise.pose_trans_std > 0:
        rng = _step_rng(noise, 17, descriptor.submap_id, frame_id)
        delta = np.zeros(7)
        delta[0:3] = rng.normal(0.0, noise.pose_trans_std * noise.reloc_factor, 3)
        delta[3:6] = rng.normal(0.0, noise.pose_rot_std * noise.reloc_factor, 3)
        packed = pk_exp(delta)
        pose = SE3Pose(UnitQuaternion.from_array(packed[4:8]), packed[1:4]).compose(pose)

    points_m, valid, rot, scales, opac, colors, conf = _pixel_points(scene, frame_id)
    points = descriptor.scale_state * points_m
    if noise.point_noise_std > 0:
        rng = _step_rng(noise, 19, descriptor.submap_id, frame_id)
        points = points + rng.normal(0.0, noise.point_noise_std, points.shape)
    return FramePrediction(
        frame_id, descriptor.submap_id, pose, points, valid, rot,
        descriptor.scale_state * scales, opac, colors, conf,
        (scene.intrinsics.height, scene.intrinsics.width),
    )


def make_descriptor(scene: SyntheticScene, submap_id: int, frame_ids,
                    scale_state: float) -> SubmapDescriptor:
    """Viewpoint summary standing in for the cached hidden state."""
    frame_ids = tuple(frame_ids)
    anchor = scene.pose(frame_ids[0])
    cell = scene.extent / 4.0
    positions = np.stack([scene.pose(f).translation for f in frame_ids])
    pos_cell = np.floor(positions.mean(axis=0) / cell)
    forwards = np.stack([scene.pose(f).rotation.matrix()[:, 2] for f in frame_ids])
    mean_dir = forwards.mean(axis=0)
    mean_dir /= max(np.linalg.norm(mean_dir), 1e-12)
    # position cells down-weighted: viewing direction separates revisits better
    feature = np.concatenate([0.5 * pos_cell, mean_dir])
    return SubmapDescriptor(submap_id, anchor, scale_state, feature, frame_ids)


class OracleFrontend:
    """Binds a scene and noise model into the frontend interface the tracker uses."""

    def __init__(self, scene: SyntheticScene, noise: NoiseModel,
                 min_covisibility: float = 0.25):
        self.scene = scene
        self.noise = noise
        self.min_covisibility = min_covisibility

    def scale_state(self, submap_id: int) -> float:
        return self.noise.per_submap_scale_drift**submap_id

    def submap_state(self, submap_id: int, origin_frame_id: int) -> SubmapState:
        return SubmapState(submap_id, origin_frame_id, self.scale_state(submap_id), self.noise)

    def predict(self, frame_id: int, submap_id: int, origin_frame_id: int) -> FramePrediction:
        return predict_frame(self.scene, frame_id, self.submap_state(submap_id, origin_frame_id))

    def descriptor(self, submap_id: int, frame_ids) -> SubmapDescriptor:
        return make_descriptor(self.scene, submap_id, frame_ids, self.scale_state(submap_id))

    def reinterpret(self, frame_id: int, descriptor: SubmapDescriptor) -> FramePrediction:
        return reinterpret_frame(self.scene, frame_id, descriptor, self.noise,
                                 self.min_covisibility)


# ---------------------------------------------------------------------------
# scene directory serialization
# ---------------------------------------------------------------------------


def write_scene_dir(scene: SyntheticScene, out_dir, predictions=None):
    """Emit scene.ply, trajectory_gt.txt, intrinsics.txt, rgb/, depth/, pred/."""
    out = Path(out_dir)
    (out / "rgb").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(exist_ok=True)
    sio.write_surfel_ply(out / "scene.ply", scene.surfels)
    sio.write_tum(out / "trajectory_gt.txt", scene.trajectory)
    sio.write_intrinsics(out / "intrinsics.txt", scene.intrinsics)
    with open(out / "scene_meta.txt", "w") as f:
        f.write(f"extent = {scene.extent!r}\nseed = {scene.seed}\n")
    for frame_id in range(scene.frame_count):
        buffers, _ = scene.gt_render(frame_id)
        sio.write_rgb_png(out / "rgb" / f"{frame_id:06d}.png", buffers.color)
        sio.write_depth_png(out / "depth" / f"{frame_id:06d}.png", buffers.depth)
    if predictions:
        (out / "pred").mkdir(exist_ok=True)
        for pred in predictions:
            sio.write_prediction_bin(out / "pred" / f"{pred.frame_id:06d}.bin", pred)


def load_scene_dir(scene_dir) -> SyntheticScene:
    """Rebuild a scene from its serialized directory (surfels + GT trajectory)."""
    d = Path(scene_dir)
    surfels = sio.read_surfel_ply(d / "scene.ply")
    traj = [
        (ts, SE3Pose(t.rotation, t.translation))
        for ts, t in sio.read_tum(d / "trajectory_gt.txt")
    ]
    intr = sio.read_intrinsics(d / "intrinsics.txt")
    extent, seed = 4.0, 0
    meta = d / "scene_meta.txt"
    if meta.exists():
        vals = sio.read_flat_config(meta)
        extent = float(vals.get("extent", extent))
        seed = int(vals.get("seed", seed))
    return SyntheticScene(surfels, traj, intr, extent=extent, seed=seed)
