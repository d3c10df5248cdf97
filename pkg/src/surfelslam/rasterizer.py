"""CPU reference rasterizer for 2D Gaussian surfels.

Renders color / expected-depth / accumulation buffers by front-to-back
volumetric alpha blending of projected surfel footprints, and provides
analytic gradients of the photometric+depth loss with respect to surfel
color and opacity (geometry held fixed).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from surfelslam import _raster_kernels as _k
from surfelslam.geometry import (
    SE3Pose,
    UnitQuaternion,
    pk_inverse,
    quat_rotate,
    quat_to_matrix,
)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics; pixel (row i, col j) samples the image plane at (j, i)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def scaled(self, factor: float) -> "CameraIntrinsics":
        return CameraIntrinsics(
            self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor,
            max(1, int(round(self.width * factor))), max(1, int(round(self.height * factor))),
        )


@dataclass
class Surfel:
    """One 2D Gaussian primitive (disk spanned by the first two rotation axes)."""

    mean: np.ndarray
    rotation: UnitQuaternion
    scale: np.ndarray  # 2-vector of tangent-plane stddevs, scene units
    opacity: float
    color: np.ndarray
    confidence: float = 1.0
    keyframe_id: int = -1
    submap_id: int = -1

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.scale = np.asarray(self.scale, dtype=float)
        self.color = np.asarray(self.color, dtype=float)
        self.opacity = float(min(1.0, max(0.0, self.opacity)))
        if np.any(self.scale <= 0):
            raise ValueError("surfel scale components must be positive")


@dataclass
class SurfelArrays:
    """Structure-of-arrays surfel storage used by the rendering/mapping paths."""

    means: np.ndarray
    quats: np.ndarray  # (N, 4) wxyz
    scales: np.ndarray  # (N, 2)
    opacities: np.ndarray
    colors: np.ndarray
    confidences: np.ndarray
    keyframe_ids: np.ndarray
    submap_ids: np.ndarray

    def __len__(self):
        return self.means.shape[0]

    @classmethod
    def empty(cls):
        return cls(
            np.empty((0, 3)), np.empty((0, 4)), np.empty((0, 2)), np.empty(0),
            np.empty((0, 3)), np.empty(0), np.empty(0, dtype=np.int64),
            np.empty(0, dtype=np.int64),
        )

    @classmethod
    def from_surfels(cls, surfels) -> "SurfelArrays":
        if isinstance(surfels, SurfelArrays):
            return surfels
        surfels = list(surfels)
        if not surfels:
            return cls.empty()
        return cls(
            np.stack([s.mean for s in surfels]),
            np.stack([s.rotation.array() for s in surfels]),
            np.stack([s.scale for s in surfels]),
            np.array([s.opacity for s in surfels]),
            np.stack([s.color for s in surfels]),
            np.array([s.confidence for s in surfels]),
            np.array([s.keyframe_id for s in surfels], dtype=np.int64),
            np.array([s.submap_id for s in surfels], dtype=np.int64),
        )

    def to_surfels(self):
        return [
            Surfel(
                self.means[i],
                UnitQuaternion.from_array(self.quats[i]),
                self.scales[i],
                float(self.opacities[i]),
                self.colors[i],
                float(self.confidences[i]),
                int(self.keyframe_ids[i]),
                int(self.submap_ids[i]),
            )
            for i in range(len(self))
        ]

    def select(self, idx) -> "SurfelArrays":
        return SurfelArrays(
            self.means[idx], self.quats[idx], self.scales[idx], self.opacities[idx],
            self.colors[idx], self.confidences[idx], self.keyframe_ids[idx],
            self.submap_ids[idx],
        )

    @classmethod
    def concatenate(cls, parts):
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(*[np.concatenate([getattr(p, f) for p in parts]) for f in (
            "means", "quats", "scales", "opacities", "colors", "confidences",
            "keyframe_ids", "submap_ids")])

    def copy(self) -> "SurfelArrays":
        return SurfelArrays(*[getattr(self, f).copy() for f in (
            "means", "quats", "scales", "opacities", "colors", "confidences",
            "keyframe_ids", "submap_ids")])


@dataclass(frozen=True)
class RasterConfig:
    """Rendering policy knobs; defaults are recorded in run manifests.

    ``max_view_angle_deg`` and ``center_margin_frac`` frustum-cull surfels
    whose mean lies far outside the field of view: the affine projection of
    such surfels is meaningless and their blown-up footprints would otherwise
    blanket the image (a grazing-incidence artifact, not real coverage).
    ``center_margin_frac`` is the allowed projected-center overshoot past the
    image border, as a fraction of the image size.
    """

    weight_clamp: float = 0.999
    termination_transmittance: float = 1e-4
    footprint_sigma: float = 3.0
    near_plane: float = 1e-3
    max_condition: float = 1e8
    max_view_angle_deg: float = 80.0
    center_margin_frac: float = 0.5


DEFAULT_RASTER_CONFIG = RasterConfig()


@dataclass
class RenderBuffers:
    color: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) alpha-blended expected depth
    accumulation: np.ndarray  # (H, W) in [0, 1]
    degenerate_skipped: int = 0


@dataclass(frozen=True)
class SurfelFootprint:
    center: np.ndarray  # (2,) pixel coords
    covariance: np.ndarray  # (2, 2) SPD, px^2
    z: float


@dataclass(frozen=True)
class LossWeights:
    mse: float = 1.0
    depth: float = 0.05


def _as_camera_packed(pose) -> np.ndarray:
    if isinstance(pose, SE3Pose):
        pose = pose.as_sim3()
    return pose.packed()


def _project_batch(arrays: SurfelArrays, pose, intr: CameraIntrinsics, cfg: RasterConfig):
    """Project all surfels; returns screen params plus validity bookkeeping."""
    n = len(arrays)
    inv = pk_inverse(_as_camera_packed(pose))
    p_cam = inv[0] * quat_rotate(np.broadcast_to(inv[4:8], (n, 4)), arrays.means) + inv[1:4]
    z = p_cam[:, 2]
    tan_max = np.tan(np.radians(cfg.max_view_angle_deg))
    in_front = (z > cfg.near_plane) & (
        np.hypot(p_cam[:, 0], p_cam[:, 1]) <= tan_max * z
    )

    rot = quat_to_matrix(arrays.quats)  # (N, 3, 3)
    basis = rot[:, :, :2] * arrays.scales[:, None, :]  # tangent axes scaled
    m_cw = inv[0] * quat_to_matrix(inv[4:8])
    basis_cam = np.einsum("ij,njk->nik", m_cw, basis)
    cov_cam = basis_cam @ np.transpose(basis_cam, (0, 2, 1))

    z_safe = np.where(in_front, z, 1.0)
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = intr.fx / z_safe
    jac[:, 0, 2] = -intr.fx * p_cam[:, 0] / z_safe**2
    jac[:, 1, 1] = intr.fy / z_safe
    jac[:, 1, 2] = -intr.fy * p_cam[:, 1] / z_safe**2
    cov2 = jac @ cov_cam @ np.transpose(jac, (0, 2, 1))
    cov2 = 0.5 * (cov2 + np.transpose(cov2, (0, 2, 1)))

    centers = np.stack(
        [intr.fx * p_cam[:, 0] / z_safe + intr.cx, intr.fy * p_cam[:, 1] / z_safe + intr.cy],
        axis=1,
    )
    mx = cfg.center_margin_frac * intr.width
    my = cfg.center_margin_frac * intr.height
    in_front &= (
        (centers[:, 0] >= -mx) & (centers[:, 0] <= intr.width - 1 + mx)
        & (centers[:, 1] >= -my) & (centers[:, 1] <= intr.height - 1 + my)
    )

    a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    half_tr = 0.5 * (a + c)
    dev = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    lam_min = half_tr - dev
    lam_max = half_tr + dev
    well_conditioned = (lam_min > 0) & (lam_max <= cfg.max_condition * lam_min)
    degenerate = int(np.count_nonzero(in_front & ~well_conditioned))
    valid = in_front & well_conditioned

    det = np.where(valid, a * c - b * b, 1.0)
    inv_abc = np.stack([c / det, -b / det, a / det], axis=1)
    return centers, cov2, inv_abc, z, valid, degenerate, in_front


def project_surfel(surfel: Surfel, pose, intr: CameraIntrinsics,
                   config: RasterConfig = DEFAULT_RASTER_CONFIG):
    """Screen footprint of one surfel, or None when frustum-culled."""
    arrays = SurfelArrays.from_surfels([surfel])
    centers, cov2, _, z, _, _, in_front = _project_batch(arrays, pose, intr, config)
    if not in_front[0]:
        return None
    return SurfelFootprint(centers[0], cov2[0], float(z[0]))


def _footprint_boxes(centers, inv_abc, valid, intr, sigma):
    # marginal variances recovered from the inverse covariance
    det = inv_abc[:, 0] * inv_abc[:, 2] - inv_abc[:, 1] ** 2
    det = np.where(det > 0, det, 1.0)
    rx = sigma * np.sqrt(np.maximum(inv_abc[:, 2] / det, 0.0))
    ry = sigma * np.sqrt(np.maximum(inv_abc[:, 0] / det, 0.0))
    x0 = np.ceil(centers[:, 0] - rx).astype(np.int64)
    x1 = np.floor(centers[:, 0] + rx).astype(np.int64)
    y0 = np.ceil(centers[:, 1] - ry).astype(np.int64)
    y1 = np.floor(centers[:, 1] + ry).astype(np.int64)
    np.clip(x0, 0, intr.width - 1, out=x0)
    np.clip(x1, 0, intr.width - 1, out=x1)
    np.clip(y0, 0, intr.height - 1, out=y0)
    np.clip(y1, 0, intr.height - 1, out=y1)
    on_screen = (
        valid
        & (centers[:, 0] + rx >= 0) & (centers[:, 0] - rx <= intr.width - 1)
        & (centers[:, 1] + ry >= 0) & (centers[:, 1] - ry <= intr.height - 1)
    )
    return np.stack([x0, x1, y0, y1], axis=1), on_screen


class _RenderState:
    """Projected + depth-sorted scene plus the raw blending outputs."""

    def __init__(self, arrays, order, centers, inv_abc, zs, bbox, degenerate, buffers,
                 max_w, arg_w):
        self.arrays = arrays
        self.order = order  # sorted position -> original surfel index
        self.centers = centers
        self.inv_abc = inv_abc
        self.zs = zs
        self.bbox = bbox
        self.degenerate = degenerate
        self.buffers = buffers
        self.max_w = max_w
        self.arg_w = arg_w  # original surfel index of max-weight contributor, -1 if none


def _render_state(surfels, pose, intr, cfg) -> _RenderState:
    arrays = SurfelArrays.from_surfels(surfels)
    h, w = intr.height, intr.width
    color = np.zeros((h, w, 3))
    depth = np.zeros((h, w))
    trans = np.ones((h, w))
    max_w = np.zeros((h, w))
    arg_w = np.full((h, w), -1, dtype=np.int64)
    if len(arrays) == 0:
        buffers = RenderBuffers(color, depth, np.zeros((h, w)), 0)
        return _RenderState(arrays, np.empty(0, np.int64), np.empty((0, 2)),
                            np.empty((0, 3)), np.empty(0), np.empty((0, 4), np.int64),
                            0, buffers, max_w, arg_w)

    centers, _, inv_abc, zs, valid, degenerate, _ = _project_batch(arrays, pose, intr, cfg)
    bbox, on_screen = _footprint_boxes(centers, inv_abc, valid, intr, cfg.footprint_sigma)

    keep = np.flatnonzero(on_screen)
    # total order: ascending depth, ties by insertion index
    order = keep[np.lexsort((keep, zs[keep]))]
    _k.blend_forward(
        centers[order], inv_abc[order], zs[order], arrays.opacities[order],
        arrays.colors[order], bbox[order], cfg.weight_clamp,
        cfg.termination_transmittance, cfg.footprint_sigma**2,
        color, depth, trans, max_w, arg_w,
    )
    hit = arg_w >= 0
    arg_w[hit] = order[arg_w[hit]]
    buffers = RenderBuffers(color, depth, 1.0 - trans, degenerate)
    return _RenderState(arrays, order, centers, inv_abc, zs, bbox, degenerate,
                        buffers, max_w, arg_w)


def render(surfels, pose, intr: CameraIntrinsics,
           config: RasterConfig = DEFAULT_RASTER_CONFIG) -> RenderBuffers:
    """Alpha-blend surfels into color/depth/accumulation buffers."""
    return _render_state(surfels, pose, intr, config).buffers


def render_with_argmax(surfels, pose, intr, config=DEFAULT_RASTER_CONFIG):
    """Render plus the per-pixel index of the max-blending-weight surfel."""
    state = _render_state(surfels, pose, intr, config)
    return state.buffers, state.arg_w, state.max_w


def render_loss(buffers: RenderBuffers, target_rgb, target_depth,
                weights: LossWeights = LossWeights()) -> float:
    """``mse * MSE(rgb) + depth * MSE(depth over accumulation > 0.5 pixels)``."""
    target_rgb = np.asarray(target_rgb, dtype=float)
    target_depth = np.asarray(target_depth, dtype=float)
    if target_rgb.shape != buffers.color.shape or target_depth.shape != buffers.depth.shape:
        raise ValueError("target dimensions do not match render buffers")
    loss = weights.mse * float(np.mean((buffers.color - target_rgb) ** 2))
    mask = buffers.accumulation > 0.5
    if weights.depth != 0.0 and np.any(mask):
        loss += weights.depth * float(np.mean((buffers.depth[mask] - target_depth[mask]) ** 2))
    return loss


def grad_color_opacity(surfels, pose, intr, target_rgb, target_depth,
                       weights: LossWeights = LossWeights(),
                       config: RasterConfig = DEFAULT_RASTER_CONFIG):
    """Analytic d(render_loss)/d(color, opacity) with geometry and ordering fixed.

    The accumulation>0.5 depth mask is evaluated at the current state and held
    fixed, matching the loss definition.  Returns ``(grad_color (N,3),
    grad_opacity (N,), loss)`` aligned with the input surfel order; culled or
    degenerate surfels get zero gradients.
    """
    state = _render_state(surfels, pose, intr, config)
    buf = state.buffers
    target_rgb = np.asarray(target_rgb, dtype=float)
    target_depth = np.asarray(target_depth, dtype=float)
    h, w = intr.height, intr.width
    g_rgb = weights.mse * (2.0 / (h * w * 3)) * (buf.color - target_rgb)
    mask = buf.accumulation > 0.5
    n_mask = int(np.count_nonzero(mask))
    g_depth = np.zeros((h, w))
    if weights.depth != 0.0 and n_mask:
        g_depth[mask] = weights.depth * (2.0 / n_mask) * (buf.depth[mask] - target_depth[mask])

    n = len(state.arrays)
    grad_c_sorted = np.zeros((len(state.order), 3))
    grad_o_sorted = np.zeros(len(state.order))
    if len(state.order):
        order = state.order
        _k.blend_gradients(
            state.centers[order], state.inv_abc[order], state.zs[order],
            state.arrays.opacities[order], state.arrays.colors[order],
            state.bbox[order], config.weight_clamp, config.termination_transmittance,
            config.footprint_sigma**2, buf.color, buf.depth, g_rgb, g_depth,
            grad_c_sorted, grad_o_sorted,
        )
    grad_c = np.zeros((n, 3))
    grad_o = np.zeros(n)
    grad_c[state.order] = grad_c_sorted
    grad_o[state.order] = grad_o_sorted
    loss = render_loss(buf, target_rgb, target_depth, weights)
    return grad_c, grad_o, loss


def per_surfel_max_weight(surfels, pose, intr, mask=None,
                          config: RasterConfig = DEFAULT_RASTER_CONFIG):
    """Max per-pixel blending weight of each surfel, overall and over a pixel mask."""
    arrays = SurfelArrays.from_surfels(surfels)
    n = len(arrays)
    max_all = np.zeros(n)
    max_marked = np.zeros(n)
    if n == 0:
        return max_all, max_marked
    centers, _, inv_abc, zs, valid, _, _ = _project_batch(arrays, pose, intr, config)
    bbox, on_screen = _footprint_boxes(centers, inv_abc, valid, intr, config.footprint_sigma)
    keep = np.flatnonzero(on_screen)
    order = keep[np.lexsort((keep, zs[keep]))]
    if mask is None:
        mask_u8 = np.zeros((intr.height, intr.width), dtype=np.uint8)
    else:
        mask_u8 = np.ascontiguousarray(mask.astype(np.uint8))
    out_all = np.zeros(len(order))
    out_marked = np.zeros(len(order))
    _k.max_blend_weights(
        centers[order], inv_abc[order], arrays.opacities[order], bbox[order],
        config.weight_clamp, config.termination_transmittance, config.footprint_sigma**2,
        mask_u8, intr.height, intr.width, out_all, out_marked,
    )
    max_all[order] = out_all
    max_marked[order] = out_marked
    return max_all, max_marked
