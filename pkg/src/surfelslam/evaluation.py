"""Trajectory and rendering metrics: Sim(3)-aligned ATE, PSNR, SSIM, depth L1.

PSNR of a perfect render is reported through an "exact" sentinel rather than
an infinite dB value; CSV writers emit the string ``exact`` for it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from surfelslam.geometry import umeyama_sim3

#: timestamp association tolerance, seconds
ASSOCIATION_TOL = 0.010

#: sentinel returned by :func:`psnr` when the MSE is exactly zero
PSNR_EXACT = float("inf")


def associate(times_a, times_b, tol=ASSOCIATION_TOL):
    """Greedy nearest-timestamp association; returns index pairs within tol."""
    times_a = np.asarray(times_a, dtype=float)
    times_b = np.asarray(times_b, dtype=float)
    order = np.argsort(times_b)
    sorted_b = times_b[order]
    pairs = []
    used = set()
    for i, t in enumerate(times_a):
        j = int(np.searchsorted(sorted_b, t))
        best, best_dt = -1, tol
        for cand in (j - 1, j):
            if 0 <= cand < len(sorted_b):
                dt = abs(sorted_b[cand] - t)
                if dt <= best_dt and int(order[cand]) not in used:
                    best, best_dt = int(order[cand]), dt
        if best >= 0:
            pairs.append((i, best))
            used.add(best)
    return pairs


def ate_rmse_sim3(estimate, ground_truth) -> float:
    """RMSE of translation residuals after Sim(3) alignment to ground truth.

    Both trajectories are ``(timestamp, pose)`` sequences where the pose
    exposes a ``translation`` attribute (SE3Pose or Sim3Transform).
    """
    est_t = [t for t, _ in estimate]
    gt_t = [t for t, _ in ground_truth]
    pairs = associate(est_t, gt_t)
    if len(pairs) < 3:
        raise ValueError(f"only {len(pairs)} associated poses, need at least 3")
    est = np.stack([estimate[i][1].translation for i, _ in pairs])
    gt = np.stack([ground_truth[j][1].translation for _, j in pairs])
    align = umeyama_sim3(est, gt)
    resid = gt - align.act(est)
    return float(np.sqrt(np.mean(np.sum(resid**2, axis=1))))


def psnr(rendered, target) -> float:
    """10*log10(1/MSE) over all channels of [0,1] images; PSNR_EXACT on MSE=0."""
    rendered = np.asarray(rendered, dtype=float)
    target = np.asarray(target, dtype=float)
    if rendered.shape != target.shape:
        raise ValueError("image dimensions differ")
    mse = float(np.mean((rendered - target) ** 2))
    if mse == 0.0:
        return PSNR_EXACT
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (r / sigma) ** 2)
    return g / g.sum()


def _windowed_mean(img, kernel):
    """Separable valid-mode weighted local mean."""
    win = len(kernel)
    view = np.lib.stride_tricks.sliding_window_view(img, (win, win))
    return np.einsum("hwij,i,j->hw", view, kernel, kernel)


def ssim(rendered, target, window=11, sigma=1.5, c1=0.01**2, c2=0.03**2) -> float:
    """Mean local SSIM, 11x11 Gaussian window, per channel averaged."""
    rendered = np.asarray(rendered, dtype=float)
    target = np.asarray(target, dtype=float)
    if rendered.shape != target.shape:
        raise ValueError("image dimensions differ")
    if rendered.ndim == 2:
        rendered = rendered[..., None]
        target = target[..., None]
    h, w = rendered.shape[:2]
    if h < window or w < window:
        raise ValueError(f"images smaller than the {window}x{window} SSIM window")
    kernel = _gaussian_window(window, sigma)
    vals = []
    for ch in range(rendered.shape[2]):
        x = rendered[..., ch]
        y = target[..., ch]
        mu_x = _windowed_mean(x, kernel)
        mu_y = _windowed_mean(y, kernel)
        sig_x = _windowed_mean(x * x, kernel) - mu_x**2
        sig_y = _windowed_mean(y * y, kernel) - mu_y**2
        sig_xy = _windowed_mean(x * y, kernel) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * sig_xy + c2)
        den = (mu_x**2 + mu_y**2 + c1) * (sig_x + sig_y + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def depth_l1_scale_aligned(rendered_depth, gt_depth, accumulation=None) -> float:
    """Median-ratio scale alignment, then mean |scaled - gt| over valid pixels.

    Valid pixels have gt > 0 and (when an accumulation map is given)
    accumulation > 0.5.
    """
    rendered_depth = np.asarray(rendered_depth, dtype=float)
    gt_depth = np.asarray(gt_depth, dtype=float)
    if rendered_depth.shape != gt_depth.shape:
        raise ValueError("depth dimensions differ")
    mask = (gt_depth > 0) & (rendered_depth > 0)
    if accumulation is not None:
        mask &= np.asarray(accumulation) > 0.5
    if not np.any(mask):
        raise ValueError("empty validity mask for depth L1")
    scale = float(np.median(gt_depth[mask] / rendered_depth[mask]))
    return float(np.mean(np.abs(scale * rendered_depth[mask] - gt_depth[mask])))


@dataclass
class MetricReport:
    """Per-run metric bundle mirroring the paper's reporting axes."""

    scene: str = ""
    seed: int = 0
    ate_rmse: float = float("nan")
    psnr_per_view: list = field(default_factory=list)
    ssim_per_view: list = field(default_factory=list)
    depth_l1: float = float("nan")
    num_frames: int = 0
    num_surfels: int = 0
    fps: float | None = None  # wall-clock derived; excluded from report.csv

    @property
    def psnr_exact(self) -> bool:
        return bool(self.psnr_per_view) and all(v == PSNR_EXACT for v in self.psnr_per_view)

    @property
    def psnr_mean(self) -> float:
        finite = [v for v in self.psnr_per_view if v != PSNR_EXACT]
        if not finite:
            return PSNR_EXACT if self.psnr_per_view else float("nan")
        return float(np.mean(finite))

    @property
    def ssim_mean(self) -> float:
        return float(np.mean(self.ssim_per_view)) if self.ssim_per_view else float("nan")

    def csv_header(self) -> str:
        return "scene,seed,ate_rmse,psnr,ssim,lpips,depth_l1,num_surfels,fps"

    def csv_row(self) -> str:
        psnr_field = "exact" if self.psnr_exact else f"{self.psnr_mean:.6f}"
        ssim_field = "" if math.isnan(self.ssim_mean) else f"{self.ssim_mean:.6f}"
        depth_field = "" if math.isnan(self.depth_l1) else f"{self.depth_l1:.6g}"
        ate_field = "" if math.isnan(self.ate_rmse) else f"{self.ate_rmse:.9g}"
        # lpips intentionally null (neural metric, out of scope); fps omitted
        # from the csv so identical configs produce identical bytes
        return (
            f"{self.scene},{self.seed},{ate_field},{psnr_field},{ssim_field},,"
            f"{depth_field},{self.num_surfels},"
        )

    def write_csv(self, path):
        with open(path, "w") as f:
            f.write(self.csv_header() + "\n")
            f.write(self.csv_row() + "\n")
