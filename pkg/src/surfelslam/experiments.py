"""Reusable experiment drivers: drift-correction studies and clip-length sweeps.

These run the tracking side of the pipeline (mapping disabled) so that
multi-seed studies stay fast; they are what the acceptance suite and the
scripts in scripts/ call.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from surfelslam.oracle import NoiseModel
from surfelslam.pipeline import RunConfig, load_or_generate_scene, run_pipeline


@dataclass
class DriftStudyRow:
    seed: int
    ate_with_loops: float
    ate_without_loops: float
    num_loops: int
    wall_time: float

    @property
    def ratio(self):
        return self.ate_with_loops / self.ate_without_loops


def tracking_config(seed, frame_count=200, clip_length=8, noise=None,
                    surfel_count=1200, **overrides) -> RunConfig:
    return RunConfig(
        seed=seed,
        frame_count=frame_count,
        surfel_count=surfel_count,
        clip_length=clip_length,
        noise=noise if noise is not None else NoiseModel(rng_seed=seed),
        disable_mapping=True,
        pgo_schedule="final",
        **overrides,
    )


def drift_correction_study(seeds, frame_count=200, clip_length=8,
                           scale_drift=1.02) -> list:
    """Paired runs with/without loop closure on drifted scenes, per seed."""
    rows = []
    for seed in seeds:
        noise = NoiseModel(rng_seed=seed, per_submap_scale_drift=scale_drift)
        cfg = tracking_config(seed, frame_count, clip_length, noise)
        scene = load_or_generate_scene(cfg)
        with_lc = run_pipeline(scene, cfg)
        without = run_pipeline(
            scene, dataclasses.replace(cfg, disable_loop_closure=True)
        )
        rows.append(
            DriftStudyRow(
                seed,
                with_lc.report.ate_rmse,
                without.report.ate_rmse,
                with_lc.num_loop_closures,
                with_lc.wall_time,
            )
        )
    return rows


def clip_length_sweep(clip_lengths, seeds, frame_count=161) -> dict:
    """Median post-PGO ATE per clip length under the default noise model."""
    medians = {}
    per_seed = {}
    for clip in clip_lengths:
        ates = []
        for seed in seeds:
            cfg = tracking_config(seed, frame_count, clip)
            scene = load_or_generate_scene(cfg)
            result = run_pipeline(scene, cfg)
            ates.append(result.report.ate_rmse)
        medians[clip] = float(np.median(ates))
        per_seed[clip] = ates
    return {"medians": medians, "per_seed": per_seed}
