"""Serialization round-trips: TUM, PLY, PNG, prediction blobs, flat configs."""

import numpy as np
import pytest

from surfelslam import io as sio
from surfelslam.geometry import SE3Pose, Sim3Transform, UnitQuaternion
from surfelslam.oracle import (
    NoiseModel,
    SceneConfig,
    SubmapState,
    generate_scene,
    load_scene_dir,
    predict_frame,
    write_scene_dir,
)
from surfelslam.rasterizer import CameraIntrinsics, SurfelArrays, render


def random_pose(rng):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return SE3Pose(UnitQuaternion.from_axis_angle(axis, rng.uniform(0, 2)), rng.normal(size=3))


class TestTUM:
    def test_roundtrip_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        traj = [(i / 30.0, random_pose(rng)) for i in range(20)]
        path = tmp_path / "traj.txt"
        sio.write_tum(path, traj)
        back = sio.read_tum(path)
        for (ta, pa), (tb, pb) in zip(traj, back):
            assert ta == tb
            assert pb.scale == 1.0
            assert pa.translation.tobytes() == pb.translation.tobytes()
            assert np.array_equal(pa.rotation.array(), pb.rotation.array())

    def test_sim3_scale_column(self, tmp_path):
        rng = np.random.default_rng(1)
        traj = [
            (i / 30.0, Sim3Transform(1.0 + 0.1 * i, random_pose(rng).rotation, rng.normal(size=3)))
            for i in range(5)
        ]
        path = tmp_path / "traj_sim3.txt"
        sio.write_tum(path, traj, sim3=True)
        with open(path) as f:
            lines = [l for l in f if not l.startswith("#")]
        assert all(len(l.split()) == 9 for l in lines)
        back = sio.read_tum(path, sim3=True)
        for (_, pa), (_, pb) in zip(traj, back):
            assert pa.scale == pb.scale

    def test_malformed_line_raises(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("0.0 1 2 3\n")
        with pytest.raises(ValueError):
            sio.read_tum(path)


class TestPly:
    def surfels(self, rng, n=64):
        quats = rng.normal(size=(n, 4))
        quats /= np.linalg.norm(quats, axis=1, keepdims=True)
        return SurfelArrays(
            rng.normal(size=(n, 3)), quats, rng.uniform(0.01, 0.2, (n, 2)),
            rng.uniform(0, 1, n), rng.uniform(0, 1, (n, 3)), rng.uniform(0, 2, n),
            rng.integers(0, 5, n), rng.integers(0, 3, n),
        )

    def test_roundtrip_bitwise(self, tmp_path):
        rng = np.random.default_rng(2)
        surfels = self.surfels(rng)
        path = tmp_path / "map.ply"
        sio.write_surfel_ply(path, surfels)
        back = sio.read_surfel_ply(path)
        for f in ("means", "quats", "scales", "opacities", "colors", "confidences"):
            assert getattr(surfels, f).tobytes() == getattr(back, f).tobytes(), f
        assert np.array_equal(surfels.keyframe_ids, back.keyframe_ids)
        assert np.array_equal(surfels.submap_ids, back.submap_ids)

    def test_render_after_reload_bitwise(self, tmp_path):
        rng = np.random.default_rng(3)
        surfels = self.surfels(rng)
        surfels.means[:, 2] += 4.0
        intr = CameraIntrinsics(40.0, 40.0, 16.0, 12.0, 32, 24)
        path = tmp_path / "map.ply"
        sio.write_surfel_ply(path, surfels)
        back = sio.read_surfel_ply(path)
        a = render(surfels, SE3Pose.identity(), intr)
        b = render(back, SE3Pose.identity(), intr)
        assert a.color.tobytes() == b.color.tobytes()
        assert a.depth.tobytes() == b.depth.tobytes()

    def test_normals_present(self, tmp_path):
        rng = np.random.default_rng(4)
        surfels = self.surfels(rng, 8)
        path = tmp_path / "map.ply"
        sio.write_surfel_ply(path, surfels)
        header = path.read_bytes().split(b"end_header")[0].decode()
        for prop in ("nx", "ny", "nz", "sx", "sy", "opacity", "red", "green", "blue", "kf_id"):
            assert f" {prop}" in header

    def test_rejects_non_ply(self, tmp_path):
        path = tmp_path / "nope.ply"
        path.write_bytes(b"not a ply\n")
        with pytest.raises(ValueError):
            sio.read_surfel_ply(path)


class TestImages:
    def test_rgb_roundtrip_quantized(self, tmp_path):
        rng = np.random.default_rng(5)
        img = rng.uniform(size=(12, 16, 3))
        path = tmp_path / "img.png"
        sio.write_rgb_png(path, img)
        back = sio.read_rgb_png(path)
        assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-9

    def test_depth_scale_in_metadata(self, tmp_path):
        rng = np.random.default_rng(6)
        depth = rng.uniform(0.5, 8.0, size=(12, 16))
        path = tmp_path / "depth.png"
        sio.write_depth_png(path, depth, scale=5000.0)
        back = sio.read_depth_png(path)
        assert np.max(np.abs(back - depth)) <= 0.5 / 5000 + 1e-9


class TestPredictionBlob:
    def test_roundtrip(self, tmp_path):
        scene = generate_scene(SceneConfig(surfel_count=400, frame_count=6, seed=7))
        pred = predict_frame(scene, 2, SubmapState(0, 0, 1.3, NoiseModel(rng_seed=1)))
        path = tmp_path / "000002.bin"
        sio.write_prediction_bin(path, pred)
        back = sio.read_prediction_bin(path)
        assert back["frame_id"] == 2
        assert np.allclose(back["pose"].translation, pred.pose_in_submap.translation)
        assert np.allclose(back["points_cam"], pred.points_cam, atol=1e-6)
        assert np.array_equal(back["valid"], pred.valid)
        assert np.allclose(back["colors"], pred.colors, atol=1e-6)
        # layout check: u32 + 7*f64 + u32 + count*15*f32
        n = pred.points_cam.shape[0]
        assert path.stat().st_size == 4 + 56 + 4 + n * 15 * 4


class TestSceneDir:
    def test_write_and_reload(self, tmp_path):
        scene = generate_scene(SceneConfig(surfel_count=400, frame_count=4, seed=8))
        out = tmp_path / "scene"
        write_scene_dir(scene, out)
        assert (out / "scene.ply").exists()
        assert (out / "trajectory_gt.txt").exists()
        assert len(list((out / "rgb").glob("*.png"))) == 4
        assert len(list((out / "depth").glob("*.png"))) == 4
        back = load_scene_dir(out)
        assert back.surfels.means.tobytes() == scene.surfels.means.tobytes()
        assert back.extent == scene.extent
        for (ta, pa), (tb, pb) in zip(scene.trajectory, back.trajectory):
            assert ta == tb
            assert pa.translation.tobytes() == pb.translation.tobytes()

    def test_gt_trajectory_roundtrips_exactly(self, tmp_path):
        scene = generate_scene(SceneConfig(surfel_count=400, frame_count=4, seed=9))
        path = tmp_path / "gt.txt"
        sio.write_tum(path, scene.trajectory)
        back = sio.read_tum(path)
        for (_, pa), (_, pb) in zip(scene.trajectory, back):
            assert pa.translation.tobytes() == pb.translation.tobytes()
            q = pa.rotation.array()
            assert np.array_equal(q, pb.rotation.array())


class TestFlatConfig:
    def test_roundtrip(self, tmp_path):
        values = {"clip_length": 8, "noise.rng_seed": 3, "label": "hello"}
        path = tmp_path / "cfg.txt"
        sio.write_flat_config(path, values)
        back = sio.read_flat_config(path)
        assert back == {"clip_length": "8", "noise.rng_seed": "3", "label": "hello"}

    def test_comments_ignored(self, tmp_path):
        path = tmp_path / "cfg.txt"
        path.write_text("# header\nclip_length = 8  # inline\n\n")
        assert sio.read_flat_config(path) == {"clip_length": "8"}

    def test_malformed_raises(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("what even is this\n")
        with pytest.raises(ValueError):
            sio.read_flat_config(path)
