"""File formats: TUM trajectories, surfel PLY, PNG images, prediction blobs, configs.

All floating-point text uses ``repr`` precision so files round-trip doubles
exactly; PLY and prediction blobs are little-endian binary.
"""

from __future__ import annotations

import struct

import numpy as np
from PIL import Image, PngImagePlugin

from surfelslam.geometry import SE3Pose, Sim3Transform, UnitQuaternion, quat_to_matrix
from surfelslam.rasterizer import CameraIntrinsics, SurfelArrays

DEPTH_SCALE_DEFAULT = 5000.0


# ---------------------------------------------------------------------------
# trajectories (TUM text format)
# ---------------------------------------------------------------------------


def write_tum(path, trajectory, sim3=False):
    """Write ``(timestamp, pose)`` rows; ``sim3`` adds a leading scale column.

    Row layout: ``timestamp [scale] tx ty tz qx qy qz qw``.
    """
    with open(path, "w") as f:
        f.write("# timestamp%s tx ty tz qx qy qz qw\n" % (" scale" if sim3 else ""))
        for ts, pose in trajectory:
            if isinstance(pose, SE3Pose):
                pose = pose.as_sim3()
            q = pose.rotation.array()
            fields = [ts]
            if sim3:
                fields.append(pose.scale)
            fields += [*pose.translation, q[1], q[2], q[3], q[0]]
            f.write(" ".join(repr(float(v)) for v in fields) + "\n")


def read_tum(path, sim3=False):
    """Read a TUM trajectory; returns list of (timestamp, Sim3Transform)."""
    out = []
    expected = 9 if sim3 else 8
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(v) for v in line.split()]
            if len(vals) != expected:
                raise ValueError(f"expected {expected} fields, got {len(vals)}: {line!r}")
            ts = vals[0]
            scale = vals[1] if sim3 else 1.0
            tx, ty, tz, qx, qy, qz, qw = vals[-7:]
            out.append((ts, Sim3Transform(scale, UnitQuaternion(qw, qx, qy, qz),
                                          np.array([tx, ty, tz]))))
    return out


# ---------------------------------------------------------------------------
# intrinsics
# ---------------------------------------------------------------------------


def write_intrinsics(path, intr: CameraIntrinsics):
    with open(path, "w") as f:
        f.write("# fx fy cx cy width height\n")
        f.write(f"{intr.fx!r} {intr.fy!r} {intr.cx!r} {intr.cy!r} {intr.width} {intr.height}\n")


def read_intrinsics(path) -> CameraIntrinsics:
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fx, fy, cx, cy, w, h = line.split()
            return CameraIntrinsics(float(fx), float(fy), float(cx), float(cy), int(w), int(h))
    raise ValueError(f"no intrinsics line in {path}")


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------


def write_rgb_png(path, image):
    """Float [0,1] HxWx3 -> 8-bit RGB PNG."""
    arr = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def read_rgb_png(path):
    return np.asarray(Image.open(path).convert("RGB"), dtype=float) / 255.0


def write_depth_png(path, depth, scale=DEPTH_SCALE_DEFAULT):
    """Depth in scene units -> 16-bit PNG with the scale declared in metadata."""
    arr = np.clip(np.asarray(depth) * scale + 0.5, 0, 65535).astype(np.uint16)
    info = PngImagePlugin.PngInfo()
    info.add_text("depth_scale", repr(float(scale)))
    Image.fromarray(arr).save(path, pnginfo=info)


def read_depth_png(path):
    img = Image.open(path)
    scale = float(img.text.get("depth_scale", DEPTH_SCALE_DEFAULT))
    return np.asarray(img, dtype=float) / scale


# ---------------------------------------------------------------------------
# surfel PLY
# ---------------------------------------------------------------------------

_PLY_FIELDS = [
    ("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
    ("nx", "<f8"), ("ny", "<f8"), ("nz", "<f8"),
    ("qw", "<f8"), ("qx", "<f8"), ("qy", "<f8"), ("qz", "<f8"),
    ("sx", "<f8"), ("sy", "<f8"),
    ("opacity", "<f8"),
    ("red", "<f8"), ("green", "<f8"), ("blue", "<f8"),
    ("confidence", "<f8"),
    ("kf_id", "<i4"), ("submap_id", "<i4"),
]

_PLY_TYPES = {"<f8": "double", "<i4": "int"}


def write_surfel_ply(path, surfels: SurfelArrays):
    """Binary little-endian PLY; doubles throughout so round-trips are exact."""
    n = len(surfels)
    rec = np.empty(n, dtype=_PLY_FIELDS)
    rec["x"], rec["y"], rec["z"] = surfels.means.T
    normals = quat_to_matrix(surfels.quats)[:, :, 2] if n else np.empty((0, 3))
    rec["nx"], rec["ny"], rec["nz"] = normals.T
    rec["qw"], rec["qx"], rec["qy"], rec["qz"] = surfels.quats.T
    rec["sx"], rec["sy"] = surfels.scales.T
    rec["opacity"] = surfels.opacities
    rec["red"], rec["green"], rec["blue"] = surfels.colors.T
    rec["confidence"] = surfels.confidences
    rec["kf_id"] = surfels.keyframe_ids
    rec["submap_id"] = surfels.submap_ids

    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property {_PLY_TYPES[t]} {name}" for name, t in _PLY_FIELDS]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        rec.tofile(f)


def read_surfel_ply(path) -> SurfelArrays:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"ply":
            raise ValueError(f"{path} is not a PLY file")
        n = None
        props = []
        while True:
            line = f.readline()
            if not line:
                raise ValueError("unterminated PLY header")
            line = line.decode("ascii").strip()
            if line.startswith("element vertex"):
                n = int(line.split()[-1])
            elif line.startswith("property"):
                _, typ, name = line.split()
                props.append((name, {"double": "<f8", "float": "<f4", "int": "<i4"}[typ]))
            elif line == "end_header":
                break
        rec = np.fromfile(f, dtype=props, count=n)
    names = {name for name, _ in props}
    required = {"x", "y", "z", "qw", "qx", "qy", "qz", "sx", "sy", "opacity",
                "red", "green", "blue"}
    if not required <= names:
        raise ValueError(f"PLY missing surfel properties: {sorted(required - names)}")
    n = len(rec)
    return SurfelArrays(
        np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(float),
        np.stack([rec["qw"], rec["qx"], rec["qy"], rec["qz"]], axis=1).astype(float),
        np.stack([rec["sx"], rec["sy"]], axis=1).astype(float),
        rec["opacity"].astype(float),
        np.stack([rec["red"], rec["green"], rec["blue"]], axis=1).astype(float),
        rec["confidence"].astype(float) if "confidence" in names else np.ones(n),
        rec["kf_id"].astype(np.int64) if "kf_id" in names else np.full(n, -1, np.int64),
        rec["submap_id"].astype(np.int64) if "submap_id" in names else np.full(n, -1, np.int64),
    )


# ---------------------------------------------------------------------------
# per-frame prediction blobs
# ---------------------------------------------------------------------------
# layout: frame_id u32, pose 7 x f64 (tx ty tz qx qy qz qw), count u32, then
# per point 3 x f32 position + 12 x f32 attributes
# [qw qx qy qz sx sy opacity r g b confidence valid]


def write_prediction_bin(path, pred):
    q = pred.pose_in_submap.rotation.array()
    t = pred.pose_in_submap.translation
    n = pred.points_cam.shape[0]
    attrs = np.empty((n, 12), dtype="<f4")
    attrs[:, 0:4] = pred.rotations
    attrs[:, 4:6] = pred.scales
    attrs[:, 6] = pred.opacities
    attrs[:, 7:10] = pred.colors
    attrs[:, 10] = pred.confidences
    attrs[:, 11] = pred.valid.astype("<f4")
    with open(path, "wb") as f:
        f.write(struct.pack("<I", pred.frame_id))
        f.write(struct.pack("<7d", *t, q[1], q[2], q[3], q[0]))
        f.write(struct.pack("<I", n))
        blob = np.empty((n, 15), dtype="<f4")
        blob[:, :3] = pred.points_cam
        blob[:, 3:] = attrs
        blob.tofile(f)


def read_prediction_bin(path):
    """Returns a dict with the raw fields of one prediction blob."""
    with open(path, "rb") as f:
        frame_id = struct.unpack("<I", f.read(4))[0]
        pose7 = struct.unpack("<7d", f.read(56))
        n = struct.unpack("<I", f.read(4))[0]
        blob = np.fromfile(f, dtype="<f4", count=n * 15).reshape(n, 15)
    tx, ty, tz, qx, qy, qz, qw = pose7
    return {
        "frame_id": frame_id,
        "pose": SE3Pose(UnitQuaternion(qw, qx, qy, qz), np.array([tx, ty, tz])),
        "points_cam": blob[:, :3].astype(float),
        "rotations": blob[:, 3:7].astype(float),
        "scales": blob[:, 7:9].astype(float),
        "opacities": blob[:, 9].astype(float),
        "colors": blob[:, 10:13].astype(float),
        "confidences": blob[:, 13].astype(float),
        "valid": blob[:, 14] > 0.5,
    }


# ---------------------------------------------------------------------------
# flat key=value config / manifest files
# ---------------------------------------------------------------------------


def write_flat_config(path, values: dict):
    with open(path, "w") as f:
        for key in sorted(values):
            f.write(f"{key} = {values[key]}\n")


def read_flat_config(path) -> dict:
    out = {}
    with open(path) as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"malformed config line: {line!r}")
            key, val = line.split("=", 1)
            out[key.strip()] = val.strip()
    return out
