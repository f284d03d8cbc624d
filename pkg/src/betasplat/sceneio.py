"""Dataset ingestion, primitive initialization, and persistence.

Formats (documented field-by-field in docs/formats.md):

* camera documents: NeRF-style ``transforms.json`` with per-frame
  camera-to-world matrices (OpenGL axes) and a horizontal field of view;
* SfM points: COLMAP ``points3D.txt`` or binary little-endian PLY clouds;
* checkpoints: binary little-endian PLY with one double-precision property
  per stored scalar, lossless for the in-memory state;
* images: 8/16-bit PNG, sRGB for display images and raw bits for codec
  planes.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

import cv2

from .appearance import fibonacci_directions
from .primitive import Camera, PrimitiveSet, logit

CHECKPOINT_VERSION = 1
_GL_TO_CV = np.diag([1.0, -1.0, -1.0, 1.0])


class DatasetError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# color transfer and PNG

def srgb_encode(linear):
    """Linear RGB in [0, 1] to sRGB (IEC 61966-2-1)."""
    linear = np.clip(np.asarray(linear, dtype=np.float64), 0.0, 1.0)
    return np.where(
        linear <= 0.0031308,
        12.92 * linear,
        1.055 * np.power(linear, 1.0 / 2.4) - 0.055,
    )


def srgb_decode(encoded):
    encoded = np.clip(np.asarray(encoded, dtype=np.float64), 0.0, 1.0)
    return np.where(
        encoded <= 0.04045,
        encoded / 12.92,
        np.power((encoded + 0.055) / 1.055, 2.4),
    )


def write_png(path, array, compression=6):
    """Lossless PNG for uint8/uint16 grayscale, RGB, or RGBA arrays (raw bits)."""
    array = np.asarray(array)
    if array.dtype not in (np.uint8, np.uint16):
        raise ValueError("write_png stores uint8 or uint16 samples")
    if array.ndim == 3 and array.shape[2] == 3:
        array = array[:, :, ::-1]  # cv2 expects BGR
    elif array.ndim == 3 and array.shape[2] == 4:
        array = array[:, :, [2, 1, 0, 3]]
    elif array.ndim != 2:
        raise ValueError(f"unsupported image shape {array.shape}")
    ok = cv2.imwrite(str(path), array, [cv2.IMWRITE_PNG_COMPRESSION, compression])
    if not ok:
        raise IOError(f"failed to write PNG {path}")


def read_png(path):
    """Read a PNG back as the stored integer samples (RGB/RGBA channel order)."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
    if magic[:4] != b"\x89PNG":
        raise IOError(f"{path} is not a PNG file")
    arr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise IOError(f"failed to decode PNG {path}")
    if arr.ndim == 3 and arr.shape[2] == 3:
        arr = arr[:, :, ::-1]
    elif arr.ndim == 3 and arr.shape[2] == 4:
        arr = arr[:, :, [2, 1, 0, 3]]
    return np.ascontiguousarray(arr)


def write_display_png(path, image, bit_depth=8):
    """Encode a linear-RGB float image to an sRGB PNG."""
    encoded = srgb_encode(image)
    if bit_depth == 8:
        write_png(path, np.round(encoded * 255.0).astype(np.uint8))
    elif bit_depth == 16:
        write_png(path, np.round(encoded * 65535.0).astype(np.uint16))
    else:
        raise ValueError("bit_depth must be 8 or 16")


def load_image(path, background=(1.0, 1.0, 1.0)):
    """Load a display PNG as linear RGB, compositing alpha over ``background``."""
    raw = read_png(path)
    scale = 255.0 if raw.dtype == np.uint8 else 65535.0
    data = raw.astype(np.float64) / scale
    if data.ndim == 2:
        data = np.repeat(data[:, :, None], 3, axis=2)
    if data.shape[2] == 4:
        alpha = data[:, :, 3:4]
        rgb = srgb_decode(data[:, :, :3])
        bg = np.asarray(background, dtype=np.float64)
        return rgb * alpha + bg * (1.0 - alpha)
    return srgb_decode(data[:, :, :3])


# ---------------------------------------------------------------------------
# datasets

@dataclass
class Dataset:
    cameras: list
    images: list
    names: list
    split: list  # "train" / "test" per view
    points: np.ndarray | None = None  # (P, 3)
    point_colors: np.ndarray | None = None  # (P, 3) in [0, 1]

    def train_indices(self):
        return [i for i, s in enumerate(self.split) if s == "train"]

    def test_indices(self):
        return [i for i, s in enumerate(self.split) if s == "test"]


def _fov_to_focal(angle, extent, where):
    try:
        angle = float(angle)
    except (TypeError, ValueError):
        raise DatasetError(f"{where}: field of view is not a number") from None
    if not 0.0 < angle < np.pi:
        raise DatasetError(f"{where}: field of view {angle} outside (0, pi)")
    return 0.5 * extent / np.tan(0.5 * angle)


def camera_from_frame(c2w_gl, fov_x, width, height, fov_y=None, where="frame"):
    """Camera from a NeRF-style camera-to-world matrix (OpenGL axes)."""
    c2w = np.asarray(c2w_gl, dtype=np.float64)
    if c2w.shape != (4, 4):
        raise DatasetError(f"{where}: transform_matrix must be 4x4")
    c2w_cv = c2w @ _GL_TO_CV
    rot = c2w_cv[:3, :3].T
    w2c = np.eye(4)
    w2c[:3, :3] = rot
    w2c[:3, 3] = -rot @ c2w_cv[:3, 3]
    fx = _fov_to_focal(fov_x, width, where)
    fy = _fov_to_focal(fov_y, height, where) if fov_y is not None else fx
    try:
        return Camera(w2c, fx, fy, (width - 1) / 2.0, (height - 1) / 2.0, width, height)
    except ValueError as exc:
        raise DatasetError(f"{where}: {exc}") from None


def camera_to_frame(camera):
    """Inverse of :func:`camera_from_frame`: the OpenGL camera-to-world matrix."""
    c2w_cv = np.eye(4)
    c2w_cv[:3, :3] = camera.rotation.T
    c2w_cv[:3, 3] = camera.center
    return c2w_cv @ _GL_TO_CV


def load_transforms(path, background=(1.0, 1.0, 1.0), holdout=8):
    """Load a NeRF-style dataset directory (or transforms json path).

    Images are linearized from sRGB and alpha-composited over
    ``background``.  Every ``holdout``-th frame is tagged as a test view
    (0 disables the split).
    """
    path = str(path)
    if os.path.isdir(path):
        json_path = os.path.join(path, "transforms.json")
    else:
        json_path = path
    root = os.path.dirname(json_path)
    if not os.path.exists(json_path):
        raise DatasetError(f"no camera document at {json_path}")
    with open(json_path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{json_path}: invalid JSON ({exc})") from None

    frames = doc.get("frames")
    if not frames:
        raise DatasetError(f"{json_path}: no frames")
    cameras, images, names, split = [], [], [], []
    for i, frame in enumerate(frames):
        where = f"frame {i}"
        if "transform_matrix" not in frame:
            raise DatasetError(f"{where}: missing transform_matrix")
        file_path = frame.get("file_path")
        if not file_path:
            raise DatasetError(f"{where}: missing file_path")
        if not os.path.splitext(file_path)[1]:
            file_path += ".png"
        img_path = os.path.join(root, file_path)
        if not os.path.exists(img_path):
            raise DatasetError(f"{where}: missing image {img_path}")
        image = load_image(img_path, background)
        h, w = image.shape[:2]
        fov_x = frame.get("camera_angle_x", doc.get("camera_angle_x"))
        fov_y = frame.get("camera_angle_y", doc.get("camera_angle_y"))
        cameras.append(
            camera_from_frame(frame["transform_matrix"], fov_x, w, h, fov_y, where)
        )
        images.append(image)
        names.append(file_path)
        split.append("test" if holdout and i % holdout == 0 else "train")

    points = colors = None
    for candidate in ("points3D.txt", "points.ply", "points3d.ply"):
        p = os.path.join(root, candidate)
        if os.path.exists(p):
            points, colors = load_sfm_points(p)
            break
    return Dataset(cameras, images, names, split, points, colors)


def write_transforms(path, cameras, names, fov_x):
    doc = {
        "camera_angle_x": float(fov_x),
        "frames": [
            {"file_path": name, "transform_matrix": camera_to_frame(cam).tolist()}
            for cam, name in zip(cameras, names)
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


# ---------------------------------------------------------------------------
# SfM points

def load_sfm_points(path):
    """Load an SfM point cloud: COLMAP points3D text or a binary-PLY cloud.

    Returns ``(positions (P,3), colors (P,3) in [0,1])``.
    """
    with open(path, "rb") as fh:
        magic = fh.read(3)
    if magic == b"ply":
        return _load_ply_points(path)
    return _load_colmap_text(path)


def _load_colmap_text(path):
    positions, colors = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) < 7:
                raise DatasetError(
                    f"{path}:{lineno}: truncated point record ({len(parts)} fields)"
                )
            try:
                positions.append([float(v) for v in parts[1:4]])
                colors.append([int(v) for v in parts[4:7]])
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: malformed point record") from None
    if not positions:
        raise DatasetError(f"{path}: no points")
    return np.asarray(positions), np.asarray(colors, dtype=np.float64) / 255.0


_PLY_TYPES = {
    "char": "i1", "uchar": "u1", "int8": "i1", "uint8": "u1",
    "short": "i2", "ushort": "u2", "int16": "i2", "uint16": "u2",
    "int": "i4", "uint": "u4", "int32": "i4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_ply_header(fh):
    if fh.readline().strip() != b"ply":
        raise CheckpointError("not a PLY file")
    fmt = None
    comments = []
    elements = []  # (name, count, [(prop, dtype)])
    while True:
        line = fh.readline()
        if not line:
            raise CheckpointError("unterminated PLY header")
        tokens = line.decode("ascii", "replace").strip().split()
        if not tokens:
            continue
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "comment":
            comments.append(" ".join(tokens[1:]))
        elif tokens[0] == "element":
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if tokens[1] == "list":
                raise CheckpointError("list properties are not supported")
            if tokens[1] not in _PLY_TYPES:
                raise CheckpointError(f"unknown PLY type {tokens[1]}")
            elements[-1][2].append((tokens[2], "<" + _PLY_TYPES[tokens[1]]))
        elif tokens[0] == "end_header":
            break
    if fmt != "binary_little_endian":
        raise CheckpointError(f"unsupported PLY format {fmt!r} (need binary_little_endian)")
    return comments, elements


def _read_ply_vertices(path):
    with open(path, "rb") as fh:
        comments, elements = _parse_ply_header(fh)
        vertex = next((e for e in elements if e[0] == "vertex"), None)
        if vertex is None:
            raise CheckpointError(f"{path}: no vertex element")
        _, count, props = vertex
        dtype = np.dtype(props)
        data = np.frombuffer(fh.read(count * dtype.itemsize), dtype=dtype, count=count)
    return comments, data


def _load_ply_points(path):
    _, data = _read_ply_vertices(path)
    names = data.dtype.names
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise DatasetError(f"{path}: PLY cloud lacks property {axis}")
    pos = np.stack([data["x"], data["y"], data["z"]], axis=-1).astype(np.float64)
    if all(c in names for c in ("red", "green", "blue")):
        cols = np.stack([data["red"], data["green"], data["blue"]], axis=-1)
        cols = cols.astype(np.float64)
        if cols.max() > 1.0:
            cols /= 255.0
    else:
        cols = np.full_like(pos, 0.5)
    return pos, cols


# ---------------------------------------------------------------------------
# initialization

def mean_knn_distance(points, k=3):
    """Mean distance to each point's ``k`` nearest neighbors (exact)."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n <= k:
        raise ValueError(f"need more than {k} points")
    if n <= 10_000:
        d2 = np.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=-1)
        np.fill_diagonal(d2, np.inf)
        nearest = np.sort(d2, axis=1)[:, :k]
        return np.sqrt(nearest).mean(axis=1)
    from scipy.spatial import cKDTree

    dist, _ = cKDTree(points).query(points, k=k + 1)
    return dist[:, 1:].mean(axis=1)


def init_from_points(points, colors=None, lobes=2, init_opacity=0.1):
    """One primitive per SfM point: isotropic scale from 3-NN mean distance.

    Point colors (sRGB in [0, 1]) seed the linear base color; shapes start
    at zero (Gaussian-like) and lobes contribute nothing initially.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.shape[0] < 4:
        raise ValueError("need at least 4 points to initialize")
    n = points.shape[0]
    dist = np.maximum(mean_knn_distance(points), 1e-7)
    if colors is None:
        colors = np.full((n, 3), 0.5)
    base = srgb_decode(np.clip(colors, 0.0, 1.0))
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    return PrimitiveSet(
        positions=points.copy(),
        opacity_raw=np.full(n, logit(init_opacity)),
        rotations=rotations,
        log_scales=np.log(np.repeat(dist[:, None], 3, axis=1)),
        shapes=np.zeros(n),
        base_colors=base,
        lobe_axes=np.broadcast_to(fibonacci_directions(lobes), (n, lobes, 3)).copy(),
        lobe_colors=np.zeros((n, lobes, 3)),
    )


def init_random(n, box_min, box_max, lobes, rng, init_opacity=0.1):
    """Uniform random primitives in an axis-aligned box.

    Isotropic scale is the expected nearest-neighbor spacing of ``n``
    uniform points in the box (0.32 * diagonal / cbrt(n)), mirroring the
    3-NN rule used for SfM seeds; colors start mid-gray-ish, shapes at
    zero, lobes dark.
    """
    if n < 1:
        raise ValueError("need at least one primitive")
    box_min = np.asarray(box_min, dtype=np.float64)
    box_max = np.asarray(box_max, dtype=np.float64)
    positions = rng.uniform(box_min, box_max, (n, 3))
    diag = float(np.linalg.norm(box_max - box_min))
    scale = max(0.32 * diag / np.cbrt(n), 1e-7)
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    return PrimitiveSet(
        positions=positions,
        opacity_raw=np.full(n, logit(init_opacity)),
        rotations=rotations,
        log_scales=np.full((n, 3), np.log(scale)),
        shapes=np.zeros(n),
        base_colors=rng.uniform(0.2, 0.6, (n, 3)),
        lobe_axes=np.broadcast_to(fibonacci_directions(lobes), (n, lobes, 3)).copy(),
        lobe_colors=np.zeros((n, lobes, 3)),
    )


def camera_focus(cameras):
    """Least-squares intersection of the cameras' optical axes."""
    a = np.zeros((3, 3))
    b = np.zeros(3)
    for cam in cameras:
        d = cam.rotation.T @ np.array([0.0, 0.0, 1.0])
        p = np.eye(3) - np.outer(d, d)
        a += p
        b += p @ cam.center
    if np.linalg.cond(a) > 1e8:  # near-parallel rays
        return np.stack([c.center for c in cameras]).mean(axis=0)
    return np.linalg.solve(a, b)


def default_box(cameras):
    """Initialization box: centered on the rig's focus point, half-extent a
    quarter of the mean camera distance to it."""
    focus = camera_focus(cameras)
    centers = np.stack([c.center for c in cameras])
    half = 0.25 * float(np.mean(np.linalg.norm(centers - focus, axis=1)))
    half = max(half, 1e-3)
    return focus - half, focus + half


def initialize_scene(dataset, cfg, rng):
    mode = cfg.init_mode
    if mode == "auto":
        mode = "sfm" if dataset.points is not None else "random"
    if mode == "sfm":
        if dataset.points is None:
            raise DatasetError("sfm initialization requested but dataset has no points")
        return init_from_points(
            dataset.points, dataset.point_colors, cfg.sb_lobes, cfg.init_opacity
        )
    lo, hi = default_box(dataset.cameras)
    return init_random(cfg.init_count, lo, hi, cfg.sb_lobes, rng, cfg.init_opacity)


# ---------------------------------------------------------------------------
# checkpoints

def _checkpoint_properties(lobes):
    names = [
        "x", "y", "z", "opacity_raw",
        "log_scale_x", "log_scale_y", "log_scale_z",
        "rot_w", "rot_x", "rot_y", "rot_z",
        "shape", "base_r", "base_g", "base_b",
    ]
    for m in range(lobes):
        names += [f"lobe{m}_axis_x", f"lobe{m}_axis_y", f"lobe{m}_axis_z"]
        names += [f"lobe{m}_r", f"lobe{m}_g", f"lobe{m}_b"]
    return names


def save_checkpoint(path, prims):
    """Binary little-endian PLY, one double per scalar; bit-exact round trip."""
    n, m = len(prims), prims.lobe_count
    names = _checkpoint_properties(m)
    record = np.zeros(n, dtype=np.dtype([(name, "<f8") for name in names]))
    record["x"], record["y"], record["z"] = prims.positions.T
    record["opacity_raw"] = prims.opacity_raw
    for i, axis in enumerate("xyz"):
        record[f"log_scale_{axis}"] = prims.log_scales[:, i]
    for i, axis in enumerate("wxyz"):
        record[f"rot_{axis}"] = prims.rotations[:, i]
    record["shape"] = prims.shapes
    for i, ch in enumerate("rgb"):
        record[f"base_{ch}"] = prims.base_colors[:, i]
    for lobe in range(m):
        for i, axis in enumerate("xyz"):
            record[f"lobe{lobe}_axis_{axis}"] = prims.lobe_axes[:, lobe, i]
        for i, ch in enumerate("rgb"):
            record[f"lobe{lobe}_{ch}"] = prims.lobe_colors[:, lobe, i]

    header = [
        "ply",
        "format binary_little_endian 1.0",
        f"comment betasplat_checkpoint {CHECKPOINT_VERSION}",
        f"comment lobes {m}",
        f"element vertex {n}",
    ]
    header += [f"property double {name}" for name in names]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(record.tobytes())


def load_checkpoint(path):
    comments, data = _read_ply_vertices(path)
    version = lobes = None
    for c in comments:
        parts = c.split()
        if parts[:1] == ["betasplat_checkpoint"]:
            version = int(parts[1])
        elif parts[:1] == ["lobes"]:
            lobes = int(parts[1])
    if version is None:
        raise CheckpointError(f"{path}: not a betasplat checkpoint")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if lobes is None:
        raise CheckpointError(f"{path}: missing lobe count")
    expected = _checkpoint_properties(lobes)
    if list(data.dtype.names) != expected:
        raise CheckpointError(
            f"{path}: property list does not match {lobes} lobes"
        )
    n = data.shape[0]

    def col(name):
        return np.ascontiguousarray(data[name], dtype=np.float64)

    return PrimitiveSet(
        positions=np.stack([col("x"), col("y"), col("z")], axis=-1),
        opacity_raw=col("opacity_raw"),
        rotations=np.stack([col(f"rot_{a}") for a in "wxyz"], axis=-1),
        log_scales=np.stack([col(f"log_scale_{a}") for a in "xyz"], axis=-1),
        shapes=col("shape"),
        base_colors=np.stack([col(f"base_{c}") for c in "rgb"], axis=-1),
        lobe_axes=np.stack(
            [
                np.stack([col(f"lobe{m}_axis_{a}") for a in "xyz"], axis=-1)
                for m in range(lobes)
            ],
            axis=1,
        )
        if lobes
        else np.zeros((n, 0, 3)),
        lobe_colors=np.stack(
            [
                np.stack([col(f"lobe{m}_{c}") for c in "rgb"], axis=-1)
                for m in range(lobes)
            ],
            axis=1,
        )
        if lobes
        else np.zeros((n, 0, 3)),
    )
