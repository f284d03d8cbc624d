"""3D ellipsoidal Beta primitives, cameras, and perspective projection.

Primitives are stored struct-of-arrays in :class:`PrimitiveSet` with
unconstrained parameters (opacity through a sigmoid, scales through exp,
quaternions unnormalized); :class:`BetaPrimitive` is the activated
single-primitive view used for construction and tests.

Projection follows the affine EWA approximation: the world covariance
``Sigma = R S S^T R^T`` maps to screen space through the camera rotation and
the pinhole Jacobian ``J`` evaluated at the primitive center, plus a small
diagonal conditioning term that keeps sub-pixel footprints invertible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .appearance import SbAppearance, fibonacci_directions

NEAR_PLANE = 0.01
# pixels^2 added to the projected covariance diagonal (low-pass conditioning)
COV_CONDITIONING = 0.3
BOUNDS_GUARD = 1  # pixels


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def logit(p):
    p = np.clip(np.asarray(p, dtype=np.float64), 1e-12, 1.0 - 1e-12)
    out = np.log(p) - np.log1p(-p)
    return out if out.ndim else float(out)


class DegenerateQuaternionError(ValueError):
    pass


def quat_to_rotation(q):
    """Rotation matrices ``(..., 3, 3)`` from (w, x, y, z) quaternions.

    Quaternions are renormalized here; storage stays unconstrained.
    """
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise DegenerateQuaternionError("quaternion norm below 1e-12")
    w, x, y, z = np.moveaxis(q / norm, -1, 0)
    row0 = np.stack(
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1
    )
    row1 = np.stack(
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1
    )
    row2 = np.stack(
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1
    )
    return np.stack([row0, row1, row2], axis=-2)


def covariance(q, s):
    """World covariance ``R S S^T R^T`` for one quaternion and scale triple."""
    return covariance_many(np.asarray(q)[None], np.asarray(s)[None])[0]


def covariance_many(quats, scales):
    """Batched world covariances ``(N, 3, 3)`` from quats ``(N,4)``, scales ``(N,3)``."""
    rot = quat_to_rotation(quats)
    scales = np.asarray(scales, dtype=np.float64)
    rs = rot * scales[..., None, :]  # R @ diag(s)
    return rs @ np.swapaxes(rs, -1, -2)


@dataclass
class Camera:
    """Pinhole camera: rigid world-to-camera transform plus intrinsics.

    Camera space looks down +z; pixel (row i, col j) has continuous
    coordinates (x=j, y=i), so the principal point of a centered sensor is
    ((width-1)/2, (height-1)/2).
    """

    world_to_camera: np.ndarray  # (4, 4)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64)
        if self.world_to_camera.shape != (4, 4):
            raise ValueError("world_to_camera must be 4x4")
        r = self.rotation
        if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-6:
            raise ValueError("rotation block is not orthonormal")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be at least 1x1")

    @property
    def rotation(self):
        return self.world_to_camera[:3, :3]

    @property
    def translation(self):
        return self.world_to_camera[:3, 3]

    @property
    def center(self):
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @classmethod
    def from_lookat(cls, eye, target, up, fov_x, width, height):
        """Build a camera at ``eye`` looking at ``target`` with x-FOV ``fov_x``."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward = forward / np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right = right / np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])  # world -> camera rows
        w2c = np.eye(4)
        w2c[:3, :3] = rot
        w2c[:3, 3] = -rot @ eye
        fx = 0.5 * width / np.tan(0.5 * fov_x)
        return cls(w2c, fx, fx, (width - 1) / 2.0, (height - 1) / 2.0, width, height)


@dataclass
class PixelRect:
    """Inclusive integer pixel rectangle; empty when x0 > x1 or y0 > y1."""

    x0: int
    x1: int
    y0: int
    y1: int

    @property
    def is_empty(self):
        return self.x0 > self.x1 or self.y0 > self.y1


@dataclass
class ProjectedPrimitive:
    mean2d: np.ndarray  # (2,) pixels
    cov2d: np.ndarray  # (2, 2) conditioned, pixels^2
    cov2d_inv: np.ndarray  # cached inverse
    depth: float
    bounds: PixelRect


def screen_bounds(mean2d, cov2d, width, height):
    """Tight pixel box around the unit-Mahalanobis ellipse, plus a guard pixel."""
    ex = np.sqrt(cov2d[0, 0])
    ey = np.sqrt(cov2d[1, 1])
    x0 = max(int(np.floor(mean2d[0] - ex)) - BOUNDS_GUARD, 0)
    x1 = min(int(np.ceil(mean2d[0] + ex)) + BOUNDS_GUARD, width - 1)
    y0 = max(int(np.floor(mean2d[1] - ey)) - BOUNDS_GUARD, 0)
    y1 = min(int(np.ceil(mean2d[1] + ey)) + BOUNDS_GUARD, height - 1)
    return PixelRect(x0, x1, y0, y1)


def project(primitive, camera):
    """Project one primitive; returns ``None`` when culled.

    Culling happens behind the near plane or when the footprint misses the
    image entirely.
    """
    batch = project_arrays(
        primitive.position[None],
        primitive.rotation[None],
        primitive.scale[None],
        camera,
    )
    if batch.count == 0:
        return None
    cov = batch.cov2d[0]
    return ProjectedPrimitive(
        mean2d=batch.means2d[0],
        cov2d=cov,
        cov2d_inv=np.linalg.inv(cov),
        depth=float(batch.depths[0]),
        bounds=PixelRect(*(int(v) for v in batch.bounds[0])),
    )


def mahalanobis_sq(x, proj):
    """Squared ellipse-normalized distance ``(x - mu)^T Sigma^-1 (x - mu)``."""
    d = np.asarray(x, dtype=np.float64) - proj.mean2d
    return float(d @ proj.cov2d_inv @ d)


@dataclass
class ProjectedBatch:
    """Visible subset of a primitive set, projected to one camera."""

    indices: np.ndarray  # (V,) into the source set
    means2d: np.ndarray  # (V, 2)
    cov2d: np.ndarray  # (V, 2, 2) conditioned
    conics: np.ndarray  # (V, 3) packed inverse [a, b, c]: r^2 = a dx^2 + 2b dxdy + c dy^2
    depths: np.ndarray  # (V,)
    bounds: np.ndarray  # (V, 4) int32 [x0, x1, y0, y1] inclusive
    cam_points: np.ndarray  # (V, 3) camera-space centers

    @property
    def count(self):
        return self.indices.size


def project_arrays(positions, rotations, scales, camera):
    """Vectorized projection of ``(N, ...)`` primitive geometry arrays."""
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    cam_pts = positions @ camera.rotation.T + camera.translation
    vis = cam_pts[:, 2] > NEAR_PLANE
    idx = np.nonzero(vis)[0]
    if idx.size == 0:
        return _empty_batch()

    t = cam_pts[idx]
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    means = np.stack(
        [camera.fx * tx / tz + camera.cx, camera.fy * ty / tz + camera.cy], axis=-1
    )

    sigma = covariance_many(
        np.asarray(rotations, dtype=np.float64)[idx],
        np.asarray(scales, dtype=np.float64)[idx],
    )
    jac = _pinhole_jacobian(t, camera)
    a = jac @ camera.rotation  # (V, 2, 3)
    cov2d = a @ sigma @ np.swapaxes(a, -1, -2)
    cov2d[:, 0, 0] += COV_CONDITIONING
    cov2d[:, 1, 1] += COV_CONDITIONING

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    conics = np.stack(
        [cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=-1
    )

    ex = np.sqrt(cov2d[:, 0, 0])
    ey = np.sqrt(cov2d[:, 1, 1])
    x0 = np.maximum(np.floor(means[:, 0] - ex).astype(np.int32) - BOUNDS_GUARD, 0)
    x1 = np.minimum(
        np.ceil(means[:, 0] + ex).astype(np.int32) + BOUNDS_GUARD, camera.width - 1
    )
    y0 = np.maximum(np.floor(means[:, 1] - ey).astype(np.int32) - BOUNDS_GUARD, 0)
    y1 = np.minimum(
        np.ceil(means[:, 1] + ey).astype(np.int32) + BOUNDS_GUARD, camera.height - 1
    )
    on_screen = (x0 <= x1) & (y0 <= y1)

    keep = np.nonzero(on_screen)[0]
    if keep.size == 0:
        return _empty_batch()
    return ProjectedBatch(
        indices=idx[keep],
        means2d=np.ascontiguousarray(means[keep]),
        cov2d=np.ascontiguousarray(cov2d[keep]),
        conics=np.ascontiguousarray(conics[keep]),
        depths=np.ascontiguousarray(tz[keep]),
        bounds=np.ascontiguousarray(
            np.stack([x0, x1, y0, y1], axis=-1)[keep], dtype=np.int32
        ),
        cam_points=np.ascontiguousarray(t[keep]),
    )


def _empty_batch():
    return ProjectedBatch(
        indices=np.zeros(0, dtype=np.int64),
        means2d=np.zeros((0, 2)),
        cov2d=np.zeros((0, 2, 2)),
        conics=np.zeros((0, 3)),
        depths=np.zeros(0),
        bounds=np.zeros((0, 4), dtype=np.int32),
        cam_points=np.zeros((0, 3)),
    )


def _pinhole_jacobian(t, camera):
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    jac = np.zeros((t.shape[0], 2, 3))
    jac[:, 0, 0] = camera.fx / tz
    jac[:, 0, 2] = -camera.fx * tx / tz**2
    jac[:, 1, 1] = camera.fy / tz
    jac[:, 1, 2] = -camera.fy * ty / tz**2
    return jac


def project_backward(positions, rotations, scales, camera, batch, d_means2d, d_cov2d):
    """Backward of :func:`project_arrays` for the visible subset.

    ``d_cov2d`` is the (symmetric) gradient with respect to the conditioned
    2D covariance.  Returns gradients ``(d_positions, d_rotations,
    d_log_scales)`` aligned with ``batch.indices``; the log-scale chain
    ``d s^2 / d log s = 2 s^2`` is already applied.
    """
    idx = batch.indices
    quats = np.asarray(rotations, dtype=np.float64)[idx]
    s = np.asarray(scales, dtype=np.float64)[idx]
    t = batch.cam_points
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    fx, fy = camera.fx, camera.fy

    jac = _pinhole_jacobian(t, camera)
    a = jac @ camera.rotation
    rot3 = quat_to_rotation(quats)
    sigma = (rot3 * (s**2)[:, None, :]) @ np.swapaxes(rot3, -1, -2)

    g_m = 0.5 * (d_cov2d + np.swapaxes(d_cov2d, -1, -2))
    g_sigma = np.swapaxes(a, -1, -2) @ g_m @ a
    g_a = 2.0 * g_m @ a @ sigma
    g_jac = g_a @ camera.rotation.T

    # mean chain: d mean2d / d t equals the pinhole Jacobian rows
    g_t = np.einsum("vij,vi->vj", jac, d_means2d)
    # J itself depends on t
    g_t[:, 0] += g_jac[:, 0, 2] * (-fx / tz**2)
    g_t[:, 1] += g_jac[:, 1, 2] * (-fy / tz**2)
    g_t[:, 2] += (
        g_jac[:, 0, 0] * (-fx / tz**2)
        + g_jac[:, 0, 2] * (2.0 * fx * tx / tz**3)
        + g_jac[:, 1, 1] * (-fy / tz**2)
        + g_jac[:, 1, 2] * (2.0 * fy * ty / tz**3)
    )
    d_positions = g_t @ camera.rotation

    # Sigma = R diag(s^2) R^T
    g_rot = 2.0 * g_sigma @ (rot3 * (s**2)[:, None, :])
    g_d = np.einsum("vji,vjk,vki->vi", rot3, g_sigma, rot3)
    d_log_scales = g_d * 2.0 * s**2
    d_rotations = _rotation_grad_to_quat(quats, g_rot)
    return d_positions, d_rotations, d_log_scales


def _rotation_grad_to_quat(quats, g_rot):
    """Chain dL/dR into dL/dq through the normalization."""
    norm = np.linalg.norm(quats, axis=-1, keepdims=True)
    qh = quats / norm
    w, x, y, z = qh[:, 0], qh[:, 1], qh[:, 2], qh[:, 3]
    zero = np.zeros_like(w)

    def mat(rows):
        return 2.0 * np.stack(
            [np.stack(r, axis=-1) for r in rows], axis=-2
        )  # (V, 3, 3)

    d_w = mat([[zero, -z, y], [z, zero, -x], [-y, x, zero]])
    d_x = mat([[zero, y, z], [y, -2 * x, -w], [z, w, -2 * x]])
    d_y = mat([[-2 * y, x, w], [x, zero, z], [-w, z, -2 * y]])
    d_z = mat([[-2 * z, -w, x], [w, -2 * z, y], [x, y, zero]])
    d_rdq = np.stack([d_w, d_x, d_y, d_z], axis=1)  # (V, 4, 3, 3)
    g_qh = np.einsum("vkij,vij->vk", d_rdq, g_rot)
    g_q = (g_qh - np.einsum("vk,vk->v", g_qh, qh)[:, None] * qh) / norm
    return g_q


@dataclass
class BetaPrimitive:
    """One splatting element with activated (constrained) values."""

    position: np.ndarray  # (3,)
    opacity: float  # in (0, 1)
    rotation: np.ndarray  # (4,) quaternion, need not be unit
    scale: np.ndarray  # (3,) positive world units
    shape: float  # kernel shape parameter b
    appearance: SbAppearance

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(3)


@dataclass
class PrimitiveSet:
    """Struct-of-arrays container holding unconstrained parameters.

    Opacity is stored pre-sigmoid and scales pre-exp so every optimizer step
    keeps them in-range; quaternions are stored unnormalized and normalized
    inside covariance construction.
    """

    positions: np.ndarray  # (N, 3)
    opacity_raw: np.ndarray  # (N,)
    rotations: np.ndarray  # (N, 4)
    log_scales: np.ndarray  # (N, 3)
    shapes: np.ndarray  # (N,)
    base_colors: np.ndarray  # (N, 3)
    lobe_axes: np.ndarray  # (N, M, 3)
    lobe_colors: np.ndarray  # (N, M, 3)

    def __post_init__(self):
        n = self.positions.shape[0]
        for name in PARAM_NAMES:
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            setattr(self, name, arr)
            if arr.shape[0] != n:
                raise ValueError(f"{name} row count mismatch")

    def __len__(self):
        return self.positions.shape[0]

    @property
    def lobe_count(self):
        return self.lobe_axes.shape[1]

    @property
    def opacities(self):
        return sigmoid(self.opacity_raw)

    @property
    def scales(self):
        return np.exp(self.log_scales)

    def parameters(self):
        """Name -> array view of every optimizable group."""
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self):
        return PrimitiveSet(**{k: v.copy() for k, v in self.parameters().items()})

    def take(self, indices):
        return PrimitiveSet(**{k: v[indices].copy() for k, v in self.parameters().items()})

    def append(self, other):
        if other.lobe_count != self.lobe_count:
            raise ValueError("lobe count mismatch")
        return PrimitiveSet(
            **{
                k: np.concatenate([v, getattr(other, k)], axis=0)
                for k, v in self.parameters().items()
            }
        )

    def primitive(self, i):
        """Activated single-primitive view (copies)."""
        return BetaPrimitive(
            position=self.positions[i].copy(),
            opacity=float(sigmoid(self.opacity_raw[i])),
            rotation=self.rotations[i].copy(),
            scale=np.exp(self.log_scales[i]),
            shape=float(self.shapes[i]),
            appearance=SbAppearance(
                self.base_colors[i].copy(),
                self.lobe_axes[i].copy(),
                self.lobe_colors[i].copy(),
            ),
        )

    @classmethod
    def empty(cls, lobes):
        return cls(
            positions=np.zeros((0, 3)),
            opacity_raw=np.zeros(0),
            rotations=np.zeros((0, 4)),
            log_scales=np.zeros((0, 3)),
            shapes=np.zeros(0),
            base_colors=np.zeros((0, 3)),
            lobe_axes=np.zeros((0, lobes, 3)),
            lobe_colors=np.zeros((0, lobes, 3)),
        )

    @classmethod
    def from_primitives(cls, primitives):
        if not primitives:
            raise ValueError("need at least one primitive")
        m = primitives[0].appearance.lobe_count
        return cls(
            positions=np.stack([p.position for p in primitives]),
            opacity_raw=np.array([logit(p.opacity) for p in primitives]),
            rotations=np.stack([p.rotation for p in primitives]),
            log_scales=np.log(np.stack([p.scale for p in primitives])),
            shapes=np.array([p.shape for p in primitives], dtype=np.float64),
            base_colors=np.stack([p.appearance.base_color for p in primitives]),
            lobe_axes=np.stack(
                [p.appearance.lobe_axes.reshape(m, 3) for p in primitives]
            ),
            lobe_colors=np.stack(
                [p.appearance.lobe_colors.reshape(m, 3) for p in primitives]
            ),
        )


PARAM_NAMES = (
    "positions",
    "opacity_raw",
    "rotations",
    "log_scales",
    "shapes",
    "base_colors",
    "lobe_axes",
    "lobe_colors",
)


def default_lobe_axes(n, m):
    """Fresh unit lobe axes (zero sharpness) for ``n`` primitives."""
    return np.broadcast_to(fibonacci_directions(m), (n, m, 3)).copy()
