"""View-dependent color models.

The primary encoding is Spherical Beta: a base (diffuse) color plus M
specular lobes, each a bounded Beta kernel over the angle between the view
direction and a learnable lobe axis.  Each lobe stores exactly 6 reals: the
axis 3-vector, whose direction is the lobe direction and whose log-magnitude
is the sharpness, and an RGB color.  Total storage is ``3 + 6M`` reals, vs
``3 (L+1)^2`` for the spherical-harmonics baseline also provided here.

A lobe's response to view direction V is ``dot(axis_hat, V)^(4|axis|)`` for
positive dot products and exactly 0 otherwise, so radiance falls to zero
continuously at the lobe's support boundary instead of being truncated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernel import BASE_EXPONENT

# axes shorter than this are treated as degenerate and evaluated as +z;
# the normalization gradient is undefined at zero
AXIS_EPS = 1e-8
_UNIT_Z = np.array([0.0, 0.0, 1.0])


def fibonacci_directions(m):
    """``m`` unit directions spread quasi-uniformly over the sphere."""
    if m == 0:
        return np.zeros((0, 3))
    i = np.arange(m) + 0.5
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    z = 1.0 - 2.0 * i / m
    rho = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    return np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=-1)


@dataclass
class SbAppearance:
    """Base color plus M Spherical Beta lobes (stored as 3 + 6M reals)."""

    base_color: np.ndarray  # (3,)
    lobe_axes: np.ndarray  # (M, 3) direction * exp(sharpness)
    lobe_colors: np.ndarray  # (M, 3)

    def __post_init__(self):
        self.base_color = np.asarray(self.base_color, dtype=np.float64).reshape(3)
        self.lobe_axes = np.asarray(self.lobe_axes, dtype=np.float64).reshape(-1, 3)
        self.lobe_colors = np.asarray(self.lobe_colors, dtype=np.float64).reshape(-1, 3)
        if self.lobe_colors.shape != self.lobe_axes.shape:
            raise ValueError("lobe_axes and lobe_colors must have matching shapes")
        assert self.param_count == 3 + 6 * self.lobe_count

    @property
    def lobe_count(self):
        return self.lobe_axes.shape[0]

    @property
    def param_count(self):
        return self.base_color.size + self.lobe_axes.size + self.lobe_colors.size

    @property
    def lobe_directions(self):
        axes = _effective_axes(self.lobe_axes)
        return axes / np.linalg.norm(axes, axis=-1, keepdims=True)

    @property
    def lobe_sharpness(self):
        """Per-lobe shape parameter; the kernel exponent is 4*exp(sharpness)."""
        return np.log(np.linalg.norm(_effective_axes(self.lobe_axes), axis=-1))

    @classmethod
    def lambertian(cls, base_color, m):
        """Pure diffuse start: unit axes on a Fibonacci sphere, zero lobe color."""
        return cls(base_color, fibonacci_directions(m), np.zeros((m, 3)))


def _effective_axes(axes):
    norms = np.linalg.norm(axes, axis=-1, keepdims=True)
    return np.where(norms < AXIS_EPS, _UNIT_Z, axes)


def _check_unit(view_dir):
    view_dir = np.asarray(view_dir, dtype=np.float64).reshape(3)
    if abs(np.linalg.norm(view_dir) - 1.0) > 1e-6:
        raise ValueError("view direction must be a unit vector")
    return view_dir


def sb_eval(appearance, view_dir):
    """Evaluate the Spherical Beta color for one unit view direction.

    Negative channel values are allowed; clamping happens only on final
    composited pixels.
    """
    view_dir = _check_unit(view_dir)
    rgb, _ = sb_eval_many(
        appearance.base_color[None],
        appearance.lobe_axes[None],
        appearance.lobe_colors[None],
        view_dir[None],
    )
    return rgb[0]


def sb_eval_many(base_colors, lobe_axes, lobe_colors, view_dirs):
    """Vectorized Spherical Beta evaluation.

    Shapes: base ``(N,3)``, axes/colors ``(N,M,3)``, view dirs ``(N,3)``.
    Returns ``(rgb (N,3), lobe responses (N,M))``; the responses are reused
    by the backward pass.
    """
    axes = _effective_axes(lobe_axes)
    norms = np.linalg.norm(axes, axis=-1)  # (N, M)
    units = axes / norms[..., None]
    dot = np.einsum("nmk,nk->nm", units, view_dirs)
    w = np.clip(dot, 0.0, 1.0)
    exponent = BASE_EXPONENT * norms
    with np.errstate(divide="ignore", invalid="ignore"):
        resp = np.where(w > 0.0, w**exponent, 0.0)
    rgb = base_colors + np.einsum("nm,nmk->nk", resp, lobe_colors)
    return rgb, resp


def sb_grad_many(base_colors, lobe_axes, lobe_colors, view_dirs, upstream):
    """Backward pass of :func:`sb_eval_many` for upstream dL/dRGB ``(N,3)``.

    Returns gradients for the stored parameters (base color, lobe axes, lobe
    colors) plus the view-direction gradient for callers that chain it into
    positions.  Lobes outside their support (dot <= 0) get exactly zero
    gradients.
    """
    axes = _effective_axes(lobe_axes)
    norms = np.linalg.norm(axes, axis=-1)
    units = axes / norms[..., None]
    dot = np.einsum("nmk,nk->nm", units, view_dirs)
    w = np.clip(dot, 0.0, 1.0)
    exponent = BASE_EXPONENT * norms
    active = w > 1e-12
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        resp = np.where(active, w**exponent, 0.0)
        resp_dw = np.where(active, exponent * w ** (exponent - 1.0), 0.0)
        log_w = np.where(active, np.log(np.maximum(w, 1e-300)), 0.0)

    d_resp = np.einsum("nk,nmk->nm", upstream, lobe_colors)
    d_lobe_colors = resp[..., None] * upstream[:, None, :]

    # resp = w^(4n): d/daxis flows through both the exponent (via the axis
    # norm) and w (via the normalized direction)
    d_w = d_resp * resp_dw
    d_exponent = d_resp * resp * log_w
    d_norm = d_exponent * BASE_EXPONENT
    d_units = d_w[..., None] * view_dirs[:, None, :]
    d_axes = (
        d_units - np.einsum("nmk,nmk->nm", d_units, units)[..., None] * units
    ) / norms[..., None]
    d_axes += d_norm[..., None] * units
    d_axes = np.where(active[..., None], d_axes, 0.0)

    d_view = np.einsum("nm,nmk->nk", d_w, units)
    return upstream.copy(), d_axes, d_lobe_colors, d_view


def sb_grad(appearance, view_dir, upstream):
    """Single-primitive wrapper over :func:`sb_grad_many`."""
    view_dir = _check_unit(view_dir)
    upstream = np.asarray(upstream, dtype=np.float64).reshape(3)
    d_base, d_axes, d_colors, d_view = sb_grad_many(
        appearance.base_color[None],
        appearance.lobe_axes[None],
        appearance.lobe_colors[None],
        view_dir[None],
        upstream[None],
    )
    return d_base[0], d_axes[0], d_colors[0], d_view[0]


def decompose(appearance, mode, view_dir):
    """Diffuse/specular split of :func:`sb_eval`; the two modes sum exactly."""
    if mode == "diffuse":
        return appearance.base_color.copy()
    if mode == "specular":
        return sb_eval(appearance, view_dir) - appearance.base_color
    raise ValueError(f"unknown decomposition mode {mode!r}")


# ---------------------------------------------------------------------------
# Spherical-harmonics baseline (real basis, hard-coded constants, degree <= 3)

_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


@dataclass
class ShAppearance:
    """RGB spherical-harmonics coefficients up to degree ``degree <= 3``."""

    coefficients: np.ndarray  # ((degree+1)^2, 3)
    degree: int

    def __post_init__(self):
        if not 0 <= self.degree <= 3:
            raise ValueError("degree must be in [0, 3]")
        self.coefficients = np.asarray(self.coefficients, dtype=np.float64)
        expected = (self.degree + 1) ** 2
        if self.coefficients.shape != (expected, 3):
            raise ValueError(
                f"expected {(expected, 3)} coefficients, got {self.coefficients.shape}"
            )
        assert self.param_count == 3 * (self.degree + 1) ** 2

    @property
    def param_count(self):
        return self.coefficients.size


def sh_basis(degree, dirs):
    """Real SH basis values for unit directions ``(..., 3)``."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    basis = [np.full_like(x, _C0)]
    if degree >= 1:
        basis += [-_C1 * y, _C1 * z, -_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        basis += [
            _C2[0] * x * y,
            _C2[1] * y * z,
            _C2[2] * (2.0 * zz - xx - yy),
            _C2[3] * x * z,
            _C2[4] * (xx - yy),
        ]
    if degree >= 3:
        basis += [
            _C3[0] * y * (3.0 * xx - yy),
            _C3[1] * x * y * z,
            _C3[2] * y * (4.0 * zz - xx - yy),
            _C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
            _C3[4] * x * (4.0 * zz - xx - yy),
            _C3[5] * z * (xx - yy),
            _C3[6] * x * (xx - 3.0 * yy),
        ]
    return np.stack(basis, axis=-1)


def _sh_basis_grad(degree, dirs):
    """d(basis)/d(direction), shape ``(..., n_basis, 3)``."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    zero = np.zeros_like(x)

    def vec(a, b, c):
        return np.stack([a, b, c], axis=-1)

    grads = [vec(zero, zero, zero)]
    if degree >= 1:
        one = np.ones_like(x)
        grads += [
            vec(zero, -_C1 * one, zero),
            vec(zero, zero, _C1 * one),
            vec(-_C1 * one, zero, zero),
        ]
    if degree >= 2:
        grads += [
            _C2[0] * vec(y, x, zero),
            _C2[1] * vec(zero, z, y),
            _C2[2] * vec(-2.0 * x, -2.0 * y, 4.0 * z),
            _C2[3] * vec(z, zero, x),
            _C2[4] * vec(2.0 * x, -2.0 * y, zero),
        ]
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        grads += [
            _C3[0] * vec(6.0 * x * y, 3.0 * xx - 3.0 * yy, zero),
            _C3[1] * vec(y * z, x * z, x * y),
            _C3[2] * vec(-2.0 * x * y, 4.0 * zz - xx - 3.0 * yy, 8.0 * y * z),
            _C3[3] * vec(-6.0 * x * z, -6.0 * y * z, 6.0 * zz - 3.0 * xx - 3.0 * yy),
            _C3[4] * vec(4.0 * zz - 3.0 * xx - yy, -2.0 * x * y, 8.0 * x * z),
            _C3[5] * vec(2.0 * x * z, -2.0 * y * z, xx - yy),
            _C3[6] * vec(3.0 * xx - 3.0 * yy, -6.0 * x * y, zero),
        ]
    return np.stack(grads, axis=-2)


def sh_eval(appearance, view_dir):
    """Evaluate the SH color for one unit view direction."""
    view_dir = _check_unit(view_dir)
    basis = sh_basis(appearance.degree, view_dir)
    return basis @ appearance.coefficients


def sh_grad(appearance, view_dir, upstream):
    """Gradients of :func:`sh_eval`: ``(d coefficients, d view direction)``."""
    view_dir = _check_unit(view_dir)
    upstream = np.asarray(upstream, dtype=np.float64).reshape(3)
    basis = sh_basis(appearance.degree, view_dir)
    d_coeff = basis[:, None] * upstream[None, :]
    d_basis = appearance.coefficients @ upstream  # (n_basis,)
    d_dir = _sh_basis_grad(appearance.degree, view_dir).T @ d_basis
    return d_coeff, d_dir
