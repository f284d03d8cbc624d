"""Synthetic desk-scale datasets rendered from known ground-truth scenes.

Each preset builds a ground-truth primitive set, renders it from a camera
ring with the reference renderer, and writes a self-contained dataset
directory: ``transforms.json``, sRGB PNG views, and the ground-truth
checkpoint (``gt.ply``) for oracle comparisons.  Byte-identical for a fixed
seed.
"""

from __future__ import annotations

import os

import numpy as np

from . import sceneio
from .appearance import fibonacci_directions
from .primitive import Camera, PrimitiveSet, logit
from .rasterizer import render_reference

PRESETS = ("spheres", "box-room", "specular-ball")
DEFAULT_FOV = 0.873  # ~50 degrees


def _random_rotations(rng, n):
    q = rng.standard_normal((n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def _identity_rotations(n):
    q = np.zeros((n, 4))
    q[:, 0] = 1.0
    return q


def _lobes(n, m):
    return (
        np.broadcast_to(fibonacci_directions(m), (n, m, 3)).copy(),
        np.zeros((n, m, 3)),
    )


def _spheres_scene(rng, count, lobes):
    axes, lobe_colors = _lobes(count, lobes)
    return PrimitiveSet(
        positions=rng.uniform(-0.7, 0.7, (count, 3)),
        opacity_raw=logit(rng.uniform(0.65, 0.95, count)),
        rotations=_random_rotations(rng, count),
        log_scales=np.log(rng.uniform(0.09, 0.22, (count, 3))),
        shapes=rng.normal(0.0, 0.4, count),
        base_colors=rng.uniform(0.05, 0.95, (count, 3)),
        lobe_axes=axes,
        lobe_colors=lobe_colors,
    )


def _box_room_scene(rng, count, lobes):
    """Flat low-shape panels for walls/floor plus blobs inside."""
    n_panel = count // 2
    n_blob = count - n_panel
    per_wall = max(n_panel // 3, 1)

    positions, log_scales, rotations, shapes, colors = [], [], [], [], []
    walls = [
        # (fixed axis, level, thin axis)
        (1, -0.8, 1),  # floor: thin in y
        (2, 0.9, 2),  # back wall: thin in z
        (0, -0.9, 0),  # side wall: thin in x
    ]
    for axis, level, thin in walls:
        for _ in range(per_wall):
            p = rng.uniform(-0.85, 0.85, 3)
            p[axis] = level
            positions.append(p)
            s = np.full(3, rng.uniform(0.18, 0.3))
            s[thin] = 0.02
            log_scales.append(np.log(s))
            rotations.append([1.0, 0, 0, 0])
            shapes.append(rng.uniform(-1.5, -0.5))  # flat plateaus
            colors.append(rng.uniform(0.3, 0.8, 3))
    n_panel = len(positions)
    blob = _spheres_scene(rng, n_blob, lobes)
    blob.positions[:] = rng.uniform(-0.5, 0.5, (n_blob, 3))
    axes, lobe_colors = _lobes(n_panel, lobes)
    panels = PrimitiveSet(
        positions=np.asarray(positions),
        opacity_raw=logit(np.full(n_panel, 0.9)),
        rotations=np.asarray(rotations, dtype=np.float64),
        log_scales=np.asarray(log_scales),
        shapes=np.asarray(shapes),
        base_colors=np.asarray(colors),
        lobe_axes=axes,
        lobe_colors=lobe_colors,
    )
    return panels.append(blob)


def _specular_ball_scene(rng, count, lobes):
    """A shell of primitives, each with one strong mirror-ish lobe."""
    lobes = max(lobes, 1)
    dirs = fibonacci_directions(count)
    radius = 0.7
    axes, lobe_colors = _lobes(count, lobes)
    # first lobe: outward axis, sharp (|axis| = e^2), bright white color
    axes[:, 0, :] = dirs * np.exp(2.0)
    lobe_colors[:, 0, :] = rng.uniform(0.7, 1.0, (count, 1))
    return PrimitiveSet(
        positions=dirs * radius,
        opacity_raw=logit(np.full(count, 0.85)),
        rotations=_identity_rotations(count),
        log_scales=np.log(np.full((count, 3), 0.12)),
        shapes=np.zeros(count),
        base_colors=rng.uniform(0.05, 0.35, (count, 3)),
        lobe_axes=axes,
        lobe_colors=lobe_colors,
    )


def build_scene(preset, rng, count=200, lobes=2):
    if preset == "spheres":
        return _spheres_scene(rng, count, lobes)
    if preset == "box-room":
        return _box_room_scene(rng, count, lobes)
    if preset == "specular-ball":
        return _specular_ball_scene(rng, count, lobes)
    raise ValueError(f"unknown preset {preset!r} (have {', '.join(PRESETS)})")


def camera_ring(views, width, height, fov=DEFAULT_FOV, radius=3.0, elevation=0.35):
    cams = []
    for i in range(views):
        angle = 2.0 * np.pi * i / views
        eye = [
            radius * np.cos(elevation) * np.sin(angle),
            radius * np.sin(elevation),
            radius * np.cos(elevation) * np.cos(angle),
        ]
        cams.append(Camera.from_lookat(eye, [0, 0, 0], [0, 1, 0], fov, width, height))
    return cams


def make_toy(out_dir, preset="spheres", seed=0, views=16, size=128, count=200,
             lobes=2, background=(1.0, 1.0, 1.0)):
    """Generate a toy dataset; returns the ground-truth primitive set."""
    rng = np.random.default_rng(seed)
    scene = build_scene(preset, rng, count=count, lobes=lobes)
    cams = camera_ring(views, size, size)
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    names = []
    for i, cam in enumerate(cams):
        out = render_reference(scene, cam, np.asarray(background, dtype=np.float64))
        name = f"images/frame_{i:04d}.png"
        sceneio.write_display_png(os.path.join(out_dir, name), out.color)
        names.append(name)
    sceneio.write_transforms(os.path.join(out_dir, "transforms.json"), cams, names,
                             DEFAULT_FOV)
    sceneio.save_checkpoint(os.path.join(out_dir, "gt.ply"), scene)
    return scene
