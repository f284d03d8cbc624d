"""Post-training codec: spatial sort, 8-bit quantization, PNG packing.

Primitives are reordered along a Morton (Z-order) curve so spatially close
primitives become neighbors in storage, which PNG's byte filters exploit.
Every attribute group is laid into a near-square grid and stored as one
8-bit PNG with per-channel min/max recorded at full precision in the
manifest.  Positions are the exception: they are cast to float32 and their
four bytes split across four separate RGB byte-plane PNGs, so decoding
reproduces them bit-exactly.

The archive is a directory: ``manifest.json`` plus the attribute PNGs.
docs/formats.md pins the exact layout.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .primitive import PrimitiveSet
from .sceneio import read_png, write_png

ARCHIVE_VERSION = 1
QUANT_BITS = 8
PNG_LEVEL = 9


class ArchiveError(ValueError):
    pass


def _spread_bits_21(v):
    """Interleave 21-bit integers with two zero bits (Morton component)."""
    v = v.astype(np.uint64) & np.uint64(0x1FFFFF)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def morton_keys(positions):
    """Z-order keys from positions quantized to 21 bits per axis in their box."""
    positions = np.asarray(positions, dtype=np.float64)
    lo = positions.min(axis=0)
    span = positions.max(axis=0) - lo
    span[span == 0.0] = 1.0
    max_code = float(2**21 - 1)
    codes = np.clip(
        np.round((positions - lo) / span * max_code), 0.0, max_code
    ).astype(np.uint64)
    return (
        _spread_bits_21(codes[:, 0])
        | (_spread_bits_21(codes[:, 1]) << np.uint64(1))
        | (_spread_bits_21(codes[:, 2]) << np.uint64(2))
    )


def sort_primitives(prims):
    """Stable Morton-order permutation over primitive positions."""
    if len(prims) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.argsort(morton_keys(prims.positions), kind="stable")


def quantize_attribute(values, bits=QUANT_BITS):
    """Uniform per-channel quantization: ``(codes, mins, maxs)``.

    ``values`` is (N,) or (N, C); constant channels encode with max == min
    and decode exactly.
    """
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("cannot quantize non-finite values")
    flat = values.reshape(values.shape[0], -1)
    mins = flat.min(axis=0)
    maxs = flat.max(axis=0)
    span = maxs - mins
    levels = float(2**bits - 1)
    with np.errstate(invalid="ignore"):
        codes = np.where(
            span > 0.0,
            np.round((flat - mins) / np.where(span > 0.0, span, 1.0) * levels),
            0.0,
        )
    dtype = np.uint8 if bits <= 8 else np.uint16
    return codes.astype(dtype).reshape(values.shape), mins, maxs


def dequantize_attribute(codes, mins, maxs, bits=QUANT_BITS):
    codes = np.asarray(codes, dtype=np.float64)
    flat = codes.reshape(codes.shape[0], -1)
    mins = np.asarray(mins, dtype=np.float64)
    maxs = np.asarray(maxs, dtype=np.float64)
    levels = float(2**bits - 1)
    # lerp form reproduces min/max exactly at the extreme codes, which keeps
    # re-encoding byte-stable
    t = flat / levels
    out = mins * (1.0 - t) + maxs * t
    return out.reshape(codes.shape)


def _grid_dims(count):
    cols = int(np.ceil(np.sqrt(max(count, 1))))
    rows = int(np.ceil(max(count, 1) / cols))
    return rows, cols


def _to_grid(flat, rows, cols):
    """Row-major fill; padding cells are zero."""
    channels = flat.shape[1] if flat.ndim == 2 else 1
    grid = np.zeros((rows * cols, channels), dtype=flat.dtype)
    grid[: flat.shape[0]] = flat.reshape(flat.shape[0], channels)
    grid = grid.reshape(rows, cols, channels)
    return grid[:, :, 0] if channels == 1 else grid

def _from_grid(grid, count):
    flat = grid.reshape(-1, 1) if grid.ndim == 2 else grid.reshape(-1, grid.shape[2])
    return flat[:count]


def _attribute_groups(prims):
    """(name, array (N, C<=4)) pairs in fixed archive order."""
    n, m = len(prims), prims.lobe_count
    groups = [
        ("opacity_raw", prims.opacity_raw.reshape(n, 1)),
        ("log_scales", prims.log_scales),
        ("rotations", prims.rotations),
        ("shapes", prims.shapes.reshape(n, 1)),
        ("base_colors", prims.base_colors),
    ]
    for lobe in range(m):
        groups.append((f"lobe{lobe}_axes", prims.lobe_axes[:, lobe, :]))
        groups.append((f"lobe{lobe}_colors", prims.lobe_colors[:, lobe, :]))
    return groups


def pack(prims, out_dir, sort=True):
    """Encode a primitive set into an archive directory; returns the manifest.

    Positions are archived at float32 precision (bit-exact round trip);
    every other attribute is quantized to 8 bits over its per-channel
    range.
    """
    os.makedirs(out_dir, exist_ok=True)
    if sort:
        perm = sort_primitives(prims)
        prims = prims.take(perm)
    n = len(prims)
    rows, cols = _grid_dims(n)

    manifest = {
        "version": ARCHIVE_VERSION,
        "count": n,
        "lobes": prims.lobe_count,
        "grid": [rows, cols],
        "order": "morton" if sort else "keep",
        "quant_bits": QUANT_BITS,
        "attributes": {},
        "position_planes": [],
    }

    pos32 = prims.positions.astype(np.float32)
    bytes_view = pos32.view(np.uint32)
    for b in range(4):
        plane = ((bytes_view >> np.uint32(8 * b)) & np.uint32(0xFF)).astype(np.uint8)
        name = f"positions_byte{b}.png"
        write_png(os.path.join(out_dir, name), _to_grid(plane, rows, cols), PNG_LEVEL)
        manifest["position_planes"].append(name)

    for name, values in _attribute_groups(prims):
        codes, mins, maxs = quantize_attribute(values)
        fn = f"{name}.png"
        write_png(os.path.join(out_dir, fn), _to_grid(codes, rows, cols), PNG_LEVEL)
        manifest["attributes"][name] = {
            "file": fn,
            "channels": int(values.shape[1]),
            "min": [float(v) for v in np.atleast_1d(mins)],
            "max": [float(v) for v in np.atleast_1d(maxs)],
        }

    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


def unpack(archive_dir):
    """Decode an archive directory back into a :class:`PrimitiveSet`."""
    manifest_path = os.path.join(archive_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        raise ArchiveError(f"no manifest at {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("version") != ARCHIVE_VERSION:
        raise ArchiveError(f"unsupported archive version {manifest.get('version')}")
    n = manifest["count"]
    m = manifest["lobes"]
    rows, cols = manifest["grid"]
    if rows * cols < n:
        raise ArchiveError("grid smaller than primitive count")

    planes = []
    for name in manifest["position_planes"]:
        grid = read_png(os.path.join(archive_dir, name))
        if grid.shape[:2] != (rows, cols) or grid.dtype != np.uint8:
            raise ArchiveError(f"{name}: unexpected plane shape or depth")
        planes.append(_from_grid(grid, n).astype(np.uint32))
    if len(planes) != 4:
        raise ArchiveError("expected four position byte planes")
    words = (
        planes[0]
        | (planes[1] << np.uint32(8))
        | (planes[2] << np.uint32(16))
        | (planes[3] << np.uint32(24))
    )
    positions = words.view(np.float32).astype(np.float64)

    def read_group(name, channels):
        spec = manifest["attributes"].get(name)
        if spec is None:
            raise ArchiveError(f"manifest missing attribute {name}")
        grid = read_png(os.path.join(archive_dir, spec["file"]))
        got = 1 if grid.ndim == 2 else grid.shape[2]
        if got != spec["channels"] or spec["channels"] != channels:
            raise ArchiveError(f"{name}: channel count mismatch")
        codes = _from_grid(grid, n)
        return dequantize_attribute(codes, spec["min"], spec["max"])

    prims = PrimitiveSet(
        positions=positions,
        opacity_raw=read_group("opacity_raw", 1).reshape(n),
        rotations=read_group("rotations", 4),
        log_scales=read_group("log_scales", 3),
        shapes=read_group("shapes", 1).reshape(n),
        base_colors=read_group("base_colors", 3),
        lobe_axes=np.stack(
            [read_group(f"lobe{k}_axes", 3) for k in range(m)], axis=1
        )
        if m
        else np.zeros((n, 0, 3)),
        lobe_colors=np.stack(
            [read_group(f"lobe{k}_colors", 3) for k in range(m)], axis=1
        )
        if m
        else np.zeros((n, 0, 3)),
    )
    return prims


def archive_size(archive_dir):
    total = 0
    for name in os.listdir(archive_dir):
        total += os.path.getsize(os.path.join(archive_dir, name))
    return total
