"""Rasterizer core selection: compiled Cython extension or numpy fallback.

The compiled core is chosen automatically when the extension was built;
``BETASPLAT_BACKEND=python`` or ``=compiled`` forces a choice.  Both cores
expose the same functions and compositing semantics.
"""

import os

from . import _raster_py

try:
    from . import _raster  # compiled extension

    HAVE_COMPILED = True
except ImportError:  # pragma: no cover - depends on build environment
    _raster = None
    HAVE_COMPILED = False


def available_backends():
    names = ["python"]
    if HAVE_COMPILED:
        names.insert(0, "compiled")
    return names


def get_core(name=None):
    """Resolve a core module by name (``None`` consults BETASPLAT_BACKEND)."""
    if name is None:
        name = os.environ.get("BETASPLAT_BACKEND", "auto")
    if name in ("auto", None):
        name = "compiled" if HAVE_COMPILED else "python"
    if name == "compiled":
        if not HAVE_COMPILED:
            raise RuntimeError(
                "compiled rasterizer core requested but the extension is not built"
            )
        return _raster
    if name == "python":
        return _raster_py
    raise ValueError(f"unknown backend {name!r} (expected compiled/python/auto)")


def active_backend():
    return "compiled" if get_core().COMPILED else "python"
