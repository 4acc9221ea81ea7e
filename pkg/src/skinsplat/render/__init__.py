"""Tile-based splatting renderer, its analytic gradient, and a ray-march reference.

The per-tile kernels come from a compiled extension when it is available.
Set ``SKINSPLAT_BACKEND=python`` to force the numpy fallback.
"""
from __future__ import annotations

import os

from . import _pykernels

BACKEND = "python"
_kernels = _pykernels
if os.environ.get("SKINSPLAT_BACKEND", "").lower() != "python":
    try:
        from . import _ckernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        _kernels = _compiled
        BACKEND = "compiled"


def kernels(backend: str | None = None):
    """Kernel module for ``backend`` ('compiled' or 'python'); default is the active one."""
    if backend is None:
        return _kernels
    if backend == "python":
        return _pykernels
    if backend == "compiled":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown backend {backend!r}")


from .camera import Camera, look_at  # noqa: E402
from .splat import (  # noqa: E402
    RenderGradients,
    RenderOutput,
    get_threads,
    project_gaussian,
    render_splat,
    render_splat_backward,
    set_threads,
)
from .raymarch import render_raymarch_oracle  # noqa: E402

__all__ = [
    "BACKEND",
    "Camera",
    "RenderGradients",
    "RenderOutput",
    "get_threads",
    "kernels",
    "look_at",
    "project_gaussian",
    "render_raymarch_oracle",
    "render_splat",
    "render_splat_backward",
    "set_threads",
]
