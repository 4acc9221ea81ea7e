"""Brute-force volume rendering of the Gaussian density field.

Serves as a reference for the splatting approximation: every pixel casts a
ray, samples the summed density at midpoints of fixed steps, and composites
with ``T <- T * exp(-sigma * step)``.
"""
from __future__ import annotations

import numpy as np

from . import kernels as _active_kernels
from .camera import Camera
from .splat import TILE, RenderOutput, get_threads


def _sphere_tiles(pc, radius, cam: Camera):
    """Conservative per-tile candidate lists from camera-space bounding spheres."""
    ntx = (cam.width + TILE - 1) // TILE
    nty = (cam.height + TILE - 1) // TILE
    n = len(pc)
    zmin = pc[:, 2] - radius
    keep = pc[:, 2] + radius > cam.near
    straddle = zmin <= 1e-9
    safe_z = np.where(straddle, 1.0, zmin)
    zs = np.stack([safe_z, pc[:, 2] + radius], axis=1)
    rx = np.stack([pc[:, 0] - radius, pc[:, 0] + radius], axis=1)
    ry = np.stack([pc[:, 1] - radius, pc[:, 1] + radius], axis=1)
    qx = (rx[:, :, None] / zs[:, None, :]).reshape(n, 4)
    qy = (ry[:, :, None] / zs[:, None, :]).reshape(n, 4)
    u0 = np.where(straddle, -np.inf, cam.fx * qx.min(1) + cam.cx)
    u1 = np.where(straddle, np.inf, cam.fx * qx.max(1) + cam.cx)
    v0 = np.where(straddle, -np.inf, cam.fy * qy.min(1) + cam.cy)
    v1 = np.where(straddle, np.inf, cam.fy * qy.max(1) + cam.cy)
    tx0 = np.clip(np.floor(u0), 0, cam.width - 1) // TILE
    tx1 = np.clip(np.ceil(u1), 0, cam.width - 1) // TILE
    ty0 = np.clip(np.floor(v0), 0, cam.height - 1) // TILE
    ty1 = np.clip(np.ceil(v1), 0, cam.height - 1) // TILE
    keep &= (u1 >= 0) & (u0 <= cam.width - 1) & (v1 >= 0) & (v0 <= cam.height - 1)
    lists = [[] for _ in range(ntx * nty)]
    for g in np.flatnonzero(keep):
        for ty in range(int(ty0[g]), int(ty1[g]) + 1):
            for tx in range(int(tx0[g]), int(tx1[g]) + 1):
                lists[ty * ntx + tx].append(g)
    offs = np.zeros(ntx * nty + 1, dtype=np.int64)
    offs[1:] = np.cumsum([len(lst) for lst in lists])
    ids = np.array([g for lst in lists for g in lst], dtype=np.int32)
    return offs, ids


def render_raymarch_oracle(
    proxy, cam: Camera, background=(0.0, 0.0, 0.0), step: float = 0.01, cutoff: float = 6.0, threads=None, backend=None
) -> RenderOutput:
    """Ray-marched render of ``proxy``; Gaussians are truncated at ``cutoff`` standard deviations."""
    if step <= 0:
        raise ValueError("step must be positive")
    kern = _active_kernels(backend)
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    n = len(proxy.means)
    origin, dirs = cam.pixel_rays()
    if n == 0:
        color = np.broadcast_to(bg, (cam.height, cam.width, 3)).copy()
        return RenderOutput(color, np.zeros((cam.height, cam.width)), np.zeros((cam.height, cam.width), np.int32))
    lf = np.asarray(proxy.cov_factors, dtype=np.float64)
    inv = np.linalg.inv(lf)
    prec_m = np.swapaxes(inv, -1, -2) @ inv
    prec = np.stack(
        [prec_m[:, 0, 0], prec_m[:, 0, 1], prec_m[:, 0, 2], prec_m[:, 1, 1], prec_m[:, 1, 2], prec_m[:, 2, 2]], axis=1
    )
    radius = cutoff * np.linalg.norm(lf, ord=2, axis=(1, 2))
    means = np.ascontiguousarray(proxy.means, dtype=np.float64)
    pc = means @ cam.extrinsics.rotation.T + cam.extrinsics.translation
    offs, ids = _sphere_tiles(pc, radius, cam)
    image, final_t = kern.raymarch(
        np.ascontiguousarray(origin),
        np.ascontiguousarray(dirs),
        means,
        np.ascontiguousarray(prec),
        np.ascontiguousarray(proxy.opacities, dtype=np.float64),
        np.ascontiguousarray(radius[:, None]),
        np.ascontiguousarray(proxy.sh, dtype=np.float64),
        np.ascontiguousarray(proxy.sh_rotations, dtype=np.float64),
        int(proxy.sh_degree),
        offs,
        ids,
        bg,
        float(cam.near),
        float(cam.far),
        float(step),
        TILE,
        threads or get_threads(),
    )
    return RenderOutput(image, 1.0 - final_t, np.zeros((cam.height, cam.width), np.int32))
