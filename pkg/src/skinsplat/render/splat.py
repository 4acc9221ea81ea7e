"""Projection, tile binning, compositing and the analytic reverse pass.

Geometry is always preprocessed in float64; only the per-pixel compositing
runs in the requested precision (float32 by default).
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ..geom import sh_eval, sh_eval_grad
from . import kernels as _active_kernels
from .camera import Camera

TILE = 16
COV2D_FLOOR = 0.3
ALPHA_MIN = 1.0 / 255.0

_threads = 1


def set_threads(n: int) -> None:
    """Cap the number of worker threads used by the compiled kernels."""
    global _threads
    if n < 1:
        raise ValueError("thread count must be >= 1")
    _threads = int(n)


def get_threads() -> int:
    return _threads


@dataclass
class RenderOutput:
    color: np.ndarray
    alpha: np.ndarray
    counts: np.ndarray
    timings: dict = field(default_factory=dict)
    state: "_FrameState | None" = field(default=None, repr=False)


@dataclass
class RenderGradients:
    means: np.ndarray
    cov_factors: np.ndarray
    opacities: np.ndarray
    sh: np.ndarray
    sh_rotations: np.ndarray
    camera: np.ndarray | None = None
    # |d loss / d mean2d| in normalized device units, for densification
    grad2d: np.ndarray | None = None
    visible: np.ndarray | None = None


@dataclass
class _FrameState:
    idx: np.ndarray  # visible component indices into the proxy
    pc: np.ndarray  # camera-space means
    mean2d: np.ndarray
    jac: np.ndarray  # (M, 2, 3)
    cov_cam: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray  # (M, 3): A, B, C
    view_dir: np.ndarray  # unit (mu - eye)
    view_len: np.ndarray
    local_dir: np.ndarray
    basis: np.ndarray
    raw_color: np.ndarray
    color: np.ndarray
    offs: np.ndarray
    ids: np.ndarray
    final_t: np.ndarray
    last: np.ndarray
    dtype: type
    background: np.ndarray


def _project(means, cov, cam: Camera):
    rot, t = cam.extrinsics.rotation, cam.extrinsics.translation
    pc = means @ rot.T + t
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    fx, fy = cam.fx, cam.fy
    mean2d = np.stack([fx * x / z + cam.cx, fy * y / z + cam.cy], axis=1)
    jac = np.zeros((len(z), 2, 3))
    jac[:, 0, 0] = fx / z
    jac[:, 0, 2] = -fx * x / (z * z)
    jac[:, 1, 1] = fy / z
    jac[:, 1, 2] = -fy * y / (z * z)
    cov_cam = rot @ cov @ rot.T
    cov2d = jac @ cov_cam @ np.swapaxes(jac, -1, -2) + COV2D_FLOOR * np.eye(2)
    return pc, mean2d, jac, cov_cam, cov2d


def project_gaussian(mu, cov, cam: Camera):
    """Screen-space mean, 2D covariance (with the anti-aliasing floor) and depth.

    Returns ``None`` when the point is not strictly between the near and far planes.
    """
    mu = np.asarray(mu, dtype=np.float64).reshape(1, 3)
    cov = np.asarray(cov, dtype=np.float64).reshape(1, 3, 3)
    pc, mean2d, _, _, cov2d = _project(mu, cov, cam)
    if not cam.near < pc[0, 2] < cam.far:
        return None
    return mean2d[0], cov2d[0], float(pc[0, 2])


def _bin_tiles(mean2d, cov2d, opac, depth, width, height):
    """Per-tile lists of component slots, each list sorted front to back."""
    n = len(depth)
    ntx = (width + TILE - 1) // TILE
    nty = (height + TILE - 1) // TILE
    order = np.lexsort((np.arange(n), depth))
    # alpha can only reach 1/255 inside the ellipse of Mahalanobis radius m
    m = np.sqrt(2.0 * np.log(np.maximum(255.0 * opac, 1.0)))
    rx = m * np.sqrt(cov2d[:, 0, 0]) + 1.0
    ry = m * np.sqrt(cov2d[:, 1, 1]) + 1.0
    x0 = np.clip(np.ceil(mean2d[:, 0] - rx), 0, width).astype(np.int64) // TILE
    x1 = np.clip(np.floor(mean2d[:, 0] + rx), -1, width - 1).astype(np.int64)
    y0 = np.clip(np.ceil(mean2d[:, 1] - ry), 0, height).astype(np.int64) // TILE
    y1 = np.clip(np.floor(mean2d[:, 1] + ry), -1, height - 1).astype(np.int64)
    x1 = np.where(x1 < 0, -1, x1 // TILE)
    y1 = np.where(y1 < 0, -1, y1 // TILE)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    cnt = (nx * ny)[order]
    total = int(cnt.sum())
    slot = np.repeat(order, cnt)
    within = np.arange(total) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    tx = x0[slot] + within % nx[slot]
    ty = y0[slot] + within // nx[slot]
    tile_id = ty * ntx + tx
    perm = np.argsort(tile_id, kind="stable")
    ids = slot[perm].astype(np.int32)
    offs = np.zeros(ntx * nty + 1, dtype=np.int64)
    np.cumsum(np.bincount(tile_id, minlength=ntx * nty), out=offs[1:])
    return offs, np.ascontiguousarray(ids)


def _prepare(proxy, cam: Camera) -> _FrameState:
    means = np.asarray(proxy.means, dtype=np.float64)
    cov = proxy.cov_factors @ np.swapaxes(proxy.cov_factors, -1, -2)
    pc_all = means @ cam.extrinsics.rotation.T + cam.extrinsics.translation
    keep = (pc_all[:, 2] > cam.near) & (pc_all[:, 2] < cam.far) & (proxy.opacities >= ALPHA_MIN)
    keep &= np.isfinite(means).all(1)
    idx = np.flatnonzero(keep)
    pc, mean2d, jac, cov_cam, cov2d = _project(means[idx], cov[idx], cam)
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    conic = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1)
    v = means[idx] - cam.center
    vlen = np.linalg.norm(v, axis=1)
    vdir = v / vlen[:, None]
    rsh = proxy.sh_rotations[idx]
    local = np.einsum("nji,nj->ni", rsh, vdir)
    basis = sh_eval(proxy.sh_degree, local)
    raw = np.einsum("nck,nk->nc", proxy.sh[idx], basis)
    return _FrameState(
        idx=idx, pc=pc, mean2d=mean2d, jac=jac, cov_cam=cov_cam, cov2d=cov2d, conic=conic,
        view_dir=vdir, view_len=vlen, local_dir=local, basis=basis, raw_color=raw,
        color=np.clip(raw, 0.0, 1.0), offs=None, ids=None, final_t=None, last=None,
        dtype=np.float32, background=None,
    )


def _kernel_args(st: _FrameState, opac, dtype):
    c = np.ascontiguousarray
    return (
        c(st.mean2d, dtype=dtype),
        c(st.conic, dtype=dtype),
        c(opac[st.idx], dtype=dtype),
        c(st.color, dtype=dtype),
        st.offs,
        st.ids,
        c(st.background, dtype=dtype),
    )


def render_splat(proxy, cam: Camera, background=(0.0, 0.0, 0.0), dtype=np.float32, threads=None, backend=None) -> RenderOutput:
    """Composite the proxy front to back through 16x16 pixel tiles."""
    kern = _active_kernels(backend)
    threads = threads or _threads
    t0 = time.perf_counter()
    st = _prepare(proxy, cam)
    st.dtype = dtype
    st.background = np.asarray(background, dtype=np.float64).reshape(3)
    t1 = time.perf_counter()
    opac = np.asarray(proxy.opacities, dtype=np.float64)
    st.offs, st.ids = _bin_tiles(st.mean2d, st.cov2d, opac[st.idx], st.pc[:, 2], cam.width, cam.height)
    t2 = time.perf_counter()
    image, final_t, last, count = kern.rasterize_forward(*_kernel_args(st, opac, dtype), cam.width, cam.height, TILE, threads)
    t3 = time.perf_counter()
    st.final_t, st.last = final_t, last
    return RenderOutput(
        color=image,
        alpha=1.0 - final_t,
        counts=count,
        timings={"project": t1 - t0, "sort": t2 - t1, "composite": t3 - t2},
        state=st,
    )


def render_splat_backward(
    proxy, cam: Camera, background, grad_image, forward: RenderOutput | None = None,
    camera_grad: bool = False, threads=None, backend=None, dtype=None,
) -> RenderGradients:
    """Exact reverse pass of :func:`render_splat` for an upstream image gradient."""
    if forward is None or forward.state is None:
        forward = render_splat(proxy, cam, background, dtype=dtype or np.float64, threads=threads, backend=backend)
    st = forward.state
    grad_image = np.asarray(grad_image)
    if grad_image.shape != (cam.height, cam.width, 3):
        raise ValueError(f"gradient image shape {grad_image.shape} does not match {(cam.height, cam.width, 3)}")
    kern = _active_kernels(backend)
    dt = st.dtype
    opac = np.asarray(proxy.opacities, dtype=np.float64)
    g = kern.rasterize_backward(
        *_kernel_args(st, opac, dt),
        np.ascontiguousarray(st.final_t, dtype=dt),
        st.last,
        np.ascontiguousarray(grad_image, dtype=dt),
        len(st.idx),
        TILE,
        threads or _threads,
    )
    n = proxy.count if hasattr(proxy, "count") else len(proxy.means)
    out = RenderGradients(
        means=np.zeros((n, 3)),
        cov_factors=np.zeros((n, 3, 3)),
        opacities=np.zeros(n),
        sh=np.zeros_like(proxy.sh, dtype=np.float64),
        sh_rotations=np.zeros((n, 3, 3)),
        grad2d=np.zeros(n),
        visible=np.zeros(n, dtype=bool),
    )
    idx = st.idx
    out.visible[idx] = True
    if len(idx) == 0:
        if camera_grad:
            out.camera = np.zeros(6)
        return out
    rot = cam.extrinsics.rotation
    fx, fy = cam.fx, cam.fy
    pc = st.pc
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]

    # colour: clamp, SH coefficients, lookup direction
    g_col = g[:, 6:9] * ((st.raw_color > 0.0) & (st.raw_color < 1.0))
    sh = proxy.sh[idx]
    out.sh[idx] = g_col[:, :, None] * st.basis[:, None, :]
    dbasis = sh_eval_grad(proxy.sh_degree, st.local_dir)  # (M, K, 3)
    g_local = np.einsum("nc,nck,nkd->nd", g_col, sh, dbasis)
    rsh = proxy.sh_rotations[idx]
    out.sh_rotations[idx] = st.view_dir[:, :, None] * g_local[:, None, :]
    g_dir = np.einsum("nij,nj->ni", rsh, g_local)
    g_v = (g_dir - st.view_dir * np.sum(st.view_dir * g_dir, axis=1, keepdims=True)) / st.view_len[:, None]

    out.opacities[idx] = g[:, 5]

    # conic -> 2D covariance -> camera covariance and Jacobian
    conic_m = np.stack([st.conic[:, [0, 1]], st.conic[:, [1, 2]]], axis=1)
    g_q = np.stack([np.stack([g[:, 2], 0.5 * g[:, 3]], 1), np.stack([0.5 * g[:, 3], g[:, 4]], 1)], axis=1)
    g_cov2d = -conic_m @ g_q @ conic_m
    jac = st.jac
    g_cov_cam = np.swapaxes(jac, -1, -2) @ g_cov2d @ jac
    g_jac = 2.0 * g_cov2d @ jac @ st.cov_cam
    g_cov_w = rot.T @ g_cov_cam @ rot
    lf = proxy.cov_factors[idx]
    out.cov_factors[idx] = 2.0 * g_cov_w @ lf

    # camera-space position: projection of the mean and the Jacobian's dependence on it
    gu, gv = g[:, 0], g[:, 1]
    g_pc = np.stack(
        [
            gu * fx / z + g_jac[:, 0, 2] * (-fx / (z * z)),
            gv * fy / z + g_jac[:, 1, 2] * (-fy / (z * z)),
            -gu * fx * x / (z * z)
            - gv * fy * y / (z * z)
            - g_jac[:, 0, 0] * fx / (z * z)
            - g_jac[:, 1, 1] * fy / (z * z)
            + g_jac[:, 0, 2] * 2.0 * fx * x / z**3
            + g_jac[:, 1, 2] * 2.0 * fy * y / z**3,
        ],
        axis=1,
    )
    out.means[idx] = g_pc @ rot + g_v
    out.grad2d[idx] = np.hypot(gu * 0.5 * cam.width, gv * 0.5 * cam.height)

    if camera_grad:
        # left perturbation E <- exp(omega, tau) E
        m = st.cov_cam @ g_cov_cam
        g_omega = np.sum(np.cross(pc, g_pc), axis=0)
        g_omega += 2.0 * np.array(
            [
                np.sum(m[:, 1, 2] - m[:, 2, 1]),
                np.sum(m[:, 2, 0] - m[:, 0, 2]),
                np.sum(m[:, 0, 1] - m[:, 1, 0]),
            ]
        )
        g_tau = g_pc.sum(0) + rot @ g_v.sum(0)
        out.camera = np.concatenate([g_omega, g_tau])
    return out
