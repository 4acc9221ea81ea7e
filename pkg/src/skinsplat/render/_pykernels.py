"""Pure-numpy twins of the compiled kernels in ``_ckernels.pyx``.

Same signatures and the same compositing rules; used when the extension is
not built or when ``SKINSPLAT_BACKEND=python`` is set. Vectorized per tile,
so they are fine for tests and small images but slow for training.
"""
from __future__ import annotations

import numpy as np

from ..geom import sh_eval

ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4


def _tile_pixels(t, ntx, tile, width, height):
    tx, ty = t % ntx, t // ntx
    xs = np.arange(tx * tile, min(tx * tile + tile, width))
    ys = np.arange(ty * tile, min(ty * tile + tile, height))
    py, px = np.meshgrid(ys, xs, indexing="ij")
    return py.ravel(), px.ravel()


def _tile_alpha(means, conics, opac, ids_t, px, py, dtype):
    dx = (px[:, None] - means[ids_t, 0][None, :]).astype(dtype)
    dy = (py[:, None] - means[ids_t, 1][None, :]).astype(dtype)
    ca, cb, cc = conics[ids_t, 0], conics[ids_t, 1], conics[ids_t, 2]
    power = dtype(-0.5) * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
    gauss = np.exp(power)
    raw = opac[ids_t] * gauss
    alpha = np.minimum(raw, dtype(ALPHA_MAX))
    valid = (power <= 0) & (alpha >= ALPHA_MIN)
    return dx, dy, gauss, raw, np.where(valid, alpha, dtype(0)), valid


def _composite_masks(alpha, valid):
    """Apply early termination; returns kept alpha, transmittance before each entry, stop index."""
    t_after = np.cumprod(1 - alpha, axis=1)
    term = valid & (t_after < T_MIN)
    has = term.any(axis=1)
    first = np.argmax(term, axis=1)
    cols = np.arange(alpha.shape[1])[None, :]
    keep = np.where(has[:, None], cols <= first[:, None], True) & valid
    alpha = np.where(keep, alpha, alpha.dtype.type(0))
    t_after = np.cumprod(1 - alpha, axis=1)
    t_before = np.concatenate([np.ones((alpha.shape[0], 1), alpha.dtype), t_after[:, :-1]], axis=1)
    last_valid = np.where(keep.any(1), alpha.shape[1] - np.argmax(keep[:, ::-1], axis=1), 0)
    return alpha, keep, t_before, t_after, last_valid


def rasterize_forward(means, conics, opac, colors, offs, ids, bg, width, height, tile, threads):
    dtype = means.dtype.type
    image = np.empty((height, width, 3), dtype=means.dtype)
    final_t = np.empty((height, width), dtype=means.dtype)
    last = np.zeros((height, width), dtype=np.int32)
    count = np.zeros((height, width), dtype=np.int32)
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    for t in range(ntx * nty):
        py, px = _tile_pixels(t, ntx, tile, width, height)
        ids_t = ids[offs[t] : offs[t + 1]]
        if len(ids_t) == 0:
            image[py, px] = bg
            final_t[py, px] = 1
            continue
        _, _, _, _, alpha, valid = _tile_alpha(means, conics, opac, ids_t, px, py, dtype)
        alpha, keep, t_before, t_after, stop = _composite_masks(alpha, valid)
        w = alpha * t_before
        tf = t_after[:, -1]
        image[py, px] = w @ colors[ids_t] + tf[:, None] * bg[None, :]
        final_t[py, px] = tf
        last[py, px] = stop
        count[py, px] = keep.sum(1)
    return image, final_t, last, count


def rasterize_backward(means, conics, opac, colors, offs, ids, bg, final_t, last, grad_image, n_gauss, tile, threads):
    dtype = means.dtype.type
    height, width = grad_image.shape[:2]
    out = np.zeros((n_gauss, 9))
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    for t in range(ntx * nty):
        ids_t = ids[offs[t] : offs[t + 1]]
        if len(ids_t) == 0:
            continue
        py, px = _tile_pixels(t, ntx, tile, width, height)
        gimg = grad_image[py, px].astype(np.float64)
        dx, dy, gauss, raw, alpha, valid = _tile_alpha(means, conics, opac, ids_t, px, py, dtype)
        alpha, keep, t_before, _, _ = _composite_masks(alpha, valid)
        alpha = alpha.astype(np.float64)
        t_before = t_before.astype(np.float64)
        tf = final_t[py, px].astype(np.float64)
        col = colors[ids_t].astype(np.float64)
        w = alpha * t_before
        wc = w[:, :, None] * col[None]
        behind = np.cumsum(wc[:, ::-1], axis=1)[:, ::-1] - wc + (tf[:, None] * bg.astype(np.float64)[None, :])[:, None, :]
        inv = 1.0 / (1.0 - alpha)
        dalpha = np.einsum("pc,pgc->pg", gimg, t_before[:, :, None] * col[None] - behind * inv[:, :, None])
        dalpha = np.where(keep, dalpha, 0.0)
        pair = np.zeros((len(ids_t), 9))
        pair[:, 6:9] = np.einsum("pg,pc->gc", np.where(keep, w, 0.0), gimg)
        live = keep & (raw <= ALPHA_MAX)
        dop = np.where(live, gauss * dalpha, 0.0)
        dpower = np.where(live, alpha * dalpha, 0.0)
        ca, cb, cc = (conics[ids_t, k].astype(np.float64)[None, :] for k in range(3))
        dx = dx.astype(np.float64)
        dy = dy.astype(np.float64)
        pair[:, 0] = np.sum(dpower * (ca * dx + cb * dy), axis=0)
        pair[:, 1] = np.sum(dpower * (cb * dx + cc * dy), axis=0)
        pair[:, 2] = np.sum(-0.5 * dpower * dx * dx, axis=0)
        pair[:, 3] = np.sum(-dpower * dx * dy, axis=0)
        pair[:, 4] = np.sum(-0.5 * dpower * dy * dy, axis=0)
        pair[:, 5] = np.sum(dop, axis=0)
        np.add.at(out, ids_t, pair)
    return out


def raymarch(origin, dirs, means, prec, opac, radius, sh, shrot, degree, offs, ids, bg, near, far, step, tile, threads):
    height, width = dirs.shape[:2]
    image = np.empty((height, width, 3))
    final_t = np.empty((height, width))
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    n_steps = int(np.ceil((far - near) / step))
    for t in range(ntx * nty):
        ids_t = ids[offs[t] : offs[t + 1]]
        py_all, px_all = _tile_pixels(t, ntx, tile, width, height)
        for py, px in zip(py_all, px_all):
            d = dirs[py, px]
            b = means[ids_t] - origin
            tc = b @ d
            b2 = np.sum(b * b, axis=1) - tc * tc
            r2 = radius[ids_t, 0] ** 2
            hit = b2 < r2
            half = np.sqrt(np.where(hit, r2 - b2, 0.0))
            lo, hi = tc - half, tc + half
            hit &= (hi >= near) & (lo <= far)
            T, c = 1.0, np.zeros(3)
            if hit.any():
                g = ids_t[hit]
                lo, hi = lo[hit], hi[hit]
                local = np.einsum("gji,j->gi", shrot[g], d)
                col = np.einsum("gck,gk->gc", sh[g], sh_eval(degree, local))
                k0 = max(int(np.floor((lo.min() - near) / step - 0.5)), 0)
                k1 = min(int(np.ceil((hi.max() - near) / step - 0.5)), n_steps - 1)
                ts = near + (np.arange(k0, k1 + 1) + 0.5) * step
                q = origin[None, None, :] + ts[:, None, None] * d - means[g][None]
                p = prec[g]
                m = (
                    p[:, 0] * q[..., 0] ** 2
                    + p[:, 3] * q[..., 1] ** 2
                    + p[:, 5] * q[..., 2] ** 2
                    + 2.0 * (p[:, 1] * q[..., 0] * q[..., 1] + p[:, 2] * q[..., 0] * q[..., 2] + p[:, 4] * q[..., 1] * q[..., 2])
                )
                inside = (ts[:, None] >= lo[None]) & (ts[:, None] <= hi[None])
                sig = np.where(inside, opac[g][None] * np.exp(-0.5 * m), 0.0)
                sigma = sig.sum(1)
                rad = sig @ col
                for k in range(len(ts)):
                    if sigma[k] > 0:
                        a = 1.0 - np.exp(-sigma[k] * step)
                        c = c + T * a * rad[k] / sigma[k]
                        T = T * (1.0 - a)
            image[py, px] = c + T * bg
            final_t[py, px] = T
    return image, final_t
