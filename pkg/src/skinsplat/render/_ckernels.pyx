# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled tile rasterizer and ray-march kernels.

Semantics are mirrored exactly by ``_pykernels``; keep the two in sync.
"""
import numpy as np

from cython.parallel cimport prange, threadid
from libc.math cimport exp, sqrt, ceil, floor

ctypedef fused real:
    float
    double

cdef double ALPHA_MAX = 0.99
cdef double ALPHA_MIN = 1.0 / 255.0
cdef double T_MIN = 1e-4


cdef inline void _forward_tile(
    Py_ssize_t t, int ntx, int tile, int width, int height,
    const real[:, ::1] means, const real[:, ::1] conics, const real[::1] opac,
    const real[:, ::1] colors, const long long[::1] offs, const int[::1] ids,
    const real[::1] bg, real[:, :, ::1] image, real[:, ::1] final_t,
    int[:, ::1] last, int[:, ::1] count,
) noexcept nogil:
    cdef int tx = t % ntx
    cdef int ty = t // ntx
    cdef int x0 = tx * tile
    cdef int y0 = ty * tile
    cdef int x1 = min(x0 + tile, width)
    cdef int y1 = min(y0 + tile, height)
    cdef long long start = offs[t]
    cdef long long end = offs[t + 1]
    cdef int px, py, g, n
    cdef long long j, stop
    cdef real T, c0, c1, c2, dx, dy, power, alpha
    for py in range(y0, y1):
        for px in range(x0, x1):
            T = 1.0
            c0 = 0.0
            c1 = 0.0
            c2 = 0.0
            stop = start
            n = 0
            for j in range(start, end):
                g = ids[j]
                dx = px - means[g, 0]
                dy = py - means[g, 1]
                power = -0.5 * (conics[g, 0] * dx * dx + conics[g, 2] * dy * dy) - conics[g, 1] * dx * dy
                if power > 0:
                    continue
                alpha = opac[g] * exp(power)
                if alpha > ALPHA_MAX:
                    alpha = ALPHA_MAX
                if alpha < ALPHA_MIN:
                    continue
                c0 = c0 + alpha * colors[g, 0] * T
                c1 = c1 + alpha * colors[g, 1] * T
                c2 = c2 + alpha * colors[g, 2] * T
                T = T * (1 - alpha)
                n = n + 1
                stop = j + 1
                if T < T_MIN:
                    break
            image[py, px, 0] = c0 + T * bg[0]
            image[py, px, 1] = c1 + T * bg[1]
            image[py, px, 2] = c2 + T * bg[2]
            final_t[py, px] = T
            last[py, px] = <int>(stop - start)
            count[py, px] = n


def rasterize_forward(
    const real[:, ::1] means, const real[:, ::1] conics, const real[::1] opac,
    const real[:, ::1] colors, const long long[::1] offs, const int[::1] ids,
    const real[::1] bg, int width, int height, int tile, int threads,
):
    dtype = np.float32 if real is float else np.float64
    image_arr = np.empty((height, width, 3), dtype=dtype)
    final_arr = np.empty((height, width), dtype=dtype)
    last_arr = np.zeros((height, width), dtype=np.int32)
    count_arr = np.zeros((height, width), dtype=np.int32)
    cdef real[:, :, ::1] image = image_arr
    cdef real[:, ::1] final_t = final_arr
    cdef int[:, ::1] last = last_arr
    cdef int[:, ::1] count = count_arr
    cdef int ntx = (width + tile - 1) // tile
    cdef int nty = (height + tile - 1) // tile
    cdef Py_ssize_t t
    for t in prange(ntx * nty, nogil=True, num_threads=threads, schedule="dynamic"):
        _forward_tile(t, ntx, tile, width, height, means, conics, opac, colors, offs, ids, bg,
                      image, final_t, last, count)
    return image_arr, final_arr, last_arr, count_arr


cdef inline void _backward_tile(
    Py_ssize_t t, int ntx, int tile, int width, int height,
    const real[:, ::1] means, const real[:, ::1] conics, const real[::1] opac,
    const real[:, ::1] colors, const long long[::1] offs, const int[::1] ids,
    const real[::1] bg, const real[:, ::1] final_t, const int[:, ::1] last,
    const real[:, :, ::1] grad_image, double[:, ::1] pair_grads,
) noexcept nogil:
    cdef int tx = t % ntx
    cdef int ty = t // ntx
    cdef int x0 = tx * tile
    cdef int y0 = ty * tile
    cdef int x1 = min(x0 + tile, width)
    cdef int y1 = min(y0 + tile, height)
    cdef long long start = offs[t]
    cdef int px, py, g
    cdef long long j
    cdef real T, dx, dy, power, alpha, gauss, raw
    cdef double g0, g1, g2, b0, b1, b2, w, dalpha, dpower, inv
    for py in range(y0, y1):
        for px in range(x0, x1):
            g0 = grad_image[py, px, 0]
            g1 = grad_image[py, px, 1]
            g2 = grad_image[py, px, 2]
            if g0 == 0 and g1 == 0 and g2 == 0:
                continue
            T = final_t[py, px]
            b0 = T * bg[0]
            b1 = T * bg[1]
            b2 = T * bg[2]
            j = start + last[py, px] - 1
            while j >= start:
                g = ids[j]
                dx = px - means[g, 0]
                dy = py - means[g, 1]
                power = -0.5 * (conics[g, 0] * dx * dx + conics[g, 2] * dy * dy) - conics[g, 1] * dx * dy
                if power > 0:
                    j = j - 1
                    continue
                gauss = exp(power)
                raw = opac[g] * gauss
                alpha = raw
                if alpha > ALPHA_MAX:
                    alpha = ALPHA_MAX
                if alpha < ALPHA_MIN:
                    j = j - 1
                    continue
                inv = 1.0 / (1.0 - alpha)
                T = T * inv
                w = alpha * T
                pair_grads[j, 6] += w * g0
                pair_grads[j, 7] += w * g1
                pair_grads[j, 8] += w * g2
                dalpha = (g0 * (T * colors[g, 0] - b0 * inv)
                          + g1 * (T * colors[g, 1] - b1 * inv)
                          + g2 * (T * colors[g, 2] - b2 * inv))
                b0 = b0 + w * colors[g, 0]
                b1 = b1 + w * colors[g, 1]
                b2 = b2 + w * colors[g, 2]
                if raw <= ALPHA_MAX:
                    pair_grads[j, 5] += gauss * dalpha
                    dpower = alpha * dalpha
                    pair_grads[j, 0] += dpower * (conics[g, 0] * dx + conics[g, 1] * dy)
                    pair_grads[j, 1] += dpower * (conics[g, 1] * dx + conics[g, 2] * dy)
                    pair_grads[j, 2] += -0.5 * dpower * dx * dx
                    pair_grads[j, 3] += -dpower * dx * dy
                    pair_grads[j, 4] += -0.5 * dpower * dy * dy
                j = j - 1


def rasterize_backward(
    const real[:, ::1] means, const real[:, ::1] conics, const real[::1] opac,
    const real[:, ::1] colors, const long long[::1] offs, const int[::1] ids,
    const real[::1] bg, const real[:, ::1] final_t, const int[:, ::1] last,
    const real[:, :, ::1] grad_image, int n_gauss, int tile, int threads,
):
    """Per-Gaussian gradients, columns: d mean2d (2), d conic (3), d opacity, d colour (3)."""
    cdef int height = grad_image.shape[0]
    cdef int width = grad_image.shape[1]
    cdef Py_ssize_t n_pairs = ids.shape[0]
    pair_arr = np.zeros((n_pairs, 9), dtype=np.float64)
    out_arr = np.zeros((n_gauss, 9), dtype=np.float64)
    cdef double[:, ::1] pair_grads = pair_arr
    cdef double[:, ::1] out = out_arr
    cdef int ntx = (width + tile - 1) // tile
    cdef int nty = (height + tile - 1) // tile
    cdef Py_ssize_t t, j
    cdef int k
    for t in prange(ntx * nty, nogil=True, num_threads=threads, schedule="dynamic"):
        _backward_tile(t, ntx, tile, width, height, means, conics, opac, colors, offs, ids, bg,
                       final_t, last, grad_image, pair_grads)
    # ordered reduction keeps gradients bit-identical across thread counts
    for j in range(n_pairs):
        for k in range(9):
            out[ids[j], k] += pair_grads[j, k]
    return out_arr


# ---------------------------------------------------------------------------
# ray-march oracle

cdef double SH_C0 = 0.28209479177387814
cdef double SH_C1 = 0.4886025119029199


cdef inline void _sh_basis(int degree, double x, double y, double z, double* out) noexcept nogil:
    cdef double xx = x * x, yy = y * y, zz = z * z
    out[0] = SH_C0
    if degree >= 1:
        out[1] = -SH_C1 * y
        out[2] = SH_C1 * z
        out[3] = -SH_C1 * x
    if degree >= 2:
        out[4] = 1.0925484305920792 * x * y
        out[5] = -1.0925484305920792 * y * z
        out[6] = 0.31539156525252005 * (2.0 * zz - xx - yy)
        out[7] = -1.0925484305920792 * x * z
        out[8] = 0.5462742152960396 * (xx - yy)
    if degree >= 3:
        out[9] = -0.5900435899266435 * y * (3 * xx - yy)
        out[10] = 2.890611442640554 * x * y * z
        out[11] = -0.4570457994644658 * y * (4 * zz - xx - yy)
        out[12] = 0.3731763325901154 * z * (2 * zz - 3 * xx - 3 * yy)
        out[13] = -0.4570457994644658 * x * (4 * zz - xx - yy)
        out[14] = 1.445305721320277 * z * (xx - yy)
        out[15] = -0.5900435899266435 * x * (xx - 3 * yy)


cdef void _march_tile(
    Py_ssize_t t, int ntx, int tile, int width, int height,
    const double[::1] origin, const double[:, :, ::1] dirs,
    const double[:, ::1] means, const double[:, ::1] prec, const double[::1] opac,
    const double[:, ::1] radius, const double[:, :, ::1] sh, const double[:, :, ::1] shrot,
    int degree, const long long[::1] offs, const int[::1] ids, const double[::1] bg,
    double near, double far, double step, double[:, :, ::1] image, double[:, ::1] final_t,
    int[::1] hit_buf, double[:, ::1] span_buf, double[:, ::1] col_buf,
) noexcept nogil:
    cdef int tx = t % ntx
    cdef int ty = t // ntx
    cdef int x0 = tx * tile
    cdef int y0 = ty * tile
    cdef int x1 = min(x0 + tile, width)
    cdef int y1 = min(y0 + tile, height)
    cdef long long start = offs[t]
    cdef long long end = offs[t + 1]
    cdef long long j
    cdef int px, py, g, nh, h, k, k0, k1, c, n_steps
    cdef double dx, dy, dz, ox, oy, oz, bx, by, bz, tc, b2, r2, half, lo, hi
    cdef double tt, qx, qy, qz, m, sig, sigma, cr, cg, cb, a, T, c0, c1, c2, lx, ly, lz
    cdef double basis[16]
    ox = origin[0]
    oy = origin[1]
    oz = origin[2]
    n_steps = <int>ceil((far - near) / step)
    for py in range(y0, y1):
        for px in range(x0, x1):
            dx = dirs[py, px, 0]
            dy = dirs[py, px, 1]
            dz = dirs[py, px, 2]
            nh = 0
            k0 = n_steps
            k1 = -1
            for j in range(start, end):
                g = ids[j]
                bx = means[g, 0] - ox
                by = means[g, 1] - oy
                bz = means[g, 2] - oz
                tc = bx * dx + by * dy + bz * dz
                b2 = bx * bx + by * by + bz * bz - tc * tc
                r2 = radius[g, 0] * radius[g, 0]
                if b2 >= r2:
                    continue
                half = sqrt(r2 - b2)
                lo = tc - half
                hi = tc + half
                if hi < near or lo > far:
                    continue
                hit_buf[nh] = g
                span_buf[nh, 0] = lo
                span_buf[nh, 1] = hi
                # view-dependent colour along this ray
                lx = shrot[g, 0, 0] * dx + shrot[g, 1, 0] * dy + shrot[g, 2, 0] * dz
                ly = shrot[g, 0, 1] * dx + shrot[g, 1, 1] * dy + shrot[g, 2, 1] * dz
                lz = shrot[g, 0, 2] * dx + shrot[g, 1, 2] * dy + shrot[g, 2, 2] * dz
                _sh_basis(degree, lx, ly, lz, basis)
                for c in range(3):
                    col_buf[nh, c] = 0.0
                    for k in range((degree + 1) * (degree + 1)):
                        col_buf[nh, c] += sh[g, c, k] * basis[k]
                k = <int>floor((lo - near) / step - 0.5)
                if k < k0:
                    k0 = k
                k = <int>ceil((hi - near) / step - 0.5)
                if k > k1:
                    k1 = k
                nh = nh + 1
            if k0 < 0:
                k0 = 0
            if k1 > n_steps - 1:
                k1 = n_steps - 1
            T = 1.0
            c0 = 0.0
            c1 = 0.0
            c2 = 0.0
            if nh > 0:
                for k in range(k0, k1 + 1):
                    tt = near + (k + 0.5) * step
                    sigma = 0.0
                    cr = 0.0
                    cg = 0.0
                    cb = 0.0
                    for h in range(nh):
                        if tt < span_buf[h, 0] or tt > span_buf[h, 1]:
                            continue
                        g = hit_buf[h]
                        qx = ox + tt * dx - means[g, 0]
                        qy = oy + tt * dy - means[g, 1]
                        qz = oz + tt * dz - means[g, 2]
                        m = (prec[g, 0] * qx * qx + prec[g, 3] * qy * qy + prec[g, 5] * qz * qz
                             + 2.0 * (prec[g, 1] * qx * qy + prec[g, 2] * qx * qz + prec[g, 4] * qy * qz))
                        sig = opac[g] * exp(-0.5 * m)
                        sigma = sigma + sig
                        cr = cr + sig * col_buf[h, 0]
                        cg = cg + sig * col_buf[h, 1]
                        cb = cb + sig * col_buf[h, 2]
                    if sigma > 0:
                        a = 1.0 - exp(-sigma * step)
                        c0 = c0 + T * a * cr / sigma
                        c1 = c1 + T * a * cg / sigma
                        c2 = c2 + T * a * cb / sigma
                        T = T * (1.0 - a)
            image[py, px, 0] = c0 + T * bg[0]
            image[py, px, 1] = c1 + T * bg[1]
            image[py, px, 2] = c2 + T * bg[2]
            final_t[py, px] = T


def raymarch(
    const double[::1] origin, const double[:, :, ::1] dirs,
    const double[:, ::1] means, const double[:, ::1] prec, const double[::1] opac,
    const double[:, ::1] radius, const double[:, :, ::1] sh, const double[:, :, ::1] shrot,
    int degree, const long long[::1] offs, const int[::1] ids, const double[::1] bg,
    double near, double far, double step, int tile, int threads,
):
    cdef int height = dirs.shape[0]
    cdef int width = dirs.shape[1]
    image_arr = np.empty((height, width, 3))
    final_arr = np.empty((height, width))
    cdef double[:, :, ::1] image = image_arr
    cdef double[:, ::1] final_t = final_arr
    cdef int ntx = (width + tile - 1) // tile
    cdef int nty = (height + tile - 1) // tile
    cdef long long max_list = 1
    cdef Py_ssize_t t
    for t in range(ntx * nty):
        if offs[t + 1] - offs[t] > max_list:
            max_list = offs[t + 1] - offs[t]
    cdef int n_buf = max(threads, 1)
    hits = np.zeros((n_buf, max_list), dtype=np.int32)
    spans = np.zeros((n_buf, max_list, 2))
    cols = np.zeros((n_buf, max_list, 3))
    cdef int[:, ::1] hv = hits
    cdef double[:, :, ::1] sv = spans
    cdef double[:, :, ::1] cv = cols
    cdef int tid
    for t in prange(ntx * nty, nogil=True, num_threads=n_buf, schedule="dynamic"):
        tid = threadid()
        _march_tile(t, ntx, tile, width, height, origin, dirs, means, prec, opac, radius, sh, shrot,
                    degree, offs, ids, bg, near, far, step, image, final_t, hv[tid], sv[tid], cv[tid])
    return image_arr, final_arr
