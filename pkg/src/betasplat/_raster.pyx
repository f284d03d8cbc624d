# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled rasterizer core.

Same interface and compositing semantics as the numpy fallback
(_raster_py): one global depth order, front-to-back alpha compositing with
the bounded Beta kernel, a 1/255 sample cutoff and early termination below a
transmittance threshold.  The naive path walks every sorted primitive per
pixel; the tiled path processes binned tiles in parallel.  Gradients and
contribution counters are staged per (tile, list-entry) and merged in a
fixed order afterwards, so outputs are identical for any thread count.
"""

import numpy as np

cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport fmax, fmin, log, pow

COMPILED = True

cdef double EDGE_GRAD_CLAMP = 1e7


def forward_naive(double[:, ::1] means, double[:, ::1] conics, double[::1] opac,
                  double[::1] betas, double[:, ::1] colors, int[:, ::1] bounds,
                  int height, int width, double[::1] background,
                  double alpha_min, double t_stop):
    cdef int v = means.shape[0]
    raw_arr = np.zeros((height, width, 3))
    trans_arr = np.ones((height, width))
    contrib_arr = np.zeros(v, dtype=np.int64)
    cdef double[:, :, ::1] raw = raw_arr
    cdef double[:, ::1] trans = trans_arr
    cdef cnp.int64_t[::1] contrib = contrib_arr
    cdef int px, py, k
    cdef double t, c0, c1, c2, dx, dy, r2, x, kernel, alpha, weight

    with nogil:
        for py in range(height):
            for px in range(width):
                t = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                for k in range(v):
                    if px < bounds[k, 0] or px > bounds[k, 1]:
                        continue
                    if py < bounds[k, 2] or py > bounds[k, 3]:
                        continue
                    dx = px - means[k, 0]
                    dy = py - means[k, 1]
                    r2 = conics[k, 0] * dx * dx + 2.0 * conics[k, 1] * dx * dy \
                        + conics[k, 2] * dy * dy
                    x = fmin(fmax(r2, 0.0), 1.0)
                    kernel = pow(1.0 - x, betas[k])
                    alpha = opac[k] * kernel
                    if alpha < alpha_min:
                        continue
                    weight = alpha * t
                    c0 = c0 + weight * colors[k, 0]
                    c1 = c1 + weight * colors[k, 1]
                    c2 = c2 + weight * colors[k, 2]
                    t = t * (1.0 - alpha)
                    contrib[k] += 1
                    if t < t_stop:
                        break
                raw[py, px, 0] = c0 + background[0] * t
                raw[py, px, 1] = c1 + background[1] * t
                raw[py, px, 2] = c2 + background[2] * t
                trans[py, px] = t
    return raw_arr, 1.0 - trans_arr, trans_arr, contrib_arr


cdef void _tile_forward(int tile, int tile_size, int tiles_x, int height, int width,
                        double[:, ::1] means, double[:, ::1] conics,
                        double[::1] opac, double[::1] betas, double[:, ::1] colors,
                        int[:, ::1] bounds, double[::1] background,
                        cnp.int64_t[::1] offsets, cnp.int64_t[::1] lists,
                        double[:, :, ::1] raw, double[:, ::1] trans,
                        cnp.int64_t[::1] stage_contrib,
                        double alpha_min, double t_stop) noexcept nogil:
    cdef int tx0 = (tile % tiles_x) * tile_size
    cdef int ty0 = (tile // tiles_x) * tile_size
    cdef int tx1 = tx0 + tile_size - 1
    cdef int ty1 = ty0 + tile_size - 1
    if tx1 > width - 1:
        tx1 = width - 1
    if ty1 > height - 1:
        ty1 = height - 1
    cdef cnp.int64_t lo = offsets[tile]
    cdef cnp.int64_t hi = offsets[tile + 1]
    cdef cnp.int64_t e
    cdef int px, py, k
    cdef double t, c0, c1, c2, dx, dy, r2, x, kernel, alpha, weight
    for py in range(ty0, ty1 + 1):
        for px in range(tx0, tx1 + 1):
            t = 1.0
            c0 = 0.0
            c1 = 0.0
            c2 = 0.0
            for e in range(lo, hi):
                k = <int> lists[e]
                if px < bounds[k, 0] or px > bounds[k, 1]:
                    continue
                if py < bounds[k, 2] or py > bounds[k, 3]:
                    continue
                dx = px - means[k, 0]
                dy = py - means[k, 1]
                r2 = conics[k, 0] * dx * dx + 2.0 * conics[k, 1] * dx * dy \
                    + conics[k, 2] * dy * dy
                x = fmin(fmax(r2, 0.0), 1.0)
                kernel = pow(1.0 - x, betas[k])
                alpha = opac[k] * kernel
                if alpha < alpha_min:
                    continue
                weight = alpha * t
                c0 = c0 + weight * colors[k, 0]
                c1 = c1 + weight * colors[k, 1]
                c2 = c2 + weight * colors[k, 2]
                t = t * (1.0 - alpha)
                stage_contrib[e] += 1
                if t < t_stop:
                    break
            raw[py, px, 0] = c0 + background[0] * t
            raw[py, px, 1] = c1 + background[1] * t
            raw[py, px, 2] = c2 + background[2] * t
            trans[py, px] = t


def forward_tiled(double[:, ::1] means, double[:, ::1] conics, double[::1] opac,
                  double[::1] betas, double[:, ::1] colors, int[:, ::1] bounds,
                  int height, int width, double[::1] background, int tile_size,
                  cnp.int64_t[::1] offsets, cnp.int64_t[::1] lists, int threads,
                  double alpha_min, double t_stop):
    cdef int v = means.shape[0]
    cdef int tiles_x = (width + tile_size - 1) // tile_size
    cdef int n_tiles = offsets.shape[0] - 1
    raw_arr = np.zeros((height, width, 3))
    trans_arr = np.ones((height, width))
    contrib_arr = np.zeros(v, dtype=np.int64)
    stage_arr = np.zeros(lists.shape[0], dtype=np.int64)
    cdef double[:, :, ::1] raw = raw_arr
    cdef double[:, ::1] trans = trans_arr
    cdef cnp.int64_t[::1] contrib = contrib_arr
    cdef cnp.int64_t[::1] stage = stage_arr
    cdef int tile
    for tile in prange(n_tiles, nogil=True, num_threads=threads, schedule='static'):
        _tile_forward(tile, tile_size, tiles_x, height, width, means, conics,
                      opac, betas, colors, bounds, background, offsets, lists,
                      raw, trans, stage, alpha_min, t_stop)
    cdef cnp.int64_t e
    with nogil:
        for e in range(lists.shape[0]):
            contrib[lists[e]] += stage[e]
    return raw_arr, 1.0 - trans_arr, trans_arr, contrib_arr


cdef void _tile_backward(int tile, int tile_size, int tiles_x, int height, int width,
                         double[:, ::1] means, double[:, ::1] conics,
                         double[::1] opac, double[::1] betas, double[:, ::1] colors,
                         int[:, ::1] bounds, double[:, :, ::1] raw,
                         double[:, :, ::1] d_raw,
                         cnp.int64_t[::1] offsets, cnp.int64_t[::1] lists,
                         double[:, ::1] stage,
                         double alpha_min, double t_stop) noexcept nogil:
    cdef int tx0 = (tile % tiles_x) * tile_size
    cdef int ty0 = (tile // tiles_x) * tile_size
    cdef int tx1 = tx0 + tile_size - 1
    cdef int ty1 = ty0 + tile_size - 1
    if tx1 > width - 1:
        tx1 = width - 1
    if ty1 > height - 1:
        ty1 = height - 1
    cdef cnp.int64_t lo = offsets[tile]
    cdef cnp.int64_t hi = offsets[tile + 1]
    cdef cnp.int64_t e
    cdef int px, py, k
    cdef double t, p0, p1, p2, dx, dy, r2, x, kernel, alpha, weight
    cdef double a, b, c, cr0, cr1, cr2, g0, g1, g2
    cdef double behind0, behind1, behind2, g_dot_col, g_dot_behind
    cdef double d_alpha, d_kernel, dkdx, d_x
    for py in range(ty0, ty1 + 1):
        for px in range(tx0, tx1 + 1):
            t = 1.0
            p0 = 0.0
            p1 = 0.0
            p2 = 0.0
            g0 = d_raw[py, px, 0]
            g1 = d_raw[py, px, 1]
            g2 = d_raw[py, px, 2]
            for e in range(lo, hi):
                k = <int> lists[e]
                if px < bounds[k, 0] or px > bounds[k, 1]:
                    continue
                if py < bounds[k, 2] or py > bounds[k, 3]:
                    continue
                dx = px - means[k, 0]
                dy = py - means[k, 1]
                a = conics[k, 0]
                b = conics[k, 1]
                c = conics[k, 2]
                r2 = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                x = fmin(fmax(r2, 0.0), 1.0)
                kernel = pow(1.0 - x, betas[k])
                alpha = opac[k] * kernel
                if alpha < alpha_min:
                    continue
                weight = alpha * t
                cr0 = weight * colors[k, 0]
                cr1 = weight * colors[k, 1]
                cr2 = weight * colors[k, 2]
                behind0 = raw[py, px, 0] - p0 - cr0
                behind1 = raw[py, px, 1] - p1 - cr1
                behind2 = raw[py, px, 2] - p2 - cr2
                g_dot_col = g0 * colors[k, 0] + g1 * colors[k, 1] + g2 * colors[k, 2]
                g_dot_behind = g0 * behind0 + g1 * behind1 + g2 * behind2
                d_alpha = g_dot_col * t - g_dot_behind / (1.0 - alpha)

                stage[e, 7] += weight * g0
                stage[e, 8] += weight * g1
                stage[e, 9] += weight * g2
                stage[e, 5] += d_alpha * kernel
                d_kernel = d_alpha * opac[k]
                if x < 1.0:
                    stage[e, 6] += d_kernel * kernel * log(1.0 - x)
                    dkdx = -betas[k] * pow(1.0 - x, betas[k] - 1.0)
                    if dkdx < -EDGE_GRAD_CLAMP:
                        dkdx = -EDGE_GRAD_CLAMP
                    d_x = d_kernel * dkdx
                    stage[e, 0] += -d_x * 2.0 * (a * dx + b * dy)
                    stage[e, 1] += -d_x * 2.0 * (b * dx + c * dy)
                    stage[e, 2] += d_x * dx * dx
                    stage[e, 3] += d_x * 2.0 * dx * dy
                    stage[e, 4] += d_x * dy * dy

                p0 = p0 + cr0
                p1 = p1 + cr1
                p2 = p2 + cr2
                t = t * (1.0 - alpha)
                if t < t_stop:
                    break


def backward(double[:, ::1] means, double[:, ::1] conics, double[::1] opac,
             double[::1] betas, double[:, ::1] colors, int[:, ::1] bounds,
             int height, int width, double[::1] background,
             double[:, :, ::1] raw, double[:, :, ::1] d_raw,
             int tile_size, cnp.int64_t[::1] offsets, cnp.int64_t[::1] lists,
             int threads, double alpha_min, double t_stop):
    cdef int v = means.shape[0]
    cdef int tiles_x = (width + tile_size - 1) // tile_size
    cdef int n_tiles = offsets.shape[0] - 1
    stage_arr = np.zeros((lists.shape[0], 10))
    cdef double[:, ::1] stage = stage_arr
    cdef int tile
    for tile in prange(n_tiles, nogil=True, num_threads=threads, schedule='static'):
        _tile_backward(tile, tile_size, tiles_x, height, width, means, conics,
                       opac, betas, colors, bounds, raw, d_raw, offsets, lists,
                       stage, alpha_min, t_stop)

    d_means_arr = np.zeros((v, 2))
    d_conics_arr = np.zeros((v, 3))
    d_opac_arr = np.zeros(v)
    d_betas_arr = np.zeros(v)
    d_colors_arr = np.zeros((v, 3))
    cdef double[:, ::1] d_means = d_means_arr
    cdef double[:, ::1] d_conics = d_conics_arr
    cdef double[::1] d_opac = d_opac_arr
    cdef double[::1] d_betas = d_betas_arr
    cdef double[:, ::1] d_colors = d_colors_arr
    cdef cnp.int64_t e
    cdef int k
    # fixed merge order keeps results identical across thread counts
    with nogil:
        for e in range(lists.shape[0]):
            k = <int> lists[e]
            d_means[k, 0] += stage[e, 0]
            d_means[k, 1] += stage[e, 1]
            d_conics[k, 0] += stage[e, 2]
            d_conics[k, 1] += stage[e, 3]
            d_conics[k, 2] += stage[e, 4]
            d_opac[k] += stage[e, 5]
            d_betas[k] += stage[e, 6]
            d_colors[k, 0] += stage[e, 7]
            d_colors[k, 1] += stage[e, 8]
            d_colors[k, 2] += stage[e, 9]
    return d_means_arr, d_conics_arr, d_opac_arr, d_betas_arr, d_colors_arr
