# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Per-pixel front-to-back compositing kernels.

Gaussians arrive pre-sorted and binned per tile in CSR form
(``tile_offsets``, ``tile_gauss``). Each pixel blends its tile's list
sequentially, so results do not depend on the thread count. The backward
pass writes one gradient row per CSR entry; the caller reduces those rows
in CSR order.
"""

from cython.parallel cimport prange
from libc.math cimport exp

import numpy as np

cdef enum:
    G_MX = 0
    G_MY = 1
    G_A = 2
    G_B = 3
    G_C = 4
    G_OPAC = 5
    G_R = 6
    G_G = 7
    G_BL = 8
    G_DEPTH = 9
    N_GRAD = 10


def _cutoffs(opac, double alpha_min):
    # exponent below which opac * exp(power) is certainly under alpha_min;
    # the margin keeps the skip exact with respect to rounding in exp
    o = np.asarray(opac)
    with np.errstate(divide="ignore"):
        return np.ascontiguousarray(np.log(alpha_min / np.maximum(o, 1e-300)) - 1e-6)


cdef void _forward_tile(
    Py_ssize_t t,
    const double[:, ::1] means2d,
    const double[:, ::1] conics,
    const double[::1] opac,
    const double[::1] cutoff,
    const double[:, ::1] colors,
    const double[::1] depths,
    const long long[::1] tile_offsets,
    const long long[::1] tile_gauss,
    int H, int W, int tile, int tiles_x,
    double alpha_max, double alpha_min,
    double[:, :, ::1] out_color,
    double[:, ::1] out_depth,
    double[:, ::1] out_T,
) noexcept nogil:
    cdef int ty = <int>(t // tiles_x)
    cdef int tx = <int>(t % tiles_x)
    cdef int y0 = ty * tile
    cdef int x0 = tx * tile
    cdef int y1 = y0 + tile
    cdef int x1 = x0 + tile
    cdef int px, py
    cdef long long k, g
    cdef double T, cr, cg, cb, d, dx, dy, power, alpha
    if y1 > H:
        y1 = H
    if x1 > W:
        x1 = W
    for py in range(y0, y1):
        for px in range(x0, x1):
            T = 1.0
            cr = 0.0
            cg = 0.0
            cb = 0.0
            d = 0.0
            for k in range(tile_offsets[t], tile_offsets[t + 1]):
                g = tile_gauss[k]
                dx = px - means2d[g, 0]
                dy = py - means2d[g, 1]
                power = -0.5 * (conics[g, 0] * dx * dx + conics[g, 2] * dy * dy) - conics[g, 1] * dx * dy
                if power < cutoff[g]:
                    continue
                alpha = opac[g] * exp(power)
                if alpha > alpha_max:
                    alpha = alpha_max
                if alpha < alpha_min:
                    continue
                cr = cr + T * alpha * colors[g, 0]
                cg = cg + T * alpha * colors[g, 1]
                cb = cb + T * alpha * colors[g, 2]
                d = d + T * alpha * depths[g]
                T = T * (1.0 - alpha)
            out_color[py, px, 0] = cr
            out_color[py, px, 1] = cg
            out_color[py, px, 2] = cb
            out_depth[py, px] = d
            out_T[py, px] = T


def composite_forward(
    const double[:, ::1] means2d,
    const double[:, ::1] conics,
    const double[::1] opac,
    const double[:, ::1] colors,
    const double[::1] depths,
    const long long[::1] tile_offsets,
    const long long[::1] tile_gauss,
    int H, int W, int tile,
    double alpha_max, double alpha_min,
    int nthreads=1,
):
    cdef int tiles_x = (W + tile - 1) // tile
    cdef Py_ssize_t n_tiles = tile_offsets.shape[0] - 1
    cdef double[::1] cut = _cutoffs(opac, alpha_min)
    color = np.zeros((H, W, 3))
    depth = np.zeros((H, W))
    T_final = np.ones((H, W))
    cdef double[:, :, ::1] c_view = color
    cdef double[:, ::1] d_view = depth
    cdef double[:, ::1] t_view = T_final
    cdef Py_ssize_t t
    if nthreads > 1:
        for t in prange(n_tiles, nogil=True, num_threads=nthreads, schedule="static"):
            _forward_tile(t, means2d, conics, opac, cut, colors, depths, tile_offsets, tile_gauss,
                          H, W, tile, tiles_x, alpha_max, alpha_min, c_view, d_view, t_view)
    else:
        with nogil:
            for t in range(n_tiles):
                _forward_tile(t, means2d, conics, opac, cut, colors, depths, tile_offsets, tile_gauss,
                              H, W, tile, tiles_x, alpha_max, alpha_min, c_view, d_view, t_view)
    return color, depth, T_final


cdef void _backward_tile(
    Py_ssize_t t,
    const double[:, ::1] means2d,
    const double[:, ::1] conics,
    const double[::1] opac,
    const double[::1] cutoff,
    const double[:, ::1] colors,
    const double[::1] depths,
    const long long[::1] tile_offsets,
    const long long[::1] tile_gauss,
    int H, int W, int tile, int tiles_x,
    double alpha_max, double alpha_min,
    const double[:, ::1] T_final,
    const double[:, :, ::1] g_color,
    const double[:, ::1] g_depth,
    const double[:, ::1] g_alpha,
    double[:, ::1] out,
) noexcept nogil:
    cdef int ty = <int>(t // tiles_x)
    cdef int tx = <int>(t % tiles_x)
    cdef int y0 = ty * tile
    cdef int x0 = tx * tile
    cdef int y1 = y0 + tile
    cdef int x1 = x0 + tile
    cdef int px, py
    cdef long long k, g
    cdef double T, Tf, sr, sg, sb, sd, dx, dy, power, G, raw, alpha, w
    cdef double gr, gg, gb, gd, ga, d_alpha, d_power
    if y1 > H:
        y1 = H
    if x1 > W:
        x1 = W
    for py in range(y0, y1):
        for px in range(x0, x1):
            Tf = T_final[py, px]
            T = Tf
            sr = 0.0
            sg = 0.0
            sb = 0.0
            sd = 0.0
            gr = g_color[py, px, 0]
            gg = g_color[py, px, 1]
            gb = g_color[py, px, 2]
            gd = g_depth[py, px]
            ga = g_alpha[py, px]
            k = tile_offsets[t + 1] - 1
            while k >= tile_offsets[t]:
                g = tile_gauss[k]
                dx = px - means2d[g, 0]
                dy = py - means2d[g, 1]
                power = -0.5 * (conics[g, 0] * dx * dx + conics[g, 2] * dy * dy) - conics[g, 1] * dx * dy
                if power < cutoff[g]:
                    k = k - 1
                    continue
                G = exp(power)
                raw = opac[g] * G
                alpha = raw
                if alpha > alpha_max:
                    alpha = alpha_max
                if alpha < alpha_min:
                    k = k - 1
                    continue
                T = T / (1.0 - alpha)
                w = T * alpha
                out[k, G_R] += w * gr
                out[k, G_G] += w * gg
                out[k, G_BL] += w * gb
                out[k, G_DEPTH] += w * gd
                d_alpha = T * ((colors[g, 0] - sr) * gr + (colors[g, 1] - sg) * gg
                               + (colors[g, 2] - sb) * gb + (depths[g] - sd) * gd)
                d_alpha = d_alpha + ga * Tf / (1.0 - alpha)
                sr = alpha * colors[g, 0] + (1.0 - alpha) * sr
                sg = alpha * colors[g, 1] + (1.0 - alpha) * sg
                sb = alpha * colors[g, 2] + (1.0 - alpha) * sb
                sd = alpha * depths[g] + (1.0 - alpha) * sd
                if raw <= alpha_max:
                    out[k, G_OPAC] += d_alpha * G
                    d_power = d_alpha * alpha
                    out[k, G_MX] += d_power * (conics[g, 0] * dx + conics[g, 1] * dy)
                    out[k, G_MY] += d_power * (conics[g, 1] * dx + conics[g, 2] * dy)
                    out[k, G_A] += -0.5 * d_power * dx * dx
                    out[k, G_B] += -d_power * dx * dy
                    out[k, G_C] += -0.5 * d_power * dy * dy
                k = k - 1


def composite_backward(
    const double[:, ::1] means2d,
    const double[:, ::1] conics,
    const double[::1] opac,
    const double[:, ::1] colors,
    const double[::1] depths,
    const long long[::1] tile_offsets,
    const long long[::1] tile_gauss,
    int H, int W, int tile,
    double alpha_max, double alpha_min,
    const double[:, ::1] T_final,
    const double[:, :, ::1] g_color,
    const double[:, ::1] g_depth,
    const double[:, ::1] g_alpha,
    int nthreads=1,
):
    """Returns an ``(len(tile_gauss), 10)`` array of per-entry gradients.

    Columns: mean2d x/y, conic A/B/C, opacity, color r/g/b, depth.
    """
    cdef int tiles_x = (W + tile - 1) // tile
    cdef Py_ssize_t n_tiles = tile_offsets.shape[0] - 1
    cdef double[::1] cut = _cutoffs(opac, alpha_min)
    out = np.zeros((tile_gauss.shape[0], N_GRAD))
    cdef double[:, ::1] o_view = out
    cdef Py_ssize_t t
    if nthreads > 1:
        for t in prange(n_tiles, nogil=True, num_threads=nthreads, schedule="static"):
            _backward_tile(t, means2d, conics, opac, cut, colors, depths, tile_offsets, tile_gauss,
                           H, W, tile, tiles_x, alpha_max, alpha_min, T_final, g_color, g_depth,
                           g_alpha, o_view)
    else:
        with nogil:
            for t in range(n_tiles):
                _backward_tile(t, means2d, conics, opac, cut, colors, depths, tile_offsets, tile_gauss,
                               H, W, tile, tiles_x, alpha_max, alpha_min, T_final, g_color, g_depth,
                               g_alpha, o_view)
    return out
