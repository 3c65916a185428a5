"""Pure-numpy compositing, used when the compiled kernel is unavailable.

Loops over depth-sorted Gaussians and vectorizes over each one's pixel
footprint. Same math and skip rules as ``_raster.pyx``; per-pixel blending
order is identical, so outputs agree with the compiled kernel to rounding.
"""

from __future__ import annotations

import numpy as np


def composite_forward(means2d, conics, opac, colors, depths, order, rects, H, W, alpha_max, alpha_min):
    color = np.zeros((H, W, 3))
    depth = np.zeros((H, W))
    T = np.ones((H, W))
    for g in order:
        x0, x1, y0, y1 = rects[g]
        alpha, _, _, _, _ = _alpha_patch(g, means2d, conics, opac, x0, x1, y0, y1, alpha_max, alpha_min)
        Tp = T[y0:y1, x0:x1]
        w = Tp * alpha
        color[y0:y1, x0:x1] += w[..., None] * colors[g]
        depth[y0:y1, x0:x1] += w * depths[g]
        T[y0:y1, x0:x1] = Tp * (1.0 - alpha)
    return color, depth, T


def _alpha_patch(g, means2d, conics, opac, x0, x1, y0, y1, alpha_max, alpha_min):
    dx = np.arange(x0, x1, dtype=float)[None, :] - means2d[g, 0]
    dy = np.arange(y0, y1, dtype=float)[:, None] - means2d[g, 1]
    A, B, C = conics[g]
    power = -0.5 * (A * dx * dx + C * dy * dy) - B * dx * dy
    G = np.exp(power)
    raw = opac[g] * G
    alpha = np.minimum(raw, alpha_max)
    alpha = np.where(alpha < alpha_min, 0.0, alpha)
    return alpha, G, raw, dx, dy


def composite_backward(
    means2d, conics, opac, colors, depths, order, rects, H, W, alpha_max, alpha_min, T_final, g_color, g_depth, g_alpha
):
    n = len(opac)
    out = np.zeros((n, 10))
    T = T_final.copy()
    S = np.zeros((H, W, 3))
    Sd = np.zeros((H, W))
    gd = g_depth
    for g in order[::-1]:
        x0, x1, y0, y1 = rects[g]
        alpha, G, raw, dx, dy = _alpha_patch(g, means2d, conics, opac, x0, x1, y0, y1, alpha_max, alpha_min)
        active = alpha > 0.0
        if not active.any():
            continue
        sl = (slice(y0, y1), slice(x0, x1))
        T_before = T[sl] / (1.0 - alpha)
        w = T_before * alpha
        gc = g_color[sl]
        out[g, 6:9] = np.einsum("ij,ijc->c", w, gc)
        out[g, 9] = np.sum(w * gd[sl])
        Sp = S[sl]
        d_alpha = T_before * (np.einsum("ijc,ijc->ij", colors[g] - Sp, gc) + (depths[g] - Sd[sl]) * gd[sl])
        d_alpha = d_alpha + g_alpha[sl] * T_final[sl] / (1.0 - alpha)
        d_alpha = np.where(active, d_alpha, 0.0)
        S[sl] = np.where(active[..., None], alpha[..., None] * colors[g] + (1.0 - alpha[..., None]) * Sp, Sp)
        Sd[sl] = np.where(active, alpha * depths[g] + (1.0 - alpha) * Sd[sl], Sd[sl])
        T[sl] = np.where(active, T_before, T[sl])
        # clamped pixels pass no gradient to the Gaussian's shape or opacity
        d_alpha = np.where(raw <= alpha_max, d_alpha, 0.0)
        out[g, 5] = np.sum(d_alpha * G)
        d_power = d_alpha * alpha
        A, B, C = conics[g]
        out[g, 0] = np.sum(d_power * (A * dx + B * dy))
        out[g, 1] = np.sum(d_power * (B * dx + C * dy))
        out[g, 2] = np.sum(-0.5 * d_power * dx * dx)
        out[g, 3] = np.sum(-d_power * dx * dy)
        out[g, 4] = np.sum(-0.5 * d_power * dy * dy)
    return out
