"""Jitted per-tile compositing kernels.

Tiles are processed in index order and Gaussians within a tile in list order,
so gradient accumulation is order-deterministic.
"""
import math

import numpy as np

from .._jit import njit

ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
CUTOFF_M2 = 9.0


@njit(cache=True)
def _max_len(tile_offsets):
    out = 0
    for t in range(tile_offsets.shape[0] - 1):
        out = max(out, tile_offsets[t + 1] - tile_offsets[t])
    return out


@njit(cache=True)
def _pack_tile(start, end, tile_gauss, mu2d, conic, opacity, color, pack):
    # contiguous copy of the tile's Gaussians, in list order
    for n in range(start, end):
        k = tile_gauss[n]
        i = n - start
        pack[i, 0] = mu2d[k, 0]
        pack[i, 1] = mu2d[k, 1]
        pack[i, 2] = conic[k, 0]
        pack[i, 3] = conic[k, 1]
        pack[i, 4] = conic[k, 2]
        pack[i, 5] = opacity[k]
        pack[i, 6] = color[k, 0]
        pack[i, 7] = color[k, 1]
        pack[i, 8] = color[k, 2]
    return end - start


@njit(cache=True)
def composite_forward(tile_offsets, tile_gauss, mu2d, conic, opacity, color, bg,
                      width, height, tile, tiles_x):
    image = np.empty((height, width, 3))
    trans = np.empty((height, width))
    n_tiles = tile_offsets.shape[0] - 1
    pack = np.empty((_max_len(tile_offsets), 9))
    for t in range(n_tiles):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        cnt = _pack_tile(tile_offsets[t], tile_offsets[t + 1], tile_gauss, mu2d, conic, opacity, color, pack)
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                T = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                for n in range(cnt):
                    dx = px - pack[n, 0]
                    dy = py - pack[n, 1]
                    m = pack[n, 2] * dx * dx + 2.0 * pack[n, 3] * dx * dy + pack[n, 4] * dy * dy
                    if m > CUTOFF_M2:
                        continue
                    a = pack[n, 5] * math.exp(-0.5 * m)
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                    if a < ALPHA_MIN:
                        continue
                    w = a * T
                    r += w * pack[n, 6]
                    g += w * pack[n, 7]
                    b += w * pack[n, 8]
                    T *= 1.0 - a
                image[py, px, 0] = r + T * bg[0]
                image[py, px, 1] = g + T * bg[1]
                image[py, px, 2] = b + T * bg[2]
                trans[py, px] = T
    return image, trans


@njit(cache=True)
def composite_backward(tile_offsets, tile_gauss, mu2d, conic, opacity, color, bg,
                       width, height, tile, tiles_x, d_image):
    k_total = mu2d.shape[0]
    d_mu2d = np.zeros((k_total, 2))
    d_conic = np.zeros((k_total, 3))
    d_opacity = np.zeros(k_total)
    d_color = np.zeros((k_total, 3))
    d_bg = np.zeros(3)
    n_tiles = tile_offsets.shape[0] - 1
    max_len = _max_len(tile_offsets)
    pack = np.empty((max_len, 9))
    buf_k = np.empty(max_len, dtype=np.int64)
    buf_a = np.empty(max_len)
    buf_t = np.empty(max_len)
    buf_clamped = np.empty(max_len, dtype=np.bool_)
    for t in range(n_tiles):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        start = tile_offsets[t]
        n_list = _pack_tile(start, tile_offsets[t + 1], tile_gauss, mu2d, conic, opacity, color, pack)
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                T = 1.0
                cnt = 0
                for n in range(n_list):
                    dx = px - pack[n, 0]
                    dy = py - pack[n, 1]
                    m = pack[n, 2] * dx * dx + 2.0 * pack[n, 3] * dx * dy + pack[n, 4] * dy * dy
                    if m > CUTOFF_M2:
                        continue
                    a = pack[n, 5] * math.exp(-0.5 * m)
                    clamped = False
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                        clamped = True
                    if a < ALPHA_MIN:
                        continue
                    buf_k[cnt] = n
                    buf_a[cnt] = a
                    buf_t[cnt] = T
                    buf_clamped[cnt] = clamped
                    cnt += 1
                    T *= 1.0 - a
                g0 = d_image[py, px, 0]
                g1 = d_image[py, px, 1]
                g2 = d_image[py, px, 2]
                d_bg[0] += g0 * T
                d_bg[1] += g1 * T
                d_bg[2] += g2 * T
                s0 = T * bg[0]
                s1 = T * bg[1]
                s2 = T * bg[2]
                for c in range(cnt - 1, -1, -1):
                    n = buf_k[c]
                    k = tile_gauss[start + n]
                    a = buf_a[c]
                    tk = buf_t[c]
                    w = a * tk
                    d_color[k, 0] += g0 * w
                    d_color[k, 1] += g1 * w
                    d_color[k, 2] += g2 * w
                    inv = 1.0 / (1.0 - a)
                    d_a = (g0 * (color[k, 0] * tk - s0 * inv)
                           + g1 * (color[k, 1] * tk - s1 * inv)
                           + g2 * (color[k, 2] * tk - s2 * inv))
                    s0 += color[k, 0] * w
                    s1 += color[k, 1] * w
                    s2 += color[k, 2] * w
                    if buf_clamped[c]:
                        continue
                    dx = px - mu2d[k, 0]
                    dy = py - mu2d[k, 1]
                    d_opacity[k] += d_a * a / opacity[k]
                    d_m = -0.5 * d_a * a
                    d_mu2d[k, 0] -= d_m * (2.0 * conic[k, 0] * dx + 2.0 * conic[k, 1] * dy)
                    d_mu2d[k, 1] -= d_m * (2.0 * conic[k, 1] * dx + 2.0 * conic[k, 2] * dy)
                    d_conic[k, 0] += d_m * dx * dx
                    d_conic[k, 1] += d_m * 2.0 * dx * dy
                    d_conic[k, 2] += d_m * dy * dy
    return d_mu2d, d_conic, d_opacity, d_color, d_bg
