"""Vectorized numpy versions of the compositing kernels (one tile at a time)."""
import numpy as np

from ._kernels_numba import ALPHA_MAX, ALPHA_MIN, CUTOFF_M2


def _tile_alphas(ids, px, py, mu2d, conic, opacity):
    dx = px[:, None] - mu2d[ids, 0][None, :]
    dy = py[:, None] - mu2d[ids, 1][None, :]
    c = conic[ids]
    m = c[:, 0] * dx * dx + 2.0 * c[:, 1] * dx * dy + c[:, 2] * dy * dy
    with np.errstate(over="ignore"):
        a = opacity[ids][None, :] * np.exp(-0.5 * m)
    clamped = a > ALPHA_MAX
    a = np.where(clamped, ALPHA_MAX, a)
    keep = (m <= CUTOFF_M2) & (a >= ALPHA_MIN)
    a = np.where(keep, a, 0.0)
    one_minus = 1.0 - a
    t_incl = np.cumprod(one_minus, axis=1)
    t_excl = np.concatenate([np.ones((a.shape[0], 1)), t_incl[:, :-1]], axis=1)
    t_final = t_incl[:, -1] if a.shape[1] else np.ones(a.shape[0])
    return dx, dy, a, keep & ~clamped, t_excl, t_final


def _tile_pixels(t, tiles_x, tile, width, height):
    ty, tx = divmod(t, tiles_x)
    ys = np.arange(ty * tile, min((ty + 1) * tile, height))
    xs = np.arange(tx * tile, min((tx + 1) * tile, width))
    py, px = np.meshgrid(ys, xs, indexing="ij")
    return ys, xs, px.ravel().astype(np.float64), py.ravel().astype(np.float64)


def composite_forward(tile_offsets, tile_gauss, mu2d, conic, opacity, color, bg,
                      width, height, tile, tiles_x):
    image = np.empty((height, width, 3))
    trans = np.empty((height, width))
    for t in range(len(tile_offsets) - 1):
        ids = tile_gauss[tile_offsets[t]:tile_offsets[t + 1]]
        ys, xs, px, py = _tile_pixels(t, tiles_x, tile, width, height)
        _, _, a, _, t_excl, t_final = _tile_alphas(ids, px, py, mu2d, conic, opacity)
        rgb = (a * t_excl) @ color[ids] + t_final[:, None] * bg[None, :]
        image[ys[0]:ys[-1] + 1, xs[0]:xs[-1] + 1] = rgb.reshape(len(ys), len(xs), 3)
        trans[ys[0]:ys[-1] + 1, xs[0]:xs[-1] + 1] = t_final.reshape(len(ys), len(xs))
    return image, trans


def composite_backward(tile_offsets, tile_gauss, mu2d, conic, opacity, color, bg,
                       width, height, tile, tiles_x, d_image):
    k_total = mu2d.shape[0]
    d_mu2d = np.zeros((k_total, 2))
    d_conic = np.zeros((k_total, 3))
    d_opacity = np.zeros(k_total)
    d_color = np.zeros((k_total, 3))
    d_bg = np.zeros(3)
    for t in range(len(tile_offsets) - 1):
        ids = tile_gauss[tile_offsets[t]:tile_offsets[t + 1]]
        ys, xs, px, py = _tile_pixels(t, tiles_x, tile, width, height)
        g = d_image[ys[0]:ys[-1] + 1, xs[0]:xs[-1] + 1].reshape(-1, 3)
        dx, dy, a, live, t_excl, t_final = _tile_alphas(ids, px, py, mu2d, conic, opacity)
        d_bg += g.T @ t_final
        if not len(ids):
            continue
        w = a * t_excl
        col = color[ids]
        d_color[ids] += w.T @ g
        contrib = w[:, :, None] * col[None, :, :]
        behind = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1] - contrib
        behind += (t_final[:, None] * bg[None, :])[:, None, :]
        d_a = np.einsum("pc,pkc->pk", g, col[None, :, :] * t_excl[:, :, None]
                        - behind / (1.0 - a)[:, :, None])
        d_a = np.where(live, d_a, 0.0)
        op = opacity[ids]
        safe_op = np.where(op > 0, op, 1.0)
        d_opacity[ids] += np.sum(d_a * a, axis=0) / safe_op
        d_m = -0.5 * d_a * a
        c = conic[ids]
        d_mu2d[ids, 0] -= np.sum(d_m * (2.0 * c[:, 0] * dx + 2.0 * c[:, 1] * dy), axis=0)
        d_mu2d[ids, 1] -= np.sum(d_m * (2.0 * c[:, 1] * dx + 2.0 * c[:, 2] * dy), axis=0)
        d_conic[ids, 0] += np.sum(d_m * dx * dx, axis=0)
        d_conic[ids, 1] += np.sum(d_m * 2.0 * dx * dy, axis=0)
        d_conic[ids, 2] += np.sum(d_m * dy * dy, axis=0)
    return d_mu2d, d_conic, d_opacity, d_color, d_bg
