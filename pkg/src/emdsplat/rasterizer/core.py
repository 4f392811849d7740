"""Tile-based splatting: preprocessing, binning, and the analytic adjoint.

:func:`rasterize` runs the forward pass and returns a :class:`Rasterization`
that can be reused for the backward pass without recomputing projection and
binning.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import scene as sc
from .._jit import default_backend
from ..errors import ShapeError
from . import _kernels_numba, _kernels_numpy

TILE_SIZE = 16

_BACKENDS = {"numba": _kernels_numba, "numpy": _kernels_numpy}


@dataclass
class RenderOutput:
    image: np.ndarray
    final_transmittance: np.ndarray
    tile_offsets: np.ndarray
    tile_gauss: np.ndarray
    tile_size: int = TILE_SIZE

    @property
    def per_tile_lists(self):
        """Depth-sorted Gaussian indices for every tile, row-major tile order."""
        o = self.tile_offsets
        return [self.tile_gauss[o[t]:o[t + 1]] for t in range(len(o) - 1)]


@dataclass
class RenderGrads:
    d_mu: np.ndarray
    d_scale: np.ndarray
    d_quat: np.ndarray
    d_opacity: np.ndarray
    d_sh: np.ndarray
    d_background: np.ndarray

    def as_dict(self):
        return {
            "mu": self.d_mu, "scale": self.d_scale, "quat": self.d_quat,
            "opacity": self.d_opacity, "sh": self.d_sh, "background": self.d_background,
        }


def _bin(mu2d, cov2d, depth, valid, width, height, tile):
    tiles_x = -(-width // tile)
    tiles_y = -(-height // tile)
    k = mu2d.shape[0]
    # bbox of the 3-sigma ellipse; tiny pad so boundary pixels are never lost to rounding
    rx = 3.0 * np.sqrt(np.maximum(cov2d[:, 0, 0], 0.0)) + 1e-6
    ry = 3.0 * np.sqrt(np.maximum(cov2d[:, 1, 1], 0.0)) + 1e-6
    with np.errstate(invalid="ignore"):
        x0 = np.ceil(mu2d[:, 0] - rx)
        x1 = np.floor(mu2d[:, 0] + rx)
        y0 = np.ceil(mu2d[:, 1] - ry)
        y1 = np.floor(mu2d[:, 1] + ry)
    hit = valid & (x1 >= 0) & (x0 <= width - 1) & (y1 >= 0) & (y0 <= height - 1)
    order = np.lexsort((np.arange(k), depth))
    order = order[hit[order]]
    tx0 = (np.clip(x0[order], 0, width - 1) // tile).astype(np.int64)
    tx1 = (np.clip(x1[order], 0, width - 1) // tile).astype(np.int64)
    ty0 = (np.clip(y0[order], 0, height - 1) // tile).astype(np.int64)
    ty1 = (np.clip(y1[order], 0, height - 1) // tile).astype(np.int64)
    nw = tx1 - tx0 + 1
    counts = nw * (ty1 - ty0 + 1)
    total = int(counts.sum())
    starts = np.cumsum(counts) - counts
    g = np.repeat(np.arange(len(order)), counts)
    local = np.arange(total) - np.repeat(starts, counts)
    tile_id = (ty0[g] + local // nw[g]) * tiles_x + tx0[g] + local % nw[g]
    perm = np.argsort(tile_id, kind="stable")
    tile_gauss = order[g[perm]].astype(np.int64)
    tile_offsets = np.zeros(tiles_x * tiles_y + 1, dtype=np.int64)
    np.cumsum(np.bincount(tile_id, minlength=tiles_x * tiles_y), out=tile_offsets[1:])
    return tile_offsets, tile_gauss, tiles_x


class Rasterization:
    """Forward state of one render, with its backward pass."""

    def __init__(self, scene: sc.GaussianSet, camera: sc.Camera, background, tile_size=TILE_SIZE,
                 backend=None):
        self.camera = camera
        self.tile_size = int(tile_size)
        self.backend = backend or default_backend()
        self.kernels = _BACKENDS[self.backend]
        self.background = np.asarray(background, dtype=np.float64).reshape(3)
        self.sh_degree = scene.sh_degree
        f64 = np.float64
        mu = scene.mu.astype(f64)
        self.sh = scene.sh.astype(f64)
        self.opacity = scene.opacity.astype(f64)
        rot, trans = camera.rotation, camera.translation
        p = mu @ rot.T + trans
        self.valid = p[:, 2] > sc.NEAR_PLANE
        p_safe = np.where(self.valid[:, None], p, np.array([0.0, 0.0, 1.0]))
        self.p = p_safe
        cov, self.cov_cache = sc.covariances(scene.quat.astype(f64), scene.scale.astype(f64))
        self.cov = cov
        jac = sc.perspective_jacobian(p_safe, camera.fx, camera.fy)
        self.m = jac @ rot
        cov2d = self.m @ cov @ np.swapaxes(self.m, -1, -2)
        cov2d[:, 0, 0] += sc.LOWPASS_PAD
        cov2d[:, 1, 1] += sc.LOWPASS_PAD
        self.cov2d = cov2d
        a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
        det = a * c - b * b
        self.conic = np.stack([c / det, -b / det, a / det], axis=1)
        self.mu2d = np.stack([
            camera.fx * p_safe[:, 0] / p_safe[:, 2] + camera.cx,
            camera.fy * p_safe[:, 1] / p_safe[:, 2] + camera.cy,
        ], axis=1)
        view = mu - camera.center
        self.view_norm = np.linalg.norm(view, axis=1, keepdims=True)
        self.view_norm[self.view_norm == 0] = 1.0
        self.dirs = view / self.view_norm
        self.basis = sc.sh_basis(self.dirs, self.sh_degree)
        raw = np.einsum("kb,kbc->kc", self.basis, self.sh)
        self.color_live = (raw > 0.0) & (raw < 1.0)
        self.color = np.clip(raw, 0.0, 1.0)
        self.depth = p[:, 2]

        self.tile_offsets, self.tile_gauss, self.tiles_x = _bin(
            self.mu2d, cov2d, self.depth, self.valid, camera.width, camera.height, self.tile_size)
        image, t_final = self.kernels.composite_forward(
            self.tile_offsets, self.tile_gauss, self.mu2d, self.conic, self.opacity,
            self.color, self.background, camera.width, camera.height, self.tile_size, self.tiles_x)
        self.output = RenderOutput(image, t_final, self.tile_offsets, self.tile_gauss, self.tile_size)

    @property
    def image(self):
        return self.output.image

    def pixel_trace(self, row, col):
        """Compositing steps at one pixel: list of ``(index, alpha, T_before)``.

        Mirrors the kernel's loop in plain Python; used for inspection and tests.
        """
        from ._kernels_numba import ALPHA_MAX, ALPHA_MIN, CUTOFF_M2

        t = (row // self.tile_size) * self.tiles_x + col // self.tile_size
        steps, trans = [], 1.0
        for k in self.tile_gauss[self.tile_offsets[t]:self.tile_offsets[t + 1]]:
            dx = col - self.mu2d[k, 0]
            dy = row - self.mu2d[k, 1]
            c = self.conic[k]
            m = c[0] * dx * dx + 2.0 * c[1] * dx * dy + c[2] * dy * dy
            if m > CUTOFF_M2:
                continue
            a = min(self.opacity[k] * np.exp(-0.5 * m), ALPHA_MAX)
            if a < ALPHA_MIN:
                continue
            steps.append((int(k), float(a), trans))
            trans *= 1.0 - a
        return steps

    def backward(self, d_image) -> RenderGrads:
        cam = self.camera
        d_image = np.asarray(d_image, dtype=np.float64)
        if d_image.shape != (cam.height, cam.width, 3):
            raise ShapeError(f"d_image has shape {d_image.shape}, expected {(cam.height, cam.width, 3)}")
        d_mu2d, d_conic, d_opacity, d_color, d_bg = self.kernels.composite_backward(
            self.tile_offsets, self.tile_gauss, self.mu2d, self.conic, self.opacity,
            self.color, self.background, cam.width, cam.height, self.tile_size, self.tiles_x,
            np.ascontiguousarray(d_image))
        invalid = ~self.valid
        d_mu2d[invalid] = 0.0
        d_conic[invalid] = 0.0

        # color: clamp then SH
        d_raw = np.where(self.color_live, d_color, 0.0)
        d_sh = self.basis[:, :, None] * d_raw[:, None, :]
        basis_grad = sc.sh_basis_grad(self.dirs, self.sh_degree)
        d_dir = np.einsum("kbc,kc,kbi->ki", self.sh, d_raw, basis_grad)
        d_mu = (d_dir - self.dirs * np.sum(self.dirs * d_dir, axis=1, keepdims=True)) / self.view_norm

        # conic -> screen covariance
        cn = self.conic
        conic_mat = np.stack([cn[:, 0], cn[:, 1], cn[:, 1], cn[:, 2]], axis=1).reshape(-1, 2, 2)
        g_conic = np.stack([d_conic[:, 0], 0.5 * d_conic[:, 1], 0.5 * d_conic[:, 1], d_conic[:, 2]],
                           axis=1).reshape(-1, 2, 2)
        d_cov2d = -conic_mat @ g_conic @ conic_mat

        # screen covariance -> world covariance and projection Jacobian
        m = self.m
        d_cov = np.swapaxes(m, -1, -2) @ d_cov2d @ m
        d_m = 2.0 * d_cov2d @ m @ self.cov
        d_jac = d_m @ cam.rotation.T

        x, y, z = self.p[:, 0], self.p[:, 1], self.p[:, 2]
        fx, fy = cam.fx, cam.fy
        z2 = z * z
        z3 = z2 * z
        d_p = np.zeros_like(self.p)
        d_p[:, 0] = -fx / z2 * d_jac[:, 0, 2] + fx / z * d_mu2d[:, 0]
        d_p[:, 1] = -fy / z2 * d_jac[:, 1, 2] + fy / z * d_mu2d[:, 1]
        d_p[:, 2] = (-fx / z2 * d_jac[:, 0, 0] + 2 * fx * x / z3 * d_jac[:, 0, 2]
                     - fy / z2 * d_jac[:, 1, 1] + 2 * fy * y / z3 * d_jac[:, 1, 2]
                     - fx * x / z2 * d_mu2d[:, 0] - fy * y / z2 * d_mu2d[:, 1])
        d_p[invalid] = 0.0
        d_cov[invalid] = 0.0
        d_mu += d_p @ cam.rotation
        d_quat, d_scale = sc.covariances_backward(self.cov_cache, d_cov)
        return RenderGrads(d_mu, d_scale, d_quat, d_opacity, d_sh, d_bg)


def rasterize(scene, camera, background, tile_size=TILE_SIZE, backend=None) -> Rasterization:
    return Rasterization(scene, camera, background, tile_size=tile_size, backend=backend)


def render(scene, camera, background, tile_size=TILE_SIZE, backend=None) -> RenderOutput:
    """Front-to-back alpha compositing of ``scene`` seen from ``camera``."""
    return rasterize(scene, camera, background, tile_size=tile_size, backend=backend).output


def render_backward(scene, camera, background, d_image, tile_size=TILE_SIZE, backend=None) -> RenderGrads:
    """Gradients of ``sum(d_image * render(...).image)`` w.r.t. every scene parameter."""
    return rasterize(scene, camera, background, tile_size=tile_size, backend=backend).backward(d_image)
