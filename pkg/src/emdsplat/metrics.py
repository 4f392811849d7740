"""PSNR and SSIM (plus masked variants and the SSIM gradient used for training)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyRegionError, ShapeError

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DATA_RANGE = 1.0
C1 = (SSIM_K1 * DATA_RANGE) ** 2
C2 = (SSIM_K2 * DATA_RANGE) ** 2


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b):
    """``10 log10(1 / MSE)`` over all pixels and channels; identical images give 99 dB."""
    a, b = _check_pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(DATA_RANGE ** 2 / mse)))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x, g):
    """Separable 'valid' correlation over the first two axes."""
    k = len(g)
    win = np.lib.stride_tricks.sliding_window_view(x, k, axis=0)
    x = np.einsum("i...k,k->i...", win, g)
    win = np.lib.stride_tricks.sliding_window_view(x, k, axis=1)
    return np.einsum("ij...k,k->ij...", win, g)


def _filter_valid_adjoint(y, g, shape):
    """Adjoint of :func:`_filter_valid`: scatter a valid-size map back to ``shape``."""
    k = len(g)
    h, w = shape[:2]
    tmp = np.zeros((y.shape[0], w) + y.shape[2:])
    for j in range(k):
        tmp[:, j:j + y.shape[1]] += g[j] * y
    out = np.zeros((h, w) + y.shape[2:])
    for i in range(k):
        out[i:i + y.shape[0]] += g[i] * tmp
    return out


def _ssim_terms(a, b):
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ShapeError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape[:2]}")
    g = gaussian_window()
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    s_aa = _filter_valid(a * a, g) - mu_a ** 2
    s_bb = _filter_valid(b * b, g) - mu_b ** 2
    s_ab = _filter_valid(a * b, g) - mu_a * mu_b
    num1 = 2 * mu_a * mu_b + C1
    num2 = 2 * s_ab + C2
    den1 = mu_a ** 2 + mu_b ** 2 + C1
    den2 = s_aa + s_bb + C2
    smap = (num1 * num2) / (den1 * den2)
    return a, b, g, mu_a, mu_b, num1, num2, den1, den2, smap


def ssim_map(a, b):
    """Local SSIM at every valid window position, per channel: ``(H-10, W-10, C)``."""
    a, b = _check_pair(a, b)
    return _ssim_terms(a, b)[-1]


def ssim(a, b):
    """Mean SSIM (11x11 Gaussian window, sigma 1.5, K1=0.01, K2=0.03), channels averaged."""
    return float(np.mean(ssim_map(a, b)))


def ssim_with_grad(a, b):
    """Mean SSIM and its gradient with respect to ``a``."""
    a0, b0 = _check_pair(a, b)
    a, b, g, mu_a, mu_b, num1, num2, den1, den2, smap = _ssim_terms(a0, b0)
    n = smap.size
    d_s = 1.0 / n
    # smap = num1 * num2 / (den1 * den2)
    d_num1 = d_s * num2 / (den1 * den2)
    d_num2 = d_s * num1 / (den1 * den2)
    d_den1 = -d_s * smap / den1
    d_den2 = -d_s * smap / den2
    # num1 = 2 mu_a mu_b + C1, den1 = mu_a^2 + mu_b^2 + C1
    # num2 = 2 (f(ab) - mu_a mu_b) + C2, den2 = f(aa) - mu_a^2 + f(bb) - mu_b^2 + C2
    d_mu_a = 2 * mu_b * d_num1 + 2 * mu_a * d_den1 - 2 * mu_b * d_num2 - 2 * mu_a * d_den2
    d_f_ab = 2 * d_num2
    d_f_aa = d_den2
    shape = a.shape
    grad = (_filter_valid_adjoint(d_mu_a, g, shape)
            + 2 * a * _filter_valid_adjoint(d_f_aa, g, shape)
            + b * _filter_valid_adjoint(d_f_ab, g, shape))
    return float(np.mean(smap)), grad.reshape(a0.shape)


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    masked_psnr: float | None = None
    masked_ssim: float | None = None
    per_frame: list = field(default_factory=list)

    def to_dict(self):
        return {
            "psnr": self.psnr, "ssim": self.ssim,
            "masked_psnr": self.masked_psnr, "masked_ssim": self.masked_ssim,
            "per_frame": self.per_frame,
        }


def masked_psnr(a, b, mask):
    a, b = _check_pair(a, b)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape[:2]:
        raise ShapeError(f"mask shape {mask.shape} does not match image {a.shape[:2]}")
    if not mask.any():
        raise EmptyRegionError("mask selects no pixels")
    return psnr(a[mask], b[mask])


def masked_ssim(a, b, mask):
    """Mean local SSIM over windows centred on mask pixels.

    Centres are clamped into the valid window range, so mask pixels closer
    than half a window to the border use the nearest full window.
    """
    a, b = _check_pair(a, b)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape[:2]:
        raise ShapeError(f"mask shape {mask.shape} does not match image {a.shape[:2]}")
    if not mask.any():
        raise EmptyRegionError("mask selects no pixels")
    r = SSIM_WINDOW // 2
    h, w = mask.shape
    ys, xs = np.nonzero(mask)
    # crop to the bounding box grown by the window radius
    y0 = max(0, min(ys.min() - r, h - SSIM_WINDOW))
    x0 = max(0, min(xs.min() - r, w - SSIM_WINDOW))
    y1 = min(h, max(ys.max() + r + 1, y0 + SSIM_WINDOW))
    x1 = min(w, max(xs.max() + r + 1, x0 + SSIM_WINDOW))
    smap = ssim_map(a[y0:y1, x0:x1], b[y0:y1, x0:x1])
    cy = np.clip(ys - y0 - r, 0, smap.shape[0] - 1)
    cx = np.clip(xs - x0 - r, 0, smap.shape[1] - 1)
    centres = np.unique(cy * smap.shape[1] + cx)
    vals = smap.reshape(-1, smap.shape[-1] if smap.ndim == 3 else 1)[centres]
    return float(np.mean(vals))


def masked_metrics(a, b, mask) -> MetricReport:
    return MetricReport(psnr(a, b), ssim(a, b), masked_psnr(a, b, mask), masked_ssim(a, b, mask))
