"""Independent reference implementations used by the tests.

Everything here works one Gaussian or one pixel at a time with plain loops,
and shares no code path with the vectorized / jitted engine beyond the
single-Gaussian scene helpers.
"""
import math

import numpy as np

from emdsplat import scene as sc

ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
CUTOFF = 9.0


def small_camera(width=16, height=16, focal=18.0):
    return sc.Camera(focal, focal, width / 2.0, height / 2.0, width, height, np.eye(3), np.zeros(3))


def random_scene(rng, k, sh_degree=1, embed_dim=0, depth=(2.5, 5.0), spread=0.6, scale=(0.08, 0.3),
                 opacity=(0.2, 0.9)):
    """``k`` Gaussians in front of a camera at the origin looking down +z."""
    nc = sc.num_sh_coeffs(sh_degree)
    z = rng.uniform(*depth, size=k)
    mu = np.stack([rng.uniform(-spread, spread, k) * z / 3.0, rng.uniform(-spread, spread, k) * z / 3.0, z], 1)
    quat = rng.normal(size=(k, 4))
    quat /= np.linalg.norm(quat, axis=1, keepdims=True)
    sh = rng.normal(0.0, 0.15, size=(k, nc, 3))
    sh[:, 0, :] = rng.uniform(0.2, 0.8, size=(k, 3)) / sc.SH_C0
    return sc.GaussianSet(mu, rng.uniform(*scale, size=(k, 3)), quat, rng.uniform(*opacity, size=k), sh,
                          rng.normal(0.0, 0.3, size=(k, embed_dim)))


def projected(scene, camera):
    """Per-Gaussian (mu2d, inverse cov2d, depth, color, culled) via the single-Gaussian routines."""
    out = []
    center = camera.center
    for k in range(scene.count):
        q = scene.quat[k] / np.linalg.norm(scene.quat[k])
        cov = sc.covariance_from_rotation_scale(q, scene.scale[k])
        p = sc.project_gaussian(scene.mu[k], cov, camera)
        d = scene.mu[k] - center
        raw = sc.sh_eval(scene.sh[k], d / np.linalg.norm(d), scene.sh_degree)
        out.append((p.mu2d, None if p.culled else np.linalg.inv(p.cov2d), p.depth, raw, p.culled))
    return out


def composite_pixel(entries, opacity, background, x, y):
    """Scalar front-to-back compositing at image point (x, y). Returns (color, T_final, steps)."""
    order = sorted(range(len(entries)), key=lambda k: (entries[k][2], k))
    color = [0.0, 0.0, 0.0]
    trans = 1.0
    steps = []
    for k in order:
        mu2d, inv, _, raw, culled = entries[k]
        if culled:
            continue
        dx, dy = x - mu2d[0], y - mu2d[1]
        m = inv[0, 0] * dx * dx + (inv[0, 1] + inv[1, 0]) * dx * dy + inv[1, 1] * dy * dy
        if m > CUTOFF:
            continue
        a = min(opacity[k] * math.exp(-0.5 * m), ALPHA_MAX)
        if a < ALPHA_MIN:
            continue
        c = [min(max(v, 0.0), 1.0) for v in raw]
        for ch in range(3):
            color[ch] += c[ch] * a * trans
        steps.append((k, a, trans))
        trans *= 1.0 - a
    return [color[ch] + trans * background[ch] for ch in range(3)], trans, steps


def render_oracle(scene, camera, background):
    entries = projected(scene, camera)
    img = np.zeros((camera.height, camera.width, 3))
    trans = np.zeros((camera.height, camera.width))
    for i in range(camera.height):
        for j in range(camera.width):
            c, t, _ = composite_pixel(entries, scene.opacity, background, j, i)
            img[i, j] = c
            trans[i, j] = t
    return img, trans


def cutoff_margin(scene, camera):
    """Smallest distance of any pixel/Gaussian pair (and any color) from a non-smooth point.

    Returns a dict of margins: Mahalanobis distance to the 3-sigma cutoff,
    alpha distance to the 1/255 skip and 0.99 clamp (relative), and raw color
    distance to the [0, 1] clamp.
    """
    entries = projected(scene, camera)
    m_margin, a_lo, a_hi, c_margin = np.inf, np.inf, np.inf, np.inf
    for k, (mu2d, inv, _, raw, culled) in enumerate(entries):
        if culled:
            continue
        c_margin = min(c_margin, float(np.min(np.minimum(np.abs(raw), np.abs(1.0 - raw)))))
        for i in range(camera.height):
            for j in range(camera.width):
                dx, dy = j - mu2d[0], i - mu2d[1]
                m = inv[0, 0] * dx * dx + 2 * inv[0, 1] * dx * dy + inv[1, 1] * dy * dy
                m_margin = min(m_margin, abs(m - CUTOFF))
                if m <= CUTOFF:
                    a = scene.opacity[k] * math.exp(-0.5 * m)
                    a_lo = min(a_lo, abs(a - ALPHA_MIN) / ALPHA_MIN)
                    a_hi = min(a_hi, abs(a - ALPHA_MAX))
    return {"mahalanobis": m_margin, "alpha_min": a_lo, "alpha_max": a_hi, "color": c_margin}


def smooth_enough(margins, m_tol=0.05, a_tol=0.02, c_tol=0.02):
    return (margins["mahalanobis"] > m_tol and margins["alpha_min"] > a_tol
            and margins["alpha_max"] > a_tol and margins["color"] > c_tol)


def rodrigues(omega):
    """Rotation matrix from axis-angle by summing the matrix exponential series."""
    w = np.asarray(omega, dtype=np.float64)
    k = np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])
    out = np.eye(3)
    term = np.eye(3)
    for n in range(1, 40):
        term = term @ k / n
        out = out + term
    return out


def psnr_oracle(a, b):
    mse = sum((float(x) - float(y)) ** 2 for x, y in zip(np.ravel(a), np.ravel(b))) / np.size(a)
    return 10.0 * math.log10(1.0 / mse)


def ssim_oracle(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03):
    """Direct SSIM: explicit 2-D Gaussian window at each valid position, per channel."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    r = np.arange(window) - (window - 1) / 2
    g1 = np.exp(-r**2 / (2 * sigma**2))
    w = np.outer(g1, g1)
    w /= w.sum()
    c1, c2 = (k1) ** 2, (k2) ** 2
    vals = []
    for ch in range(a.shape[2]):
        for i in range(a.shape[0] - window + 1):
            for j in range(a.shape[1] - window + 1):
                pa = a[i:i + window, j:j + window, ch]
                pb = b[i:i + window, j:j + window, ch]
                ma, mb = np.sum(w * pa), np.sum(w * pb)
                va = np.sum(w * (pa - ma) ** 2)
                vb = np.sum(w * (pb - mb) ** 2)
                cab = np.sum(w * (pa - ma) * (pb - mb))
                vals.append((2 * ma * mb + c1) * (2 * cab + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))
