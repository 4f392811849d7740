"""Gaussian scene types and the per-Gaussian math shared by rendering and deformation.

Quaternions are stored (w, x, y, z). Batched helpers take leading batch axes;
every ``*_backward`` function maps upstream gradients of the forward output to
gradients of its inputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    DegenerateCovarianceError,
    NormalizationError,
    ShapeError,
)

NEAR_PLANE = 0.01
LOWPASS_PAD = 0.3
MAX_SH_DEGREE = 2
QUAT_TOL = 1e-6

# real spherical harmonics, standard table (no Condon-Shortley phase)
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2_XY = 1.0925484305920792
SH_C2_Z = 0.31539156525252005
SH_C2_XX = 0.5462742152960396


def num_sh_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def sh_degree_from_count(count: int) -> int:
    degree = int(round(np.sqrt(count))) - 1
    if degree < 0 or num_sh_coeffs(degree) != count:
        raise ShapeError(f"{count} is not a valid SH coefficient count")
    return degree


@dataclass
class GaussianSet:
    """Per-Gaussian parameter arrays.

    ``sh`` is ``(K, (L+1)**2, 3)``; ``embed`` is ``(K, D_g)`` and may have zero
    columns. The constructor only checks shapes; call :meth:`validate` to
    enforce the value invariants (unit quaternions, positive scales, opacity
    range).
    """

    mu: np.ndarray
    scale: np.ndarray
    quat: np.ndarray
    opacity: np.ndarray
    sh: np.ndarray
    embed: np.ndarray = None

    def __post_init__(self):
        k = self.mu.shape[0]
        if self.embed is None:
            self.embed = np.zeros((k, 0), dtype=self.mu.dtype)
        expected = {
            "mu": (k, 3),
            "scale": (k, 3),
            "quat": (k, 4),
            "opacity": (k,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.sh.ndim != 3 or self.sh.shape[0] != k or self.sh.shape[2] != 3:
            raise ShapeError(f"sh has shape {self.sh.shape}, expected ({k}, (L+1)^2, 3)")
        sh_degree_from_count(self.sh.shape[1])
        if self.embed.ndim != 2 or self.embed.shape[0] != k:
            raise ShapeError(f"embed row count {self.embed.shape[0]} != {k}")

    @property
    def count(self) -> int:
        return self.mu.shape[0]

    @property
    def sh_degree(self) -> int:
        return sh_degree_from_count(self.sh.shape[1])

    def validate(self) -> "GaussianSet":
        norms = np.linalg.norm(self.quat, axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > QUAT_TOL)
        if bad.size:
            raise NormalizationError(f"quaternion {bad[0]} has norm {norms[bad[0]]!r}")
        if np.any(self.scale <= 0):
            raise ValueError("scales must be strictly positive")
        if np.any((self.opacity < 0) | (self.opacity > 1)):
            raise ValueError("opacities must lie in [0, 1]")
        return self

    def copy(self) -> "GaussianSet":
        return GaussianSet(
            self.mu.copy(), self.scale.copy(), self.quat.copy(),
            self.opacity.copy(), self.sh.copy(), self.embed.copy(),
        )

    def astype(self, dtype) -> "GaussianSet":
        return GaussianSet(*(getattr(self, n).astype(dtype) for n in self.field_names()))

    def subset(self, index) -> "GaussianSet":
        return GaussianSet(*(getattr(self, n)[index] for n in self.field_names()))

    @staticmethod
    def field_names():
        return ("mu", "scale", "quat", "opacity", "sh", "embed")

    @classmethod
    def concat(cls, sets) -> "GaussianSet":
        sets = list(sets)
        return cls(*(np.concatenate([getattr(s, n) for s in sets]) for n in cls.field_names()))

    @classmethod
    def empty(cls, sh_degree=0, embed_dim=0) -> "GaussianSet":
        nc = num_sh_coeffs(sh_degree)
        return cls(
            np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0),
            np.zeros((0, nc, 3)), np.zeros((0, embed_dim)),
        )


@dataclass
class Camera:
    """Pinhole camera. Pixel (row i, col j) samples image coordinate (j, i)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise ShapeError(f"camera resolution must be positive, got {self.width}x{self.height}")
        self.width = int(self.width)
        self.height = int(self.height)
        r = self.rotation
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6) or abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValueError("camera rotation must be orthonormal with determinant +1")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def with_pose(self, rotation, translation) -> "Camera":
        return replace(self, rotation=rotation, translation=translation)

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, cx=None, cy=None) -> "Camera":
        """Camera at ``eye`` looking at ``target``; camera axes are x right, y down, z forward."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, -np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        cx = (width - 1) / 2.0 if cx is None else cx
        cy = (height - 1) / 2.0 if cy is None else cy
        return cls(fx, fy, cx, cy, width, height, rot, -rot @ eye)

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx), "fy": float(self.fy),
            "cx": float(self.cx), "cy": float(self.cy),
            "width": self.width, "height": self.height,
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "Camera":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"],
                   np.array(d["rotation"]), np.array(d["translation"]))


@dataclass
class Projected2D:
    mu2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    culled: bool = False


# ---------------------------------------------------------------------------
# quaternions

def quat_normalize(q):
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    return q / n, n


def quat_normalize_backward(q_hat, norm, d_hat):
    proj = np.sum(q_hat * d_hat, axis=-1, keepdims=True)
    return (d_hat - q_hat * proj) / norm


def quat_to_rotmat(q):
    """Rotation matrices for (already normalized) quaternions, shape ``(..., 3, 3)``."""
    w, x, y, z = np.moveaxis(q, -1, 0)
    r = np.empty(q.shape[:-1] + (3, 3), dtype=np.result_type(q, np.float64))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def quat_to_rotmat_backward(q, d_r):
    w, x, y, z = np.moveaxis(q, -1, 0)
    g = d_r
    dw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    dx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2 * x * g[..., 1, 1]
              - w * g[..., 1, 2] + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    dy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0]
              + z * g[..., 1, 2] - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    dz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0]
              - 2 * z * g[..., 1, 1] + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1])
    return np.stack([dw, dx, dy, dz], axis=-1)


def _left_matrix(p):
    w, x, y, z = np.moveaxis(p, -1, 0)
    return np.stack([
        np.stack([w, -x, -y, -z], -1),
        np.stack([x, w, -z, y], -1),
        np.stack([y, z, w, -x], -1),
        np.stack([z, -y, x, w], -1),
    ], -2)


def _right_matrix(q):
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack([
        np.stack([w, -x, -y, -z], -1),
        np.stack([x, w, z, -y], -1),
        np.stack([y, -z, w, x], -1),
        np.stack([z, y, -x, w], -1),
    ], -2)


def quat_multiply(p, q):
    """Hamilton product ``p ⊗ q`` (broadcasting over leading axes)."""
    pw, px, py, pz = np.moveaxis(np.asarray(p), -1, 0)
    qw, qx, qy, qz = np.moveaxis(np.asarray(q), -1, 0)
    return np.stack([
        pw * qw - px * qx - py * qy - pz * qz,
        pw * qx + px * qw + py * qz - pz * qy,
        pw * qy - px * qz + py * qw + pz * qx,
        pw * qz + px * qy - py * qx + pz * qw,
    ], axis=-1)


def quat_multiply_backward(p, q, d_r):
    """Gradients of ``p ⊗ q`` with respect to ``p`` and ``q``."""
    d_p = np.einsum("...ji,...j->...i", _right_matrix(q), d_r)
    d_q = np.einsum("...ji,...j->...i", _left_matrix(p), d_r)
    return d_p, d_q


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


def rotmat_to_quat(r):
    """Unit quaternion with non-negative w for a single rotation matrix."""
    r = np.asarray(r, dtype=np.float64)
    tr = np.trace(r)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s])
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
        q = np.array([(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s])
    elif r[1, 1] > r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
        q = np.array([(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
        q = np.array([(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s])
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


# ---------------------------------------------------------------------------
# density and covariance

def gaussian_density(x, mu, cov, max_condition=1e12):
    """Unnormalized Gaussian ``exp(-0.5 (x-mu)^T cov^-1 (x-mu))``."""
    cov = np.asarray(cov, dtype=np.float64)
    if np.linalg.cond(cov) > max_condition:
        raise DegenerateCovarianceError("covariance is singular or ill-conditioned")
    d = np.asarray(x, dtype=np.float64) - np.asarray(mu, dtype=np.float64)
    return float(np.exp(-0.5 * d @ np.linalg.solve(cov, d)))


def covariance_from_rotation_scale(q, s):
    q = np.asarray(q, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if abs(np.linalg.norm(q) - 1.0) > QUAT_TOL:
        raise NormalizationError(f"quaternion norm {np.linalg.norm(q)!r} is not 1; normalize first")
    if np.any(s <= 0):
        raise ValueError("scales must be positive")
    m = quat_to_rotmat(q) * s[None, :]
    return m @ m.T


def covariances(quat, scale):
    """Batched covariances; quaternions are normalized internally.

    Returns ``(cov, cache)`` where the cache feeds :func:`covariances_backward`.
    """
    q_hat, norm = quat_normalize(quat)
    rot = quat_to_rotmat(q_hat)
    m = rot * scale[:, None, :]
    cov = m @ np.swapaxes(m, -1, -2)
    return cov, (q_hat, norm, rot, m, scale)


def covariances_backward(cache, d_cov):
    q_hat, norm, rot, m, scale = cache
    d_sym = 0.5 * (d_cov + np.swapaxes(d_cov, -1, -2))
    d_m = 2.0 * d_sym @ m
    d_rot = d_m * scale[:, None, :]
    d_scale = np.sum(d_m * rot, axis=-2)
    d_qhat = quat_to_rotmat_backward(q_hat, d_rot)
    return quat_normalize_backward(q_hat, norm, d_qhat), d_scale


# ---------------------------------------------------------------------------
# spherical harmonics

def sh_basis(dirs, degree):
    """Real SH basis at unit directions, shape ``(..., (L+1)**2)``."""
    if degree < 0 or degree > MAX_SH_DEGREE:
        raise ShapeError(f"SH degree {degree} unsupported (0..{MAX_SH_DEGREE})")
    x, y, z = np.moveaxis(dirs, -1, 0)
    cols = [np.full_like(x, SH_C0)]
    if degree >= 1:
        cols += [SH_C1 * y, SH_C1 * z, SH_C1 * x]
    if degree >= 2:
        cols += [
            SH_C2_XY * x * y,
            SH_C2_XY * y * z,
            SH_C2_Z * (2 * z * z - x * x - y * y),
            SH_C2_XY * x * z,
            SH_C2_XX * (x * x - y * y),
        ]
    return np.stack(cols, axis=-1)


def sh_basis_grad(dirs, degree):
    """Derivative of each basis function w.r.t. the direction, ``(..., (L+1)**2, 3)``."""
    x, y, z = np.moveaxis(dirs, -1, 0)
    zero = np.zeros_like(x)
    rows = [np.stack([zero, zero, zero], -1)]
    if degree >= 1:
        c = np.full_like(x, SH_C1)
        rows += [np.stack([zero, c, zero], -1), np.stack([zero, zero, c], -1), np.stack([c, zero, zero], -1)]
    if degree >= 2:
        rows += [
            SH_C2_XY * np.stack([y, x, zero], -1),
            SH_C2_XY * np.stack([zero, z, y], -1),
            SH_C2_Z * np.stack([-2 * x, -2 * y, 4 * z], -1),
            SH_C2_XY * np.stack([z, zero, x], -1),
            SH_C2_XX * np.stack([2 * x, -2 * y, zero], -1),
        ]
    return np.stack(rows, axis=-2)


def sh_eval(coeffs, direction, degree):
    """View-dependent color ``sum_lm k_lm Y_lm(d)`` for one Gaussian, per channel."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape != (num_sh_coeffs(degree), 3):
        raise ShapeError(f"expected {num_sh_coeffs(degree)}x3 coefficients for degree {degree}, got {coeffs.shape}")
    basis = sh_basis(np.asarray(direction, dtype=np.float64), degree)
    return basis @ coeffs


# ---------------------------------------------------------------------------
# projection

def perspective_jacobian(p_cam, fx, fy):
    """Local affine Jacobian of the pinhole map at camera-space points, ``(K, 2, 3)``."""
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    jac = np.zeros((p_cam.shape[0], 2, 3))
    jac[:, 0, 0] = fx / z
    jac[:, 0, 2] = -fx * x / (z * z)
    jac[:, 1, 1] = fy / z
    jac[:, 1, 2] = -fy * y / (z * z)
    return jac


def project_gaussian(mu, cov, camera: Camera) -> Projected2D:
    """Screen-space mean and covariance of one Gaussian.

    Points at or behind the near plane come back with ``culled=True`` and NaN
    screen quantities.
    """
    p = camera.rotation @ np.asarray(mu, dtype=np.float64) + camera.translation
    if p[2] <= NEAR_PLANE:
        return Projected2D(np.full(2, np.nan), np.full((2, 2), np.nan), float(p[2]), culled=True)
    mu2d = np.array([camera.fx * p[0] / p[2] + camera.cx, camera.fy * p[1] / p[2] + camera.cy])
    m = perspective_jacobian(p[None], camera.fx, camera.fy)[0] @ camera.rotation
    cov2d = m @ np.asarray(cov, dtype=np.float64) @ m.T + LOWPASS_PAD * np.eye(2)
    return Projected2D(mu2d, cov2d, float(p[2]))
