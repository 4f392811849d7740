"""Dual-scale correction of tracked object poses and object-to-world placement.

A correction is two axis-angle vectors (coarse + fine) and two translations.
The corrected pose is ``R' = R exp([w_c + w_f]_x)``, ``T' = T + dT_c + dT_f``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import scene as sc
from .errors import OutOfRegimeError


@dataclass
class TrackedPose:
    rotation: np.ndarray
    translation: np.ndarray
    t_index: int = 0
    object_id: int = 0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        r = self.rotation
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6) or abs(np.linalg.det(r) - 1) > 1e-6:
            raise ValueError("tracked rotation must be orthonormal with determinant +1")


@dataclass
class PoseCorrection:
    omega_c: np.ndarray
    omega_f: np.ndarray
    dT_c: np.ndarray
    dT_f: np.ndarray

    @classmethod
    def zero(cls):
        return cls(np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(3))

    @property
    def omega(self):
        return np.asarray(self.omega_c, dtype=np.float64) + np.asarray(self.omega_f, dtype=np.float64)


def skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(omega):
    """Rodrigues' formula."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega)
    if theta < 1e-12:
        return np.eye(3) + skew(omega)
    k = skew(omega / theta)
    return np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)


def so3_log(r):
    """Axis-angle vector of a rotation matrix (angle in [0, pi])."""
    cos = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos)
    if theta < 1e-12:
        return np.zeros(3)
    v = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if np.pi - theta < 1e-6:
        # near pi: axis from the symmetric part
        b = (r + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diag(b), 0.0))
        i = int(np.argmax(axis))
        axis = b[:, i] / np.sqrt(b[i, i])
        return theta * axis / np.linalg.norm(axis)
    return theta * v / (2.0 * np.sin(theta))


def geodesic_angle(r_a, r_b):
    """Angle of the relative rotation ``r_a^T r_b`` in radians."""
    cos = np.clip((np.trace(np.asarray(r_a).T @ np.asarray(r_b)) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.arccos(cos))


def quat_exp(omega):
    """Unit quaternion of an axis-angle vector, batched over leading axes."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega, axis=-1, keepdims=True)
    half = 0.5 * theta
    small = theta < 1e-6
    safe = np.where(small, 1.0, theta)
    f = np.where(small, 0.5 - theta ** 2 / 48.0, np.sin(half) / safe)
    return np.concatenate([np.cos(half), f * omega], axis=-1)


def quat_exp_backward(omega, d_q):
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega, axis=-1, keepdims=True)
    half = 0.5 * theta
    small = theta < 1e-6
    safe = np.where(small, 1.0, theta)
    f = np.where(small, 0.5 - theta ** 2 / 48.0, np.sin(half) / safe)
    # f'(theta) / theta
    fp_over_theta = np.where(small, -1.0 / 24.0,
                             (0.5 * safe * np.cos(half) - np.sin(half)) / safe ** 3)
    d_w = d_q[..., :1]
    d_v = d_q[..., 1:]
    proj = np.sum(omega * d_v, axis=-1, keepdims=True)
    return -0.5 * f * omega * d_w + f * d_v + fp_over_theta * omega * proj


def _check_regime(omega):
    mag = np.linalg.norm(omega, axis=-1)
    if np.any(mag >= np.pi):
        raise OutOfRegimeError(f"rotation correction magnitude {float(np.max(mag)):.4f} >= pi")


def correct_pose(pose: TrackedPose, corr: PoseCorrection):
    """Corrected rigid transform ``(R', T')``."""
    omega = corr.omega
    _check_regime(omega)
    r = pose.rotation @ sc.quat_to_rotmat(quat_exp(omega))
    t = pose.translation + np.asarray(corr.dT_c, dtype=np.float64) + np.asarray(corr.dT_f, dtype=np.float64)
    return r, t


def object_to_world(mu_o, rotation, translation):
    """``R mu_o + T`` for a point or a ``(K, 3)`` batch."""
    mu_o = np.asarray(mu_o, dtype=np.float64)
    return mu_o @ np.asarray(rotation).T + np.asarray(translation)


def place_gaussians(local: sc.GaussianSet, rotation, translation) -> sc.GaussianSet:
    """Move object-local Gaussians into the world: positions transformed, rotations composed."""
    q_r = sc.rotmat_to_quat(rotation)
    return sc.GaussianSet(
        object_to_world(local.mu, rotation, translation),
        local.scale, sc.quat_multiply(q_r, local.quat),
        local.opacity, local.sh, local.embed,
    )


def place_corrected(local: sc.GaussianSet, pose: TrackedPose, omega, d_trans):
    """Differentiable placement under a corrected pose.

    ``omega`` is the summed axis-angle correction, ``d_trans`` the summed
    translation correction. Returns ``(world_set, cache)``.
    """
    _check_regime(omega)
    q_track = sc.rotmat_to_quat(pose.rotation)
    q_corr = quat_exp(omega)
    r_corr = sc.quat_to_rotmat(q_corr)
    r_full = pose.rotation @ r_corr
    q_pose = sc.quat_multiply(q_track, q_corr)
    mu_o = local.mu.astype(np.float64)
    world = sc.GaussianSet(
        mu_o @ r_full.T + pose.translation + d_trans,
        local.scale, sc.quat_multiply(q_pose, local.quat),
        local.opacity, local.sh, local.embed,
    )
    return world, (local, pose, np.asarray(omega, dtype=np.float64), q_track, q_corr, r_full, q_pose)


def place_corrected_backward(cache, d_mu_w, d_quat_w):
    """Returns ``(d_mu_local, d_quat_local, d_omega, d_trans)``."""
    local, pose, omega, q_track, q_corr, r_full, q_pose = cache
    mu_o = local.mu.astype(np.float64)
    d_mu_o = d_mu_w @ r_full
    d_trans = d_mu_w.sum(axis=0)
    d_r_full = d_mu_w.T @ mu_o
    d_r_corr = pose.rotation.T @ d_r_full
    d_q_corr = sc.quat_to_rotmat_backward(q_corr, d_r_corr)
    d_q_pose, d_quat_o = sc.quat_multiply_backward(np.broadcast_to(q_pose, local.quat.shape),
                                                   local.quat.astype(np.float64), d_quat_w)
    _, d_q_corr2 = sc.quat_multiply_backward(q_track, q_corr, d_q_pose.sum(axis=0))
    d_omega = quat_exp_backward(omega, d_q_corr + d_q_corr2)
    return d_mu_o, d_quat_o, d_omega, d_trans
