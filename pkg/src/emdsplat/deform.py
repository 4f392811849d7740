"""Motion-aware feature encoding and the dual-scale deformation field.

Every Gaussian gets the feature ``[pos_enc(mu), temporal(t), z_k]``. A coarse
head maps it to parameter offsets; a fine head sees the same temporal and
per-Gaussian parts but re-encodes the coarsely shifted position. Offsets from
both heads are summed (quaternions are composed).

Head output layout: ``[d_mu(3), d_scale(3), d_quat(4), d_opacity(1), d_sh((L+1)^2 * 3)]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import scene as sc
from .diffkit import MlpParams, mlp_backward, mlp_forward
from .errors import DegenerateRotationError, DomainError, NumericError, ShapeError

MIN_SCALE = 1e-6
IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])
KNOT_SNAP = 1e-9


@dataclass
class EncodingConfig:
    n_freqs: int = 4
    temporal_dim: int = 16
    gauss_dim: int = 16

    @property
    def pos_dim(self) -> int:
        return 3 + 6 * self.n_freqs

    @property
    def feature_dim(self) -> int:
        return self.pos_dim + self.temporal_dim + self.gauss_dim


@dataclass
class TemporalEmbedding:
    W: np.ndarray
    n_min: int
    n_max: int
    total_iters: int

    def __post_init__(self):
        if not 1 <= self.n_min <= self.n_max:
            raise ValueError(f"need 1 <= n_min <= n_max, got {self.n_min}, {self.n_max}")
        if self.W.shape[0] != self.n_max:
            raise ShapeError(f"W has {self.W.shape[0]} rows, expected n_max={self.n_max}")
        if self.total_iters < 1:
            raise ValueError("total_iters must be positive")


# ---------------------------------------------------------------------------
# encoding

def positional_encode(mu, n_freqs):
    """``[mu, sin(2^0 pi mu), cos(2^0 pi mu), ..., sin(2^(P-1) pi mu), cos(2^(P-1) pi mu)]``.

    Works on a single 3-vector or a ``(K, 3)`` batch.
    """
    mu = np.asarray(mu, dtype=np.float64)
    parts = [mu]
    for i in range(n_freqs):
        arg = (2.0 ** i) * np.pi * mu
        parts += [np.sin(arg), np.cos(arg)]
    return np.concatenate(parts, axis=-1)


def positional_encode_backward(mu, n_freqs, d_feat):
    d_mu = d_feat[..., :3].copy()
    for i in range(n_freqs):
        freq = (2.0 ** i) * np.pi
        arg = freq * mu
        off = 3 + 6 * i
        d_mu += freq * (np.cos(arg) * d_feat[..., off:off + 3] - np.sin(arg) * d_feat[..., off + 3:off + 6])
    return d_mu


def schedule_samples(iteration, emb: TemporalEmbedding) -> int:
    """Active knot count: a linear staircase from ``n_min`` at 0 to ``n_max`` at ``total_iters``."""
    i = min(max(int(iteration), 0), emb.total_iters)
    return emb.n_min + ((emb.n_max - emb.n_min) * i) // emb.total_iters


def active_knot_rows(n_active, n_max):
    """Rows of W used as the ``n_active`` evenly spaced knots (rounded half up)."""
    if n_active == 1:
        return np.zeros(1, dtype=np.int64)
    j = np.arange(n_active)
    return (2 * j * (n_max - 1) + (n_active - 1)) // (2 * (n_active - 1))


def _interp_weights(t, n_active):
    t = np.asarray(t, dtype=np.float64)
    if np.any((t < 0.0) | (t > 1.0)) or not np.all(np.isfinite(t)):
        raise DomainError("temporal coordinate must lie in [0, 1]")
    if n_active == 1:
        zeros = np.zeros(t.shape, dtype=np.int64)
        return zeros, zeros, np.zeros(t.shape)
    s = t * (n_active - 1)
    nearest = np.rint(s)
    s = np.where(np.abs(s - nearest) <= KNOT_SNAP, nearest, s)
    seg = np.minimum(np.floor(s).astype(np.int64), n_active - 2)
    return seg, seg + 1, s - seg


def temporal_embed(t, iteration, emb: TemporalEmbedding):
    """Piecewise-linear interpolation of the active knot rows of ``W`` at ``t``.

    ``t`` may be a scalar (returns ``(D_t,)``) or an array (returns ``(..., D_t)``).
    """
    n_active = schedule_samples(iteration, emb)
    rows = active_knot_rows(n_active, emb.n_max)
    lo, hi, u = _interp_weights(t, n_active)
    w = emb.W.astype(np.float64)
    u = u[..., None]
    return (1.0 - u) * w[rows[lo]] + u * w[rows[hi]]


def temporal_embed_backward(t, iteration, emb: TemporalEmbedding, d_feat):
    n_active = schedule_samples(iteration, emb)
    rows = active_knot_rows(n_active, emb.n_max)
    lo, hi, u = _interp_weights(t, n_active)
    d_w = np.zeros(emb.W.shape)
    d_feat = d_feat.reshape(-1, emb.W.shape[1])
    u = np.broadcast_to(u, lo.shape).reshape(-1, 1)
    np.add.at(d_w, rows[lo.reshape(-1)], (1.0 - u) * d_feat)
    np.add.at(d_w, rows[hi.reshape(-1)], u * d_feat)
    return d_w


def aggregate_features(mu, t, z, iteration, deformer: "DualScaleDeformer"):
    """Concatenate positional, temporal and per-Gaussian features (ablations zero a block)."""
    mu = np.asarray(mu, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    pos = positional_encode(mu, deformer.enc.n_freqs)
    temp = temporal_embed(t, iteration, deformer.temporal)
    if mu.ndim == 2:
        temp = np.broadcast_to(temp, (mu.shape[0], temp.shape[-1]))
    if not deformer.use_temporal:
        temp = np.zeros_like(temp)
    if not deformer.use_gauss_embed:
        z = np.zeros_like(z)
    return np.concatenate([pos, temp, z], axis=-1)


# ---------------------------------------------------------------------------
# quaternion deltas

def quaternion_delta(raw):
    """Unit quaternion ``normalize((1, 0, 0, 0) + raw)``; batched over leading axes."""
    q = IDENTITY_QUAT + np.asarray(raw, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm < 1e-8):
        raise DegenerateRotationError("identity + raw has (near) zero norm")
    return q / norm


# ---------------------------------------------------------------------------
# deformer

@dataclass
class DualScaleDeformer:
    coarse: MlpParams
    fine: MlpParams
    temporal: TemporalEmbedding
    enc: EncodingConfig
    sh_degree: int = 1
    fine_pos_bound: float = 0.0
    fine_attr_bound: float = 0.0
    use_gauss_embed: bool = True
    use_temporal: bool = True
    use_coarse: bool = True
    use_fine: bool = True

    def __post_init__(self):
        for name, head in (("coarse", self.coarse), ("fine", self.fine)):
            if head.sizes[0] != self.enc.feature_dim:
                raise ShapeError(f"{name} head expects {head.sizes[0]} inputs, features have {self.enc.feature_dim}")
            if head.sizes[-1] != self.out_dim:
                raise ShapeError(f"{name} head emits {head.sizes[-1]} values, expected {self.out_dim}")

    @property
    def n_coeffs(self):
        return sc.num_sh_coeffs(self.sh_degree)

    @property
    def out_dim(self):
        return 11 + 3 * self.n_coeffs

    def fine_bounds(self):
        """Per-output soft bound of the fine head (0 means unbounded)."""
        b = np.full(self.out_dim, self.fine_attr_bound)
        b[:3] = self.fine_pos_bound
        return b

    @classmethod
    def create(cls, rng, enc=None, sh_degree=1, n_min=4, n_max=16, total_iters=1000,
               depth=2, width=64, embed_std=0.1, fine_pos_bound=0.0, fine_attr_bound=0.0, **switches):
        """Fresh deformer with zeroed output layers (identity deformation)."""
        enc = enc or EncodingConfig()
        out_dim = 11 + 3 * sc.num_sh_coeffs(sh_degree)
        sizes = [enc.feature_dim] + [width] * depth + [out_dim]
        coarse = MlpParams.init(sizes, rng, zero_last=True)
        fine = MlpParams.init(sizes, rng, zero_last=True)
        w = rng.normal(0.0, embed_std, size=(n_max, enc.temporal_dim))
        temporal = TemporalEmbedding(w, n_min, n_max, total_iters)
        return cls(coarse, fine, temporal, enc, sh_degree, fine_pos_bound, fine_attr_bound, **switches)

    def named_arrays(self):
        out = {"W": self.temporal.W}
        out.update(self.coarse.named_arrays("coarse."))
        out.update(self.fine.named_arrays("fine."))
        return out

    def load_named_arrays(self, arrays):
        self.temporal.W = arrays["W"]
        for prefix, head in (("coarse.", self.coarse), ("fine.", self.fine)):
            for i in range(len(head.weights)):
                head.weights[i] = arrays[f"{prefix}w{i}"]
                head.biases[i] = arrays[f"{prefix}b{i}"]


@dataclass
class DeformCache:
    scene: sc.GaussianSet
    t: np.ndarray
    iteration: int
    mu_shift: np.ndarray
    cache_c: object
    cache_f: object
    raw_fine: np.ndarray
    qc: tuple
    qf: tuple
    q1: np.ndarray
    q2: tuple
    scale_raw: np.ndarray
    opacity_raw: np.ndarray
    extras: dict = field(default_factory=dict)


def _split_out(out, n_coeffs):
    return (out[:, 0:3], out[:, 3:6], out[:, 6:10], out[:, 10], out[:, 11:].reshape(-1, n_coeffs, 3))


def _head(head, enabled, feat, out_dim):
    if not enabled:
        return np.zeros((feat.shape[0], out_dim)), None
    return mlp_forward(head, feat)


GEOMETRY_OUTPUTS = 11


def _soft_bound(raw, bounds):
    """``b * tanh(raw / b)`` per column; columns with ``b = 0`` pass through."""
    out = raw.copy()
    cols = bounds > 0
    out[:, cols] = bounds[cols] * np.tanh(raw[:, cols] / bounds[cols])
    return out


def _soft_bound_backward(raw, bounds, g):
    g = g.copy()
    cols = bounds > 0
    g[:, cols] *= 1.0 - np.tanh(raw[:, cols] / bounds[cols]) ** 2
    return g


def _mask_geometry(out):
    out = out.copy()
    out[:, :GEOMETRY_OUTPUTS] = 0.0
    return out


def deform(scene: sc.GaussianSet, t, iteration, deformer: DualScaleDeformer, appearance_only=False):
    """Deformed Gaussians at time ``t`` (scalar, or one value per Gaussian).

    Returns ``(deformed_set, cache)``; the cache feeds :func:`deform_backward`.
    The deformed set carries the canonical embeddings unchanged. With
    ``appearance_only`` the geometric outputs (position, scale, rotation,
    opacity) are masked and only the color offsets apply; tracked objects use
    this so their rigid motion is carried by the pose alone.
    """
    k = scene.count
    if scene.sh.shape[1] != deformer.n_coeffs:
        raise ShapeError(f"scene SH has {scene.sh.shape[1]} coefficients, deformer expects {deformer.n_coeffs}")
    if k and scene.embed.shape[1] != deformer.enc.gauss_dim:
        raise ShapeError(f"embedding width {scene.embed.shape[1]} != {deformer.enc.gauss_dim}")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (k,))
    mu = scene.mu.astype(np.float64)
    p = deformer.enc.n_freqs
    tail = aggregate_features(np.zeros((k, 3)), t, scene.embed, iteration, deformer)[:, deformer.enc.pos_dim:]
    feat_c = np.concatenate([positional_encode(mu, p), tail], axis=1)
    out_c, cache_c = _head(deformer.coarse, deformer.use_coarse, feat_c, deformer.out_dim)
    if appearance_only:
        out_c = _mask_geometry(out_c)
    dmu_c, ds_c, dq_c, da_c, dc_c = _split_out(out_c, deformer.n_coeffs)
    mu_shift = mu + dmu_c
    feat_f = np.concatenate([positional_encode(mu_shift, p), tail], axis=1)
    out_f, cache_f = _head(deformer.fine, deformer.use_fine, feat_f, deformer.out_dim)
    if appearance_only:
        out_f = _mask_geometry(out_f)
    for out in (out_c, out_f):
        bad = np.flatnonzero(~np.all(np.isfinite(out), axis=1))
        if bad.size:
            raise NumericError(f"non-finite deformation output for Gaussian {bad[0]}", tensor="deform", index=int(bad[0]))
    dmu_f, ds_f, dq_f, da_f, dc_f = _split_out(_soft_bound(out_f, deformer.fine_bounds()), deformer.n_coeffs)

    qc_un = IDENTITY_QUAT + dq_c
    qc_n = np.linalg.norm(qc_un, axis=1, keepdims=True)
    qf_un = IDENTITY_QUAT + dq_f
    qf_n = np.linalg.norm(qf_un, axis=1, keepdims=True)
    if np.any(qc_n < 1e-8) or np.any(qf_n < 1e-8):
        raise DegenerateRotationError("quaternion delta collapsed to zero norm")
    qc = qc_un / qc_n
    qf = qf_un / qf_n
    quat = scene.quat.astype(np.float64)
    q1 = sc.quat_multiply(quat, qc)
    q2 = sc.quat_multiply(q1, qf)
    q_t, q2_n = sc.quat_normalize(q2)

    scale_raw = scene.scale.astype(np.float64) + ds_c + ds_f
    opacity_raw = scene.opacity.astype(np.float64) + da_c + da_f
    deformed = sc.GaussianSet(
        mu + dmu_c + dmu_f,
        np.maximum(scale_raw, MIN_SCALE),
        q_t,
        np.clip(opacity_raw, 0.0, 1.0),
        scene.sh.astype(np.float64) + dc_c + dc_f,
        scene.embed,
    )
    cache = DeformCache(scene, t, iteration, mu_shift, cache_c, cache_f, out_f,
                        (qc, qc_n), (qf, qf_n), q1, (q_t, q2_n), scale_raw, opacity_raw,
                        {"appearance_only": appearance_only})
    return deformed, cache


def deform_backward(deformer: DualScaleDeformer, cache: DeformCache, grads: dict):
    """Backpropagate gradients of the deformed set (keys mu, scale, quat, opacity, sh).

    Missing keys count as zero gradients.

    Returns a dict with canonical-parameter gradients (``mu``, ``scale``,
    ``quat``, ``opacity``, ``sh``, ``embed``) and deformer gradients under the
    names of :meth:`DualScaleDeformer.named_arrays`.
    """
    scene = cache.scene
    k = scene.count
    nc = deformer.n_coeffs
    p = deformer.enc.n_freqs
    appearance_only = cache.extras.get("appearance_only", False)
    grads = {n: np.asarray(grads[n], dtype=np.float64) if n in grads else np.zeros((k,) + getattr(scene, n).shape[1:])
             for n in ("mu", "scale", "quat", "opacity", "sh")}
    g_mu = grads["mu"]
    g_scale = np.where(cache.scale_raw > MIN_SCALE, grads["scale"], 0.0)
    g_opacity = np.where((cache.opacity_raw >= 0.0) & (cache.opacity_raw <= 1.0), grads["opacity"], 0.0)
    g_sh = np.asarray(grads["sh"], dtype=np.float64)

    q_t, q2_n = cache.q2
    g_q2 = sc.quat_normalize_backward(q_t, q2_n, grads["quat"])
    qf, qf_n = cache.qf
    qc, qc_n = cache.qc
    g_q1, g_qf = sc.quat_multiply_backward(cache.q1, qf, g_q2)
    g_quat, g_qc = sc.quat_multiply_backward(scene.quat.astype(np.float64), qc, g_q1)
    g_raw_qf = sc.quat_normalize_backward(qf, qf_n, g_qf)
    g_raw_qc = sc.quat_normalize_backward(qc, qc_n, g_qc)

    sh_flat = g_sh.reshape(k, nc * 3)
    fd = deformer.enc.feature_dim
    pos_dim = deformer.enc.pos_dim
    out = {}
    d_tail = np.zeros((k, fd - pos_dim))
    d_mu_shift = np.zeros((k, 3))
    if deformer.use_fine:
        d_out_f = np.concatenate([g_mu, g_scale, g_raw_qf, g_opacity[:, None], sh_flat], axis=1)
        d_out_f = _soft_bound_backward(cache.raw_fine, deformer.fine_bounds(), d_out_f)
        if appearance_only:
            d_out_f = _mask_geometry(d_out_f)
        d_w, d_b, d_feat_f = mlp_backward(deformer.fine, cache.cache_f, d_out_f)
        d_mu_shift = positional_encode_backward(cache.mu_shift, p, d_feat_f[:, :pos_dim])
        d_tail += d_feat_f[:, pos_dim:]
        out.update(_named_grads("fine.", d_w, d_b))
    else:
        out.update(_named_zeros("fine.", deformer.fine))
    g_dmu_c = g_mu + d_mu_shift
    d_mu = g_mu + d_mu_shift
    if deformer.use_coarse:
        d_out_c = np.concatenate([g_dmu_c, g_scale, g_raw_qc, g_opacity[:, None], sh_flat], axis=1)
        if appearance_only:
            d_out_c = _mask_geometry(d_out_c)
        d_w, d_b, d_feat_c = mlp_backward(deformer.coarse, cache.cache_c, d_out_c)
        d_mu = d_mu + positional_encode_backward(scene.mu.astype(np.float64), p, d_feat_c[:, :pos_dim])
        d_tail += d_feat_c[:, pos_dim:]
        out.update(_named_grads("coarse.", d_w, d_b))
    else:
        out.update(_named_zeros("coarse.", deformer.coarse))
    dt = deformer.enc.temporal_dim
    if deformer.use_temporal and k:
        out["W"] = temporal_embed_backward(cache.t, cache.iteration, deformer.temporal, d_tail[:, :dt])
    else:
        out["W"] = np.zeros(deformer.temporal.W.shape)
    d_embed = d_tail[:, dt:] if deformer.use_gauss_embed else np.zeros((k, deformer.enc.gauss_dim))
    out.update(mu=d_mu, scale=g_scale, quat=g_quat, opacity=g_opacity, sh=g_sh, embed=d_embed)
    return out


def _named_grads(prefix, d_w, d_b):
    out = {}
    for i, (w, b) in enumerate(zip(d_w, d_b)):
        out[f"{prefix}w{i}"] = w
        out[f"{prefix}b{i}"] = b
    return out


def _named_zeros(prefix, head):
    return {name: np.zeros(a.shape) for name, a in head.named_arrays(prefix).items()}


# ---------------------------------------------------------------------------
# trajectory alternative

def hat_basis(t, n_points):
    """Piecewise-linear (hat) basis weights at knots ``i / (N-1)``; shape ``(..., N)``."""
    t = np.asarray(t, dtype=np.float64)
    if np.any((t < 0.0) | (t > 1.0)):
        raise DomainError("trajectory time must lie in [0, 1]")
    if n_points == 1:
        return np.ones(t.shape + (1,))
    lo, hi, u = _interp_weights(t, n_points)
    phi = np.zeros(t.shape + (n_points,))
    np.put_along_axis(phi, lo[..., None], (1.0 - u)[..., None], axis=-1)
    np.put_along_axis(phi, hi[..., None], u[..., None], axis=-1)
    return phi


@dataclass
class TrajectoryModel:
    """Control points ``(N, 3)`` for one Gaussian or ``(K, N, 3)`` for many."""

    control_points: np.ndarray

    @property
    def n_points(self):
        return self.control_points.shape[-2]


def trajectory_eval(traj: TrajectoryModel, t):
    if traj.n_points < 1:
        raise ShapeError("trajectory needs at least one control point")
    phi = hat_basis(t, traj.n_points)
    return np.einsum("n,...nc->...c", phi, traj.control_points)
