"""Trainable scene model: canonical Gaussians, deformer and pose corrections.

Parameters live in one flat ``name -> float32 array`` dict so that the
optimizer and the checkpoint treat every tensor the same way. Scales and
opacities are optimized in log / logit space.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import scene as sc
from .deform import DualScaleDeformer, EncodingConfig, deform, deform_backward
from .errors import ConfigError
from .pose import TrackedPose, place_corrected, place_corrected_backward
from .rasterizer import rasterize

MODES = ("self", "supervised")
ABLATIONS = {
    "gauss_embed": "use_gaussian_embed",
    "temporal": "use_temporal_embed",
    "coarse": "use_coarse",
    "fine": "use_fine",
}


@dataclass
class TrainConfig:
    dataset: str = ""
    mode: str = "self"
    iterations: int = 5000
    seed: int = 0
    lambda_ssim: float = 0.2
    lr_position: float = 1.6e-4
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_opacity: float = 5e-2
    lr_sh: float = 2.5e-3
    lr_deform: float = 1e-3
    lr_deform_fine: float = 1e-3
    lr_embed: float = 1e-3
    lr_pose: float = 1e-3
    lr_pose_fine: float = 1e-4
    lr_decay_final: float = 0.1
    pose_decay: float = 0.03
    rigid_objects: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    n_freqs: int = 4
    temporal_dim: int = 16
    gauss_dim: int = 16
    n_min: int = 4
    n_max: int = 16
    head_depth: int = 2
    head_width: int = 64
    fine_pos_bound: float = 0.05
    fine_attr_bound: float = 0.0
    fine_start: float = 0.5
    use_gaussian_embed: bool = True
    use_temporal_embed: bool = True
    use_coarse: bool = True
    use_fine: bool = True
    init_noise: float = 0.02
    init_time: float = 0.5
    init_opacity: float = 0.1
    init_gray: float = 0.5
    init_appearance: str = "gray"
    embed_std: float = 0.1
    split_every: int = 10
    strict_seq: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        for f in dataclasses.fields(self):
            if f.name.startswith("lr_") and not getattr(self, f.name) > 0:
                raise ConfigError(f"{f.name} must be positive")
        if not 0.0 <= self.lambda_ssim <= 1.0:
            raise ConfigError("lambda_ssim must lie in [0, 1]")
        if not 1 <= self.n_min <= self.n_max:
            raise ConfigError("need 1 <= n_min <= n_max")
        if not 0.0 < self.lr_decay_final <= 1.0:
            raise ConfigError("lr_decay_final must lie in (0, 1]")
        if not 0.0 <= self.fine_start < 1.0:
            raise ConfigError("fine_start must lie in [0, 1)")
        if self.pose_decay < 0:
            raise ConfigError("pose_decay must be >= 0")
        if not 0.0 <= self.init_time <= 1.0:
            raise ConfigError("init_time must lie in [0, 1]")
        if self.init_appearance not in ("gray", "truth"):
            raise ConfigError("init_appearance must be 'gray' or 'truth'")
        if self.split_every < 2:
            raise ConfigError("split_every must be >= 2")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def disable(self, names):
        kw = {}
        for n in names:
            if n not in ABLATIONS:
                raise ConfigError(f"unknown ablation {n!r}; choose from {sorted(ABLATIONS)}")
            kw[ABLATIONS[n]] = False
        return self.replace(**kw)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.clip(p, 1e-6, 1 - 1e-6)
    return np.log(p / (1 - p))


def knn_scale(mu, k=3, chunk=512):
    """Mean distance to the ``k`` nearest neighbours (isotropic init scale)."""
    n = mu.shape[0]
    if n <= 1:
        return np.full(n, 0.05)
    k = min(k, n - 1)
    out = np.empty(n)
    sq = np.sum(mu * mu, axis=1)
    for s in range(0, n, chunk):
        d2 = sq[s:s + chunk, None] + sq[None, :] - 2.0 * mu[s:s + chunk] @ mu.T
        d2[np.arange(d2.shape[0]), np.arange(s, s + d2.shape[0])] = np.inf
        part = np.partition(d2, k - 1, axis=1)[:, :k]
        out[s:s + chunk] = np.mean(np.sqrt(np.maximum(part, 0.0)), axis=1)
    return np.maximum(out, 1e-4)


@dataclass
class SceneLayout:
    """Which Gaussians are static and which belong to each tracked object.

    ``groups`` lists ``(owner, start, count)`` with owner -1 for static.
    """

    groups: list
    sh_degree: int
    n_frames: int
    timestamps: np.ndarray
    tracked_frames: list
    tracked_poses: list
    cameras: list = dataclasses.field(default_factory=list)
    background: tuple = (0.0, 0.0, 0.0)

    @property
    def n_objects(self):
        return len(self.tracked_frames)

    def to_dict(self):
        return {
            "groups": [list(map(int, g)) for g in self.groups],
            "sh_degree": self.sh_degree,
            "n_frames": self.n_frames,
            "timestamps": [float(t) for t in self.timestamps],
            "tracked_frames": [list(map(int, f)) for f in self.tracked_frames],
            "tracked_poses": [[{"R": np.asarray(r).tolist(), "T": np.asarray(t).tolist()} for r, t in poses]
                              for poses in self.tracked_poses],
            "cameras": [c.to_dict() for c in self.cameras],
            "background": [float(b) for b in self.background],
        }

    @classmethod
    def from_dict(cls, d):
        poses = [[(np.array(p["R"]), np.array(p["T"])) for p in obj] for obj in d["tracked_poses"]]
        return cls([tuple(g) for g in d["groups"]], d["sh_degree"], d["n_frames"],
                   np.array(d["timestamps"]), [tuple(f) for f in d["tracked_frames"]], poses,
                   [sc.Camera.from_dict(c) for c in d.get("cameras", [])], tuple(d.get("background", (0, 0, 0))))


class SceneModel:
    def __init__(self, config: TrainConfig, layout: SceneLayout, params: dict):
        self.config = config
        self.layout = layout
        self.params = params
        enc = EncodingConfig(config.n_freqs, config.temporal_dim, config.gauss_dim)
        self.deformer = DualScaleDeformer.create(
            np.random.default_rng(0), enc, layout.sh_degree, config.n_min, config.n_max,
            config.iterations, config.head_depth, config.head_width,
            fine_pos_bound=config.fine_pos_bound, fine_attr_bound=config.fine_attr_bound,
            use_gauss_embed=config.use_gaussian_embed, use_temporal=config.use_temporal_embed,
            use_coarse=config.use_coarse, use_fine=config.use_fine)
        self._sync_deformer()

    # -- construction -----------------------------------------------------

    @classmethod
    def initialize(cls, config: TrainConfig, dataset) -> "SceneModel":
        """Fresh model from a dataset's ground-truth geometry (positions perturbed)."""
        rng = np.random.default_rng(config.seed)
        sh_degree = dataset.static.sh_degree
        nc = sc.num_sh_coeffs(sh_degree)
        tracked_frames = [tuple(o["tracked_frames"]) for o in dataset.objects]
        if config.mode == "self":
            t0 = config.init_time
            parts = [dataset.static]
            for o, local in enumerate(dataset.objects_local):
                f0, f1 = tracked_frames[o]
                f = int(np.argmin(np.abs(dataset.timestamps - t0)))
                f = min(max(f, f0), f1)
                rot, trans = dataset.poses(o, "true_poses")[f - f0]
                from .pose import place_gaussians

                parts.append(place_gaussians(local, rot, trans))
            base = sc.GaussianSet.concat(parts)
            groups = [(-1, 0, base.count)]
            poses = [dataset.poses(o) for o in range(len(dataset.objects))]
        else:
            base = sc.GaussianSet.concat([dataset.static] + list(dataset.objects_local))
            groups, start = [(-1, 0, dataset.static.count)], dataset.static.count
            for o, local in enumerate(dataset.objects_local):
                groups.append((o, start, local.count))
                start += local.count
            poses = [dataset.poses(o) for o in range(len(dataset.objects))]
        k = base.count
        mu = base.mu + rng.normal(0.0, config.init_noise, size=(k, 3)) if config.init_noise > 0 else base.mu.copy()
        scale = knn_scale(mu)
        sh = np.zeros((k, nc, 3))
        if config.init_appearance == "truth":
            sh[:] = base.sh
            log_scale = np.log(base.scale)
            quat = base.quat.copy()
            opacity = base.opacity.copy()
        else:
            sh[:, 0, :] = config.init_gray / sc.SH_C0
            log_scale = np.repeat(np.log(scale)[:, None], 3, axis=1)
            quat = np.tile([1.0, 0.0, 0.0, 0.0], (k, 1))
            opacity = np.full(k, config.init_opacity)
        f32 = np.float32
        params = {
            "mu": mu.astype(f32),
            "log_scale": log_scale.astype(f32),
            "quat": quat.astype(f32),
            "logit_opacity": logit(opacity).astype(f32),
            "sh": sh.astype(f32),
            "embed": rng.normal(0.0, config.embed_std, size=(k, config.gauss_dim)).astype(f32),
        }
        enc = EncodingConfig(config.n_freqs, config.temporal_dim, config.gauss_dim)
        deformer = DualScaleDeformer.create(rng, enc, sh_degree, config.n_min, config.n_max,
                                            config.iterations, config.head_depth, config.head_width,
                                            embed_std=config.embed_std)
        for name, arr in deformer.named_arrays().items():
            params[f"deform.{name}"] = arr.astype(f32)
        if config.mode == "supervised":
            shape = (len(dataset.objects), dataset.n_frames, 3)
            for name in ("omega_c", "omega_f", "dT_c", "dT_f"):
                params[f"pose.{name}"] = np.zeros(shape, dtype=f32)
        layout = SceneLayout(groups, sh_degree, dataset.n_frames, dataset.timestamps, tracked_frames, poses,
                             list(dataset.cameras), tuple(float(b) for b in dataset.background))
        return cls(config, layout, params)

    def _sync_deformer(self):
        self.deformer.load_named_arrays({k[len("deform."):]: v.astype(np.float64)
                                         for k, v in self.params.items() if k.startswith("deform.")})

    def set_params(self, params):
        self.params = params
        self._sync_deformer()

    def decays(self, name):
        """Whether ``name`` follows the exponential learning-rate decay."""
        return name == "mu" or name.startswith(("deform.coarse.", "deform.fine."))

    def learning_rate(self, name):
        c = self.config
        if name.startswith("deform."):
            if name == "deform.W":
                return c.lr_embed
            return c.lr_deform_fine if name.startswith("deform.fine.") else c.lr_deform
        if name.startswith("pose."):
            return c.lr_pose_fine if name.endswith("_f") else c.lr_pose
        return {"mu": c.lr_position, "log_scale": c.lr_scale, "quat": c.lr_rotation,
                "logit_opacity": c.lr_opacity, "sh": c.lr_sh, "embed": c.lr_embed}[name]

    # -- forward / backward ---------------------------------------------------

    def canonical(self) -> sc.GaussianSet:
        p = self.params
        f64 = np.float64
        return sc.GaussianSet(
            p["mu"].astype(f64), np.exp(p["log_scale"].astype(f64)), p["quat"].astype(f64),
            sigmoid(p["logit_opacity"].astype(f64)), p["sh"].astype(f64), p["embed"].astype(f64))

    def nearest_frame(self, t):
        return int(np.argmin(np.abs(self.layout.timestamps - t)))

    def state_at(self, t, iteration, frame=None):
        """World-space Gaussians at time ``t`` plus the cache needed for backward."""
        canon = self.canonical()
        cache = {"canon": canon}
        if self.config.mode == "self":
            world, dcache = deform(canon, t, iteration, self.deformer)
            cache["deform"] = dcache
            return world, cache
        frame = self.nearest_frame(t) if frame is None else frame
        lay = self.layout
        _, s0, n0 = lay.groups[0]
        parts = [canon.subset(slice(s0, s0 + n0))]
        active, local_t = [], []
        for owner, start, count in lay.groups[1:]:
            f0, f1 = lay.tracked_frames[owner]
            if f0 <= frame <= f1:
                span = lay.timestamps[f1] - lay.timestamps[f0]
                tl = 0.0 if span <= 0 else (lay.timestamps[frame] - lay.timestamps[f0]) / span
                active.append((owner, start, count))
                local_t.append(np.full(count, min(max(tl, 0.0), 1.0)))
        placed = []
        if active:
            idx = np.concatenate([np.arange(s, s + n) for _, s, n in active])
            local = canon.subset(idx)
            deformed, dcache = deform(local, np.concatenate(local_t), iteration, self.deformer,
                                    appearance_only=self.config.rigid_objects)
            cache["deform"] = dcache
            cache["active_idx"] = idx
            off = 0
            p = self.params
            for owner, start, count in active:
                rot, trans = lay.tracked_poses[owner][frame - lay.tracked_frames[owner][0]]
                omega = p["pose.omega_c"][owner, frame].astype(np.float64) + p["pose.omega_f"][owner, frame]
                dtr = p["pose.dT_c"][owner, frame].astype(np.float64) + p["pose.dT_f"][owner, frame]
                world_o, pc = place_corrected(deformed.subset(slice(off, off + count)),
                                              TrackedPose(rot, trans, frame, owner), omega, dtr)
                placed.append((owner, off, count, pc))
                parts.append(world_o)
                off += count
        cache["placed"] = placed
        cache["frame"] = frame
        cache["n_static"] = n0
        return sc.GaussianSet.concat(parts), cache

    def render(self, camera, background, t, iteration, frame=None):
        world, cache = self.state_at(t, iteration, frame)
        ras = rasterize(world, camera, background)
        cache["raster"] = ras
        return ras.image, cache

    def backward(self, cache, d_image):
        """Gradients of ``sum(d_image * image)`` for every parameter in ``self.params``."""
        rg = cache["raster"].backward(d_image)
        canon = cache["canon"]
        world_grads = {"mu": rg.d_mu, "scale": rg.d_scale, "quat": rg.d_quat,
                       "opacity": rg.d_opacity, "sh": rg.d_sh}
        k = canon.count
        g_canon = {n: np.zeros((k,) + getattr(canon, a).shape[1:]) for n, a in
                   (("mu", "mu"), ("scale", "scale"), ("quat", "quat"), ("opacity", "opacity"),
                    ("sh", "sh"), ("embed", "embed"))}
        grads = {n: np.zeros(a.shape) for n, a in self.params.items()}
        if self.config.mode == "self":
            dg = deform_backward(self.deformer, cache["deform"], world_grads)
            for n in g_canon:
                g_canon[n] = dg[n]
            deform_part = dg
        else:
            n0 = cache["n_static"]
            for n in ("mu", "scale", "quat", "opacity", "sh"):
                g_canon[n][:n0] = world_grads[n][:n0]
            deform_part = None
            if cache["placed"]:
                idx = cache["active_idx"]
                m = len(idx)
                local = {n: np.zeros((m,) + world_grads[n].shape[1:]) for n in world_grads}
                frame = cache["frame"]
                for owner, off, count, pc in cache["placed"]:
                    sl = slice(n0 + off, n0 + off + count)
                    d_mu, d_q, d_omega, d_tr = place_corrected_backward(pc, world_grads["mu"][sl],
                                                                        world_grads["quat"][sl])
                    local["mu"][off:off + count] = d_mu
                    local["quat"][off:off + count] = d_q
                    for n in ("scale", "opacity", "sh"):
                        local[n][off:off + count] = world_grads[n][sl]
                    grads["pose.omega_c"][owner, frame] = d_omega
                    grads["pose.omega_f"][owner, frame] = d_omega
                    grads["pose.dT_c"][owner, frame] = d_tr
                    grads["pose.dT_f"][owner, frame] = d_tr
                dg = deform_backward(self.deformer, cache["deform"], local)
                for n in g_canon:
                    g_canon[n][idx] = dg[n]
                deform_part = dg
        if deform_part is not None:
            for name in self.deformer.named_arrays():
                grads[f"deform.{name}"] = deform_part[name]
        grads["mu"] = g_canon["mu"]
        grads["log_scale"] = g_canon["scale"] * canon.scale
        grads["quat"] = g_canon["quat"]
        grads["logit_opacity"] = g_canon["opacity"] * canon.opacity * (1.0 - canon.opacity)
        grads["sh"] = g_canon["sh"]
        grads["embed"] = g_canon["embed"]
        grads["background"] = rg.d_background
        return grads
