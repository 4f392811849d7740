"""Photometric fitting loop, frame splits and checkpoint conversion."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint as ck
from ._jit import set_num_threads
from .diffkit import OptimizerState, optimizer_step
from .errors import FormatError, NumericError
from .metrics import ssim_with_grad
from .model import SceneLayout, SceneModel, TrainConfig


def split_frames(n_frames, every):
    """``(train, held_out)`` frame indices; every ``every``-th frame starting at 0 is held out."""
    held = [f for f in range(n_frames) if f % every == 0]
    train = [f for f in range(n_frames) if f % every != 0]
    return train, held


def photometric_loss(image, target, lam):
    """``(1 - lam) L1 + lam (1 - SSIM)``; returns ``(loss, l1, ssim_term, d_image)``."""
    diff = image - target
    l1 = float(np.mean(np.abs(diff)))
    s, d_s = ssim_with_grad(image, target)
    ssim_term = 1.0 - s
    loss = (1.0 - lam) * l1 + lam * ssim_term
    d_image = (1.0 - lam) * np.sign(diff) / diff.size - lam * d_s
    return loss, l1, ssim_term, d_image


@dataclass
class LossRecord:
    iteration: int
    loss: float
    l1: float
    ssim_term: float
    camera: int
    frame: int

    def line(self):
        return f"{self.iteration},{self.loss!r},{self.l1!r},{self.ssim_term!r}"


def strict_sequential():
    """Pin every thread pool to one worker."""
    set_num_threads(1)
    threadpool_limits(1)


@dataclass
class Trainer:
    model: SceneModel
    dataset: object
    iteration: int = 0
    optimizer: dict = field(default_factory=dict)
    rng: np.random.Generator | None = None

    def __post_init__(self):
        cfg = self.model.config
        if self.rng is None:
            self.rng = np.random.default_rng([cfg.seed, 7])
        for name in self.model.params:
            if name not in self.optimizer:
                self.optimizer[name] = OptimizerState(self.model.learning_rate(name), cfg.beta1, cfg.beta2, cfg.eps)
        train, _ = split_frames(self.dataset.n_frames, cfg.split_every)
        self.pairs = [(c, f) for f in train for c in range(self.dataset.n_cameras)]
        self.background = np.asarray(self.dataset.background, dtype=np.float64)

    @property
    def done(self):
        return self.iteration >= self.model.config.iterations

    def step(self) -> LossRecord:
        cfg = self.model.config
        i = self.iteration
        cam, frame = self.pairs[int(self.rng.integers(len(self.pairs)))]
        target = np.asarray(self.dataset.images[cam, frame], dtype=np.float64)
        t = float(self.dataset.timestamps[frame])
        image, cache = self.model.render(self.dataset.cameras[cam], self.background, t, i, frame=frame)
        loss, l1, s_term, d_image = photometric_loss(image, target, cfg.lambda_ssim)
        if not np.isfinite(loss):
            raise NumericError(f"iteration {i}: non-finite loss (rendered image)", tensor="image", index=i)
        grads = self.model.backward(cache, d_image)
        grads.pop("background", None)
        if cfg.pose_decay > 0:
            # weak pull toward the tracked pose on directions the images barely constrain
            for name in grads:
                if name.startswith("pose."):
                    grads[name][:, frame] += cfg.pose_decay * self.model.params[name][:, frame]
        params = dict(self.model.params)
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"iteration {i}: non-finite gradient in {name!r}", tensor=name, index=i)
            if name.startswith("deform.fine.") and i < cfg.fine_start * cfg.iterations:
                continue
            state = self.optimizer[name]
            if cfg.lr_decay_final < 1.0 and self.model.decays(name):
                state = replace(state, lr=self.model.learning_rate(name) * cfg.lr_decay_final ** (i / cfg.iterations))
            params[name], self.optimizer[name] = optimizer_step(state, {name: params[name]}, {name: g})
            params[name] = params[name][name]
        for name, p in params.items():
            if not np.all(np.isfinite(p)):
                raise NumericError(f"iteration {i}: non-finite parameter {name!r}", tensor=name, index=i)
        if "quat" in params:
            q = params["quat"].astype(np.float64)
            params["quat"] = (q / np.linalg.norm(q, axis=1, keepdims=True)).astype(np.float32)
        self.model.set_params(params)
        self.iteration += 1
        return LossRecord(i, loss, l1, s_term, cam, frame)

    def run(self, n=None, log=None, callback=None):
        """Run ``n`` iterations (default: until the budget is spent)."""
        records = []
        stop = self.model.config.iterations if n is None else min(self.iteration + n, self.model.config.iterations)
        while self.iteration < stop:
            rec = self.step()
            records.append(rec)
            if log is not None:
                log.write(rec.line() + "\n")
            if callback is not None:
                callback(rec)
        return records

    # -- checkpoints ------------------------------------------------------

    def to_checkpoint(self) -> ck.Checkpoint:
        return ck.Checkpoint(self.model.config.to_dict(), self.model.layout.to_dict(), self.iteration,
                             dict(self.model.params), dict(self.optimizer), _rng_state(self.rng))

    def save(self, path):
        ck.save(self.to_checkpoint(), path)

    @classmethod
    def from_checkpoint(cls, ckpt: ck.Checkpoint, dataset):
        model = model_from_checkpoint(ckpt)
        rng = np.random.default_rng()
        if ckpt.rng_state is not None:
            rng.bit_generator.state = ckpt.rng_state
        return cls(model, dataset, ckpt.iteration, dict(ckpt.optimizer), rng)


def _rng_state(rng):
    st = rng.bit_generator.state
    return {"bit_generator": st["bit_generator"], "state": dict(st["state"]),
            "has_uint32": st["has_uint32"], "uinteger": st["uinteger"]}


def model_from_checkpoint(ckpt: ck.Checkpoint) -> SceneModel:
    cfg = TrainConfig.from_dict(ckpt.config)
    layout = SceneLayout.from_dict(ckpt.layout)
    model = SceneModel(cfg, layout, {k: v.copy() for k, v in ckpt.params.items()})
    missing = _expected_names(model) - set(ckpt.params)
    if missing:
        raise FormatError(f"checkpoint lacks arrays {sorted(missing)}")
    return model


def _expected_names(model):
    names = {"mu", "log_scale", "quat", "logit_opacity", "sh", "embed"}
    names |= {f"deform.{k}" for k in model.deformer.named_arrays()}
    if model.config.mode == "supervised":
        names |= {f"pose.{k}" for k in ("omega_c", "omega_f", "dT_c", "dT_f")}
    return names


def fit(config: TrainConfig, dataset, out_dir, resume=None, strict_seq=False, progress=None):
    """Train and write ``checkpoint.bin`` plus ``loss.csv`` under ``out_dir``.

    ``resume`` may name an existing checkpoint; its loss log is appended to.
    """
    if strict_seq or config.strict_seq:
        strict_sequential()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        trainer = Trainer.from_checkpoint(ck.load(resume), dataset)
        mode = "a"
    else:
        trainer = Trainer(SceneModel.initialize(config, dataset), dataset)
        mode = "w"
    with open(out / "loss.csv", mode) as log:
        trainer.run(log=log, callback=progress)
    trainer.save(out / "checkpoint.bin")
    return trainer
