"""Render a fitted model over a dataset split and score it."""
from __future__ import annotations

import numpy as np

from .metrics import MetricReport, masked_psnr, masked_ssim, psnr, ssim
from .pose import PoseCorrection, TrackedPose, correct_pose, geodesic_angle
from .train import split_frames


def quantize(image):
    """Round to the 8-bit grid the ground-truth frames were stored on."""
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255) / 255.0


def fast_object(dataset):
    """Index of the fastest tracked object, or None."""
    if not dataset.objects:
        return None
    return int(np.argmax([o["speed"] for o in dataset.objects]))


def _score(pairs, masks_for):
    """``pairs``: list of (cam, frame, render, target). Full-image means plus masked means."""
    per_frame = []
    psnrs, ssims, m_psnr, m_ssim = [], [], [], []
    for cam, frame, img, gt in pairs:
        rec = {"camera": cam, "frame": frame, "psnr": psnr(img, gt), "ssim": ssim(img, gt)}
        mask = masks_for(cam, frame)
        if mask is not None and mask.any():
            rec["masked_psnr"] = masked_psnr(img, gt, mask)
            rec["masked_ssim"] = masked_ssim(img, gt, mask)
            m_psnr.append(rec["masked_psnr"])
            m_ssim.append(rec["masked_ssim"])
        psnrs.append(rec["psnr"])
        ssims.append(rec["ssim"])
        per_frame.append(rec)
    return MetricReport(
        float(np.mean(psnrs)) if psnrs else float("nan"),
        float(np.mean(ssims)) if ssims else float("nan"),
        float(np.mean(m_psnr)) if m_psnr else None,
        float(np.mean(m_ssim)) if m_ssim else None,
        per_frame,
    )


def render_fn_for(model, iteration=None):
    it = model.config.iterations if iteration is None else iteration

    def render(dataset, cam, frame):
        img, _ = model.render(dataset.cameras[cam], np.asarray(dataset.background, dtype=np.float64),
                              float(dataset.timestamps[frame]), it, frame=frame)
        return img

    return render


def evaluate(render, dataset, split_every=10, frames=None):
    """Score ``render(dataset, cam, frame)`` against the dataset.

    Returns a dict with ``train`` and ``test`` reports (``test`` = held-out
    frames). Masked scores cover the union of object masks; each object also
    gets its own masked report under ``objects``. With ``frames`` given,
    only that split is scored and returned under ``"selected"``.
    """
    train, held = split_frames(dataset.n_frames, split_every)
    splits = {"train": train, "test": held} if frames is None else {"selected": list(frames)}
    has_objects = bool(dataset.objects) and bool(dataset.masks)

    cache = {}
    for frames_ in splits.values():
        for f in frames_:
            for c in range(dataset.n_cameras):
                if (c, f) not in cache:
                    cache[c, f] = quantize(render(dataset, c, f))

    def target(c, f):
        return np.asarray(dataset.images[c, f], dtype=np.float64)

    def union_mask(c, f):
        if not has_objects:
            return None
        return np.any([dataset.masks[o, c, f] for o in range(len(dataset.objects))], axis=0)

    out = {}
    for name, frames_ in splits.items():
        pairs = [(c, f, cache[c, f], target(c, f)) for f in frames_ for c in range(dataset.n_cameras)]
        rep = {"all": _score(pairs, union_mask).to_dict()}
        if has_objects:
            rep["objects"] = {
                dataset.objects[o]["name"]: _score(pairs, lambda c, f, o=o: dataset.masks[o, c, f]).to_dict()
                for o in range(len(dataset.objects))
            }
        out[name] = rep
    fo = fast_object(dataset)
    out["fast_object"] = None if fo is None else dataset.objects[fo]["name"]
    out["split_every"] = split_every
    out["held_out_frames"] = held
    return out


def pose_errors(model, dataset, frames=None):
    """Tracked vs corrected pose error against the true poses, per object.

    Errors are geodesic rotation angle (radians) and Euclidean translation
    distance, averaged over ``frames`` (default: every tracked frame). Only
    meaningful for supervised models.
    """
    if model.config.mode != "supervised":
        return None
    p = model.params
    out = {}
    for o, obj in enumerate(dataset.objects):
        f0, f1 = obj["tracked_frames"]
        sel = [f for f in range(f0, f1 + 1) if frames is None or f in frames]
        true = dataset.poses(o, "true_poses")
        tracked = model.layout.tracked_poses[o]
        rows = {"tracked_rot": [], "tracked_trans": [], "corrected_rot": [], "corrected_trans": []}
        for f in sel:
            r_true, t_true = true[f - f0]
            r_tr, t_tr = tracked[f - f0]
            corr = PoseCorrection(*(p[f"pose.{n}"][o, f].astype(np.float64)
                                    for n in ("omega_c", "omega_f", "dT_c", "dT_f")))
            r_c, t_c = correct_pose(TrackedPose(r_tr, t_tr, f, o), corr)
            rows["tracked_rot"].append(geodesic_angle(r_tr, r_true))
            rows["tracked_trans"].append(float(np.linalg.norm(t_tr - t_true)))
            rows["corrected_rot"].append(geodesic_angle(r_c, r_true))
            rows["corrected_trans"].append(float(np.linalg.norm(t_c - t_true)))
        rep = {k: float(np.mean(v)) if v else None for k, v in rows.items()}
        rep["frames"] = sel
        out[obj["name"]] = rep
    return out
