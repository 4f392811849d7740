"""Command-line entry point: ``emdsplat {synth,fit,render,eval,ablate}``.

Exit codes: 0 success, 2 configuration error, 3 data format error,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import checkpoint as ck
from .errors import ConfigError, FormatError, NumericError
from .evaluate import evaluate, pose_errors, quantize, render_fn_for
from .model import TrainConfig
from .synth import ScenarioConfig, generate_scene, read_dataset, write_dataset
from .train import fit, model_from_checkpoint, strict_sequential

EXIT_OK, EXIT_CONFIG, EXIT_FORMAT, EXIT_NUMERIC = 0, 2, 3, 4
SPLITS = {"10th": 10, "4th": 4}

ABLATION_ROWS = [
    ("Full Model", []),
    ("w/o Gaussian Embedding", ["gauss_embed"]),
    ("w/o Temporal Embedding", ["temporal"]),
    ("w/o Coarse Deformation", ["coarse"]),
    ("w/o Fine Deformation", ["fine"]),
]


def load_config(path, section):
    """Read a JSON config; a ``{"scenario": ..., "train": ...}`` file is split by section."""
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    if "scenario" in data or "train" in data:
        return dict(data.get(section, {}))
    return data


def train_config(args) -> TrainConfig:
    d = load_config(args.config, "train")
    if getattr(args, "dataset", None):
        d["dataset"] = args.dataset
    if args.seed is not None:
        d["seed"] = args.seed
    if args.iters is not None:
        d["iterations"] = args.iters
    if getattr(args, "mode", None):
        d["mode"] = args.mode
    if getattr(args, "split", None):
        d["split_every"] = SPLITS[args.split]
    elif d.get("mode") == "supervised" and "split_every" not in d:
        d["split_every"] = 4
    if args.strict_seq:
        d["strict_seq"] = True
    try:
        cfg = TrainConfig.from_dict(d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    cfg = cfg.disable(getattr(args, "disable", None) or [])
    if not cfg.dataset:
        raise ConfigError("no dataset given (use --dataset or the config's 'dataset' key)")
    return cfg


# -- commands -----------------------------------------------------------------

def cmd_synth(args):
    d = load_config(args.config, "scenario")
    seed = d.pop("seed", 0) if args.seed is None else args.seed
    d.pop("seed", None)
    preset = d.pop("preset", args.scenario)
    if args.speed_ratio is not None:
        d["speed_ratio"] = args.speed_ratio
    try:
        cfg = ScenarioConfig.preset(preset, **d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    manifest = write_dataset(generate_scene(seed, cfg), args.out)
    print(f"wrote {len(manifest['frames'])} frames x {len(manifest['cameras'])} cameras to {args.out}")
    return EXIT_OK


def cmd_fit(args):
    cfg = train_config(args)
    dataset = read_dataset(cfg.dataset)
    trainer = fit(cfg, dataset, args.out, resume=args.resume, strict_seq=args.strict_seq,
                  progress=_progress(args.quiet))
    print(f"checkpoint {Path(args.out) / 'checkpoint.bin'} at iteration {trainer.iteration}")
    return EXIT_OK


def _progress(quiet, every=100):
    if quiet:
        return None

    def report(rec):
        if rec.iteration % every == 0:
            print(f"iter {rec.iteration} loss {rec.loss:.5f}", file=sys.stderr, flush=True)

    return report


def cmd_render(args):
    if not 0.0 <= args.t <= 1.0:
        raise ConfigError(f"t must lie in [0, 1], got {args.t}")
    c = ck.load(args.checkpoint)
    model = model_from_checkpoint(c)
    cams = model.layout.cameras
    if not 0 <= args.camera < len(cams):
        raise ConfigError(f"camera {args.camera} out of range (checkpoint has {len(cams)})")
    img, _ = model.render(cams[args.camera], np.asarray(model.layout.background), args.t, c.iteration)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((quantize(img) * 255).astype(np.uint8), "RGB").save(out)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_eval(args):
    c = ck.load(args.checkpoint)
    model = model_from_checkpoint(c)
    dataset = read_dataset(args.dataset or model.config.dataset)
    if dataset.n_frames != model.layout.n_frames or dataset.static.sh_degree != model.layout.sh_degree:
        raise FormatError("dataset does not match the checkpoint (frame count or SH degree differ)")
    every = SPLITS[args.split] if args.split else model.config.split_every
    report = evaluate(render_fn_for(model, c.iteration), dataset, every)
    if model.config.mode == "supervised":
        report["pose"] = pose_errors(model, dataset)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    print(_summary(report))
    return EXIT_OK


def _summary(report):
    lines = []
    for split in ("train", "test"):
        r = report[split]["all"]
        s = f"{split}: PSNR {r['psnr']:.3f} SSIM {r['ssim']:.4f}"
        if r["masked_psnr"] is not None:
            s += f" | masked PSNR {r['masked_psnr']:.3f} SSIM {r['masked_ssim']:.4f}"
        lines.append(s)
    return "\n".join(lines)


def ablation_table(rows):
    head = "| Variant | PSNR | SSIM | Masked PSNR | Masked SSIM | Fast-object PSNR |"
    sep = "|---|---|---|---|---|---|"

    def fmt(x, p):
        return "-" if x is None else f"{x:.{p}f}"

    body = [f"| {r['name']} | {fmt(r['psnr'], 2)} | {fmt(r['ssim'], 4)} | {fmt(r['masked_psnr'], 2)} "
            f"| {fmt(r['masked_ssim'], 4)} | {fmt(r['fast_psnr'], 2)} |" for r in rows]
    return "\n".join([head, sep] + body)


def run_ablation(base: TrainConfig, dataset, out_dir, progress=None):
    """Fit the five variants with identical seeds and budgets; returns table rows."""
    out = Path(out_dir)
    rows = []
    for name, disabled in ABLATION_ROWS:
        cfg = base.replace(use_gaussian_embed=True, use_temporal_embed=True, use_coarse=True,
                           use_fine=True).disable(disabled)
        slug = "full" if not disabled else "no_" + disabled[0]
        trainer = fit(cfg, dataset, out / slug, progress=progress)
        rep = evaluate(render_fn_for(trainer.model, trainer.iteration), dataset, cfg.split_every)
        train = rep["train"]
        fo = rep["fast_object"]
        rows.append({
            "name": name, "dir": slug,
            "psnr": train["all"]["psnr"], "ssim": train["all"]["ssim"],
            "masked_psnr": train["all"]["masked_psnr"], "masked_ssim": train["all"]["masked_ssim"],
            "fast_psnr": None if fo is None else train["objects"][fo]["masked_psnr"],
            "test_psnr": rep["test"]["all"]["psnr"],
        })
        (out / slug / "eval.json").write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
    return rows


def cmd_ablate(args):
    base = train_config(args)
    dataset = read_dataset(base.dataset)
    if args.strict_seq:
        strict_sequential()
    rows = run_ablation(base, dataset, args.out, progress=_progress(args.quiet, 500))
    table = ablation_table(rows)
    out = Path(args.out)
    (out / "ablation.md").write_text(table + "\n")
    (out / "ablation.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    print(table)
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="emdsplat", description="Dynamic Gaussian splatting with dual-scale deformation.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, train=True):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--strict-seq", action="store_true", help="single-threaded, bit-reproducible execution")
        sp.add_argument("--quiet", action="store_true")
        if train:
            sp.add_argument("--dataset")
            sp.add_argument("--iters", type=int)
            sp.add_argument("--mode", choices=["self", "supervised"])
            sp.add_argument("--split", choices=sorted(SPLITS))
            sp.add_argument("--disable", action="append", choices=["gauss_embed", "temporal", "coarse", "fine"])

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    common(s, train=False)
    s.add_argument("--out", required=True)
    s.add_argument("--scenario", default="dual-speed", choices=["dual-speed", "static", "toy-supervised"])
    s.add_argument("--speed-ratio", type=float)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("fit", help="train a model")
    common(s)
    s.add_argument("--out", required=True)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("render", help="render a checkpoint at time t")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--camera", type=int, default=0)
    s.add_argument("--t", type=float, default=0.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset")
    s.add_argument("--split", choices=sorted(SPLITS))
    s.add_argument("--out", help="write the JSON report here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="run the five-variant ablation")
    common(s)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
