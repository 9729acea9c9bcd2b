"""Command-line interface: gen-scenes, train, render, eval, sweep-samples."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import io
from .config import Config, ConfigError, dump_config, load_config
from .experiments import (eval_sampling, evaluate_bundles, generate_dataset, load_test_split, render_bundle,
                          sweep_samples, write_eval_csv, write_render_outputs, write_sweep_csv)
from .learn.params import NumericError
from .learn.train import load_model, train
from .learn.views import nearest_sources
from .metrics import psnr
from .scenegen import SceneBundle

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
DATA_ENV = "GSNERF_DATA_DIR"

log = logging.getLogger("gsnerf")


def _ints(text: str) -> list[int]:
    try:
        vals = [int(x) for x in text.replace(",", " ").split()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected integers, got {text!r}") from e
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("sample counts must be positive")
    return vals


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file with sections")
    common.add_argument("--data-dir", help=f"dataset root (default: ${DATA_ENV}, then the config)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="torch threads; 1 gives bit-reproducible runs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="gsnerf", description="Desk-scale generalizable semantic NeRF.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scenes", parents=[common], help="write procedural train/test scene bundles")
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-test", type=int)
    g.add_argument("--image-size", type=int)

    t = sub.add_parser("train", parents=[common], help="train on the train split")
    t.add_argument("--mode", choices=("with_gt_depth", "self_supervised"))
    t.add_argument("--steps", type=int, dest="total_steps", help="total training steps")
    t.add_argument("--batch-rays", type=int)
    t.add_argument("--n-samples", type=int)
    t.add_argument("--image-sampling", choices=("schedule", "uniform", "depth_guided", "mixed"))
    t.add_argument("--semantic", choices=("surface", "uniform"))
    t.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")

    def eval_args(sp):
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--split", default="test")

    r = sub.add_parser("render", parents=[common], help="render one view of one scene")
    eval_args(r)
    r.add_argument("--scene", required=True, help="scene id (e.g. test000) or scene directory")
    r.add_argument("--view", default="t", help="'t' for the target view or a source index")
    r.add_argument("--n-samples", type=int)
    r.add_argument("--sampling", choices=("uniform", "depth_guided", "mixed"))

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a split")
    eval_args(e)
    e.add_argument("--n-samples", type=int)
    e.add_argument("--sampling", choices=("uniform", "depth_guided", "mixed"))

    s = sub.add_parser("sweep-samples", parents=[common], help="test PSNR against samples per ray")
    eval_args(s)
    s.add_argument("--ns", type=_ints, default=[4, 8, 16, 32, 64], help="comma-separated sample counts")
    return p


def resolve_config(args) -> Config:
    keys = ("out", "seed", "threads", "n_train", "n_test", "image_size", "mode", "total_steps", "batch_rays",
            "n_samples", "image_sampling", "semantic")
    overrides = {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}
    data_dir = args.data_dir or os.environ.get(DATA_ENV)
    if data_dir:
        overrides["data_dir"] = data_dir
    return load_config(args.config, **overrides)


def _find_scene(cfg: Config, split: str, scene: str) -> Path:
    p = Path(scene)
    if p.is_dir():
        return p
    p = io.bundle_dir(Path(cfg.data_dir) / split, scene)
    if not p.is_dir():
        raise io.BundleIOError(f"no scene {scene!r} under {Path(cfg.data_dir) / split}", p)
    return p


def _retarget(bundle: SceneBundle, view: str) -> SceneBundle:
    if view == "t":
        return bundle
    try:
        k = int(view)
    except ValueError as e:
        raise ConfigError(f"--view must be 't' or an integer, got {view!r}") from e
    views = bundle.views
    if not 0 <= k < len(bundle.sources):
        raise ConfigError(f"--view {k} out of range [0, {len(bundle.sources)})")
    return SceneBundle([v for i, v in enumerate(views) if i != k], views[k], bundle.scene_id, bundle.class_names)


def cmd_gen_scenes(cfg: Config) -> int:
    paths = generate_dataset(cfg.data_dir, cfg.n_train, cfg.n_test, cfg.k, cfg.n_classes, cfg.image_size,
                             cfg.seed)
    print(f"wrote {len(paths)} scenes under {cfg.data_dir}")
    return EXIT_OK


def cmd_train(cfg: Config, resume: bool) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(dump_config(cfg))
    res = train(cfg.train_config(out), resume=resume)
    print(f"checkpoint {res.checkpoint}; metrics {res.metrics}")
    return EXIT_OK


def _load(args, cfg: Config):
    model, _, tcfg = load_model(args.checkpoint)
    model.eval()
    if getattr(args, "n_samples", None) is not None:
        tcfg.n_samples = args.n_samples
    return model, tcfg


def cmd_render(args, cfg: Config) -> int:
    model, tcfg = _load(args, cfg)
    path = _find_scene(cfg, args.split, args.scene)
    bundle = _retarget(io.read_bundle(path, load_depth=False), args.view)
    kind = args.sampling or eval_sampling(tcfg)
    r = render_bundle(model, bundle, tcfg.k, tcfg.n_samples, kind, tcfg.semantic, cfg.seed)
    out = write_render_outputs(Path(cfg.out) / f"{bundle.scene_id}_view_{args.view}", r, bundle)
    print(f"{out}: psnr {psnr(r.rgb, bundle.target.image):.2f} dB")
    return EXIT_OK


def cmd_eval(args, cfg: Config) -> int:
    model, tcfg = _load(args, cfg)
    bundles = load_test_split(cfg.data_dir, args.split)
    reports = evaluate_bundles(model, bundles, tcfg, kind=args.sampling, seed=cfg.seed)
    names = [(b.scene_id, "t") for b in bundles]
    agg = write_eval_csv(Path(cfg.out) / "eval.csv", names, reports)
    print(" ".join(f"{k} {v:.4f}" for k, v in agg.items()))
    return EXIT_OK


def cmd_sweep(args, cfg: Config) -> int:
    model, tcfg = _load(args, cfg)
    bundles = load_test_split(cfg.data_dir, args.split)
    rows = sweep_samples(model, bundles, tcfg, args.ns, seed=cfg.seed)
    write_sweep_csv(Path(cfg.out) / "sweep.csv", rows)
    for n, mode, p in rows:
        print(f"N={n:3d} {mode:13s} {p:.2f} dB")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve_config(args)
        torch.set_num_threads(cfg.threads)
        np.seterr(all="ignore")
        if args.command == "gen-scenes":
            return cmd_gen_scenes(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.resume)
        if args.command == "render":
            return cmd_render(args, cfg)
        if args.command == "eval":
            return cmd_eval(args, cfg)
        return cmd_sweep(args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (io.BundleIOError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
