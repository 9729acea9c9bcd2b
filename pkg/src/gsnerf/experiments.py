"""Dataset generation, evaluation over a split, rendering outputs and the sample-count sweep."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from . import io
from .learn.train import TrainConfig, load_split
from .learn.views import nearest_sources
from .metrics import EvalReport, evaluate, psnr, psnr_for_csv
from .model import GSNeRF, images_to_tensor, render_view
from .scenegen import DEFAULT_CLASSES, RigSpec, SceneBundle, SceneSpec, make_bundle

EVAL_COLUMNS = ("scene", "view", "psnr", "ssim", "miou", "pixel_acc", "class_acc", "lpips")
SWEEP_COLUMNS = ("n", "mode", "psnr")
SWEEP_MODES = ("uniform", "depth_guided")

# wall, floor, ball, crate, lamp, block
PALETTE = np.array([
    [174, 199, 232],
    [152, 223, 138],
    [214, 39, 40],
    [31, 119, 180],
    [255, 187, 120],
    [148, 103, 189],
], dtype=np.uint8)

TRAIN_SEED_OFFSET = 0
TEST_SEED_OFFSET = 100000


def scene_seed(seed: int, split: str, index: int) -> int:
    return seed * 1_000_003 + (TEST_SEED_OFFSET if split == "test" else TRAIN_SEED_OFFSET) + index


def generate_dataset(root, n_train: int = 8, n_test: int = 2, k: int = 8, n_classes: int = 6,
                     image_size: int = 64, seed: int = 0) -> list[Path]:
    """Write train/ and test/ scene bundles under root; returns the scene directories."""
    spec = SceneSpec(classes=DEFAULT_CLASSES[:n_classes])
    if n_classes <= 2:
        spec = SceneSpec(classes=DEFAULT_CLASSES[:n_classes], n_objects=(0, 0))
    rig = RigSpec(width=image_size, height=image_size, focal=float(image_size))
    out = []
    for split, count in (("train", n_train), ("test", n_test)):
        for i in range(count):
            s = scene_seed(seed, split, i)
            bundle = make_bundle(s, k, spec, rig, scene_id=f"{split}{i:03d}")
            out.append(io.write_bundle(Path(root) / split, bundle))
    return out


def colorize(labels: np.ndarray) -> np.ndarray:
    return PALETTE[np.asarray(labels) % len(PALETTE)]


def error_heatmap(rgb: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Per-pixel mean absolute error mapped black -> red -> yellow -> white, saturating at 0.5."""
    e = np.clip(np.abs(rgb - gt).mean(axis=-1) / 0.5, 0.0, 1.0)
    r = np.clip(3 * e, 0, 1)
    g = np.clip(3 * e - 1, 0, 1)
    b = np.clip(3 * e - 2, 0, 1)
    return np.round(np.stack([r, g, b], axis=-1) * 255).astype(np.uint8)


@dataclass
class ViewRender:
    rgb: np.ndarray
    labels: np.ndarray
    logits: np.ndarray
    depth: np.ndarray
    residual: np.ndarray


def eval_sampling(cfg: TrainConfig) -> str:
    """Image sampling used at inference for a model trained under `cfg`."""
    return "uniform" if cfg.image_sampling == "uniform" else "depth_guided"


def render_bundle(model: GSNeRF, bundle: SceneBundle, k: int, n: int, kind: str, semantic: str = "surface",
                  seed: int = 0) -> ViewRender:
    """Render the bundle's target view from its k nearest source views."""
    target = bundle.target
    pool = bundle.sources
    sources = [pool[i] for i in nearest_sources(target, pool, k)]
    dtype = next(model.parameters()).dtype
    images = images_to_tensor([v.image for v in sources], dtype)
    rgb, logits, depth, residual = render_view(model, images, [v.cam for v in sources], target.cam, n, kind,
                                               seed=seed, semantic=semantic)
    return ViewRender(np.clip(rgb, 0, 1), logits.argmax(axis=-1), logits, depth.values, residual)


def evaluate_bundles(model: GSNeRF, bundles: Sequence[SceneBundle], cfg: TrainConfig, n: int | None = None,
                     kind: str | None = None, semantic: str | None = None, seed: int = 0):
    """EvalReport per bundle target view."""
    n = cfg.n_samples if n is None else n
    kind = eval_sampling(cfg) if kind is None else kind
    semantic = cfg.semantic if semantic is None else semantic
    reports = []
    for b in bundles:
        r = render_bundle(model, b, cfg.k, n, kind, semantic, seed)
        reports.append(evaluate(r.rgb, b.target.image, r.labels, b.target.semantics, cfg.n_classes))
    return reports


def write_eval_csv(path, names: Sequence[tuple[str, str]], reports: Sequence[EvalReport]) -> dict:
    """Per-view rows plus a final aggregate row holding the column means."""
    rows = [[psnr_for_csv(r.psnr), r.ssim, r.miou, r.pixel_acc, r.class_acc] for r in reports]
    mean = np.mean(np.array(rows, dtype=np.float64), axis=0) if rows else np.full(5, np.nan)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(EVAL_COLUMNS)
        for (scene, view), row in zip(names, rows):
            w.writerow([scene, view, *(repr(float(x)) for x in row), ""])
        w.writerow(["mean", "all", *(repr(float(x)) for x in mean), ""])
    return dict(zip(EVAL_COLUMNS[2:7], (float(x) for x in mean)))


def write_render_outputs(out_dir, render: ViewRender, gt: SceneBundle | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(render.rgb * 255).astype(np.uint8), "RGB").save(out / "rgb.png")
    Image.fromarray(render.labels.astype(np.uint8), "L").save(out / "sem.png")
    Image.fromarray(colorize(render.labels), "RGB").save(out / "sem_color.png")
    io.write_depth(out / "depth_est.dpf", render.depth.astype(np.float32))
    if gt is not None:
        Image.fromarray(error_heatmap(render.rgb, gt.target.image), "RGB").save(out / "error.png")
    return out


def sweep_samples(model: GSNeRF, bundles: Sequence[SceneBundle], cfg: TrainConfig, ns: Sequence[int],
                  modes: Sequence[str] = SWEEP_MODES, seed: int = 0) -> list[tuple[int, str, float]]:
    """Mean test PSNR for every (N, sampling mode) pair."""
    rows = []
    with torch.no_grad():
        for n in ns:
            for mode in modes:
                vals = [psnr(render_bundle(model, b, cfg.k, n, mode, cfg.semantic, seed).rgb, b.target.image)
                        for b in bundles]
                rows.append((int(n), mode, float(np.mean(vals))))
    return rows


def write_sweep_csv(path, rows) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SWEEP_COLUMNS)
        for n, mode, p in rows:
            w.writerow([n, mode, repr(psnr_for_csv(p))])


def load_test_split(data_dir, split: str = "test") -> list[SceneBundle]:
    return load_split(data_dir, split, load_depth=False)
