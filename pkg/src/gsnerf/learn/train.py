"""Training loop: ray batches from random target views, mixed-then-guided sampling,
GT-depth or self-supervised depth losses, Adam, CSV metrics and checkpoints."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .. import io
from ..model import GSNeRF, ModelConfig, draw_samples, images_to_tensor, make_rays
from ..scenegen import SceneBundle
from .losses import MODES, SEM_WEIGHT, loss_depth, loss_image, loss_sem, loss_ssl, total_loss
from .params import LR_END, LR_START, NumericError, ParamStore, adam_step, backward, lr_schedule
from .views import select_views

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "gsnerf-checkpoint"
CHECKPOINT_VERSION = 1
METRIC_COLUMNS = ("step", "l_image", "l_depth", "l_ssl", "l_sem", "total", "lr")
IMAGE_SAMPLING = ("schedule", "uniform", "depth_guided", "mixed")


@dataclass
class TrainConfig:
    data_dir: str = "data"
    out_dir: str = "runs/default"
    mode: str = "with_gt_depth"
    total_steps: int = 20000
    batch_rays: int = 1024
    n_samples: int = 8
    k: int = 8
    d: int = 8
    n_planes: int = 16
    hidden: int = 32
    n_classes: int = 6
    sem_weight: float = SEM_WEIGHT
    lr_start: float = LR_START
    lr_end: float = LR_END
    image_sampling: str = "schedule"
    semantic: str = "surface"
    seed: int = 0
    checkpoint_every: int = 500
    log_every: int = 100

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.image_sampling not in IMAGE_SAMPLING:
            raise ValueError(f"image_sampling must be one of {IMAGE_SAMPLING}")
        if self.semantic not in ("surface", "uniform"):
            raise ValueError("semantic must be 'surface' or 'uniform'")
        for name in ("total_steps", "batch_rays", "n_samples", "k", "d", "n_planes", "hidden", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.k < 2:
            raise ValueError("k must be >= 2 for the cost volume")
        if not 0 < self.lr_end <= self.lr_start:
            raise ValueError("need 0 < lr_end <= lr_start")

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig(self.d, self.n_planes, self.hidden, self.n_classes)


@dataclass
class StepResult:
    step: int
    scalars: dict
    lr: float


@dataclass
class TrainResult:
    checkpoint: Path
    metrics: Path
    history: list[StepResult] = field(default_factory=list)


def sampling_kind(cfg: TrainConfig, step: int) -> str:
    """Image-ray sampling for a step: half mixed, then depth-guided, unless fixed by config."""
    if cfg.image_sampling != "schedule":
        return cfg.image_sampling
    if cfg.n_samples < 2:
        return "depth_guided"
    return "mixed" if step < cfg.total_steps // 2 else "depth_guided"


def load_split(data_dir, split: str, load_depth: bool) -> list[SceneBundle]:
    root = Path(data_dir) / split
    paths = io.list_scenes(root)
    if not paths:
        raise io.BundleIOError(f"no scenes under {root}", root)
    return [io.read_bundle(p, load_depth=load_depth) for p in paths]


def build_model(cfg: TrainConfig, dtype=torch.float32) -> tuple[GSNeRF, ParamStore]:
    torch.manual_seed(cfg.seed)
    model = GSNeRF(cfg.model_config).to(dtype)
    return model, ParamStore.from_module(model, seed=cfg.seed)


def train_step(model: GSNeRF, store: ParamStore, bundles: Sequence[SceneBundle], cfg: TrainConfig,
               step: int) -> StepResult:
    rng = np.random.default_rng([cfg.seed, step])
    dtype = next(model.parameters()).dtype
    _, target, sources = select_views(bundles, cfg.k, rng)
    cams = [v.cam for v in sources]
    images = images_to_tensor([v.image for v in sources], dtype)
    out = model.reason(images, cams)

    if cfg.mode == "with_gt_depth":
        gt = torch.as_tensor(np.stack([v.depth.values for v in sources]), dtype=dtype)
        valid = torch.as_tensor(np.stack([v.depth.valid for v in sources]))
        l_depth, ssl = loss_depth(out.depth, gt, valid), None
    else:
        l_depth, ssl = None, loss_ssl(images, out.depth, cams)

    cam_t = target.cam
    depth_t = model.target_depth(out, cams, cam_t)
    H, W = cam_t.height, cam_t.width
    flat = rng.choice(H * W, size=min(cfg.batch_rays, H * W), replace=False)
    pixels = np.stack([flat % W, flat // W], axis=1)
    rays = make_rays(cam_t, pixels, depth_t, dtype)
    ts = draw_samples(rays, sampling_kind(cfg, step), cfg.n_samples, rng)
    sem_ts = None
    if cfg.semantic == "uniform" and sampling_kind(cfg, step) != "uniform":
        sem_ts = draw_samples(rays, "uniform", cfg.n_samples, rng)
    res = model.render_rays(out, cams, rays, ts, semantic=cfg.semantic, sem_ts=sem_ts)

    gt_rgb = torch.as_tensor(target.image[pixels[:, 1], pixels[:, 0]], dtype=dtype)
    labels = torch.as_tensor(target.semantics[pixels[:, 1], pixels[:, 0]])
    report = total_loss(loss_image(res.rgb, gt_rgb), loss_sem(res.logits, labels), cfg.mode,
                        l_depth=l_depth, ssl=ssl, sem_weight=cfg.sem_weight, n_rays=len(pixels))
    if not torch.isfinite(report.total):
        raise NumericError(f"non-finite loss at step {step}")
    backward(report.total, store)
    lr = lr_schedule(step, cfg.total_steps, cfg.lr_start, cfg.lr_end)
    adam_step(store, lr)
    return StepResult(step, report.scalars(), lr)


def save_checkpoint(path, store: ParamStore, cfg: TrainConfig) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save({"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "config": asdict(cfg),
                "state": store.state_dict()}, tmp)
    tmp.replace(path)


def read_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint at {path}")
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise io.BundleIOError(f"{path} is not a checkpoint file", path)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise io.BundleIOError(f"{path}: checkpoint version {blob.get('version')} unsupported", path)
    return blob


def config_from_checkpoint(blob: dict, **overrides) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    values = {k: v for k, v in blob["config"].items() if k in known}
    values.update(overrides)
    return TrainConfig(**values)


def load_model(path, dtype=torch.float32) -> tuple[GSNeRF, ParamStore, TrainConfig]:
    blob = read_checkpoint(path)
    cfg = config_from_checkpoint(blob)
    model, store = build_model(cfg, dtype)
    store.load_state_dict(blob["state"])
    return model, store, cfg


def _fmt(x: float) -> str:
    return "" if math.isnan(x) else repr(float(x))


def train(cfg: TrainConfig, bundles: Sequence[SceneBundle] | None = None, resume: bool = False,
          steps: int | None = None) -> TrainResult:
    """Run (or continue) training; `steps` caps how many steps this call performs."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, metrics = out / "checkpoint.pt", out / "metrics.csv"
    if bundles is None:
        bundles = load_split(cfg.data_dir, "train", load_depth=cfg.mode == "with_gt_depth")
    model, store = build_model(cfg)
    if resume and ckpt.exists():
        store.load_state_dict(read_checkpoint(ckpt)["state"])
        log.info("resuming at step %d", store.step)
    else:
        with metrics.open("w", newline="") as f:
            csv.writer(f).writerow(METRIC_COLUMNS)
    end = cfg.total_steps if steps is None else min(cfg.total_steps, store.step + steps)
    history: list[StepResult] = []
    t0 = time.time()
    with metrics.open("a", newline="") as f:
        writer = csv.writer(f)
        while store.step < end:
            step = store.step
            try:
                r = train_step(model, store, bundles, cfg, step)
            except NumericError:
                f.flush()
                log.error("numeric failure at step %d; keeping last checkpoint", step)
                raise
            history.append(r)
            s = r.scalars
            writer.writerow([step, _fmt(s["l_image"]), _fmt(s["l_depth"]), _fmt(s["l_ssl"]), _fmt(s["l_sem"]),
                             _fmt(s["total"]), repr(r.lr)])
            if (step + 1) % cfg.log_every == 0:
                f.flush()
                log.info("step %d total %.4f image %.4f sem %.4f (%.2fs/step)", step + 1, s["total"],
                         s["l_image_mean"], s["l_sem"], (time.time() - t0) / len(history))
            if (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(ckpt, store, cfg)
    save_checkpoint(ckpt, store, cfg)
    return TrainResult(ckpt, metrics, history)
