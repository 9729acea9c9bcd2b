"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line in the terminal summary.

Criteria 5 to 8 need four trained desk models. They are cached under
runs/acceptance (override with GSNERF_ACCEPTANCE_DIR); a missing or unfinished
run is trained (or resumed) on first use, which takes hours on one CPU.
"""

import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch

from gsnerf import io
from gsnerf.config import Config
from gsnerf.experiments import evaluate_bundles, generate_dataset, load_test_split, sweep_samples
from gsnerf.geometry import CameraView, DepthMap, estimate_target_depth, look_at
from gsnerf.learn.losses import SEM_WEIGHT, SSL_WEIGHTS
from gsnerf.learn.params import LR_END, LR_START
from gsnerf.learn.train import load_model, read_checkpoint, train
from gsnerf.metrics import PSNR_CAP, SSIM_C1, psnr, psnr_for_csv, seg_metrics, ssim
from gsnerf.render import composite
from gsnerf.sampling import depth_guided, gaussian_sigma

import oracles
from conftest import ACCEPTANCE_LINES, pipeline_gradient_errors

ROOT = Path(__file__).resolve().parent.parent
RUN_DIR = Path(os.environ.get("GSNERF_ACCEPTANCE_DIR", ROOT / "runs" / "acceptance"))
DESK_STEPS = int(os.environ.get("GSNERF_DESK_STEPS", "10000"))
# one CPU core: 4 source views and a faster start to the decay stand in for the reference 8 views and 20k steps
DESK = dict(k=4, lr_start=2e-3)

# pinned after the first baseline run, then frozen
MIN_TEST_MIOU = 0.60
MIN_TEST_PSNR = 24.0

RUNS = {
    "full": {},
    "self_supervised": {"mode": "self_supervised"},
    "uniform_semantic": {"semantic": "uniform"},
    "uniform_image": {"image_sampling": "uniform", "semantic": "uniform"},
}


def report(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# --- criterion 1 ---------------------------------------------------------------


def random_depth_config(rng):
    size = int(rng.integers(4, 17))
    k = int(rng.integers(1, 5))
    c = (size - 1) / 2
    target = CameraView.from_params(size, size, c, c, size, size, 1.0, 6.0,
                                    look_at(rng.normal(scale=0.3, size=3) + [0, 0, -3], [0, 0, 0]))
    cams, depths = [], []
    for _ in range(k):
        pose = look_at(rng.normal(scale=0.5, size=3) + [0, 0, -3], rng.normal(scale=0.2, size=3))
        cams.append(CameraView.from_params(size, size, c, c, size, size, 1.0, 6.0, pose))
        d = rng.uniform(2.0, 4.0, size=(size, size))
        d[rng.random((size, size)) < 0.1] = 0.0
        depths.append(d)
    return depths, cams, target


def test_criterion_1_target_depth_matches_splat_oracle():
    rng = np.random.default_rng(2024)
    elapsed, worst, mismatched = 0.0, 0.0, 0
    for _ in range(50):
        depths, cams, target = random_depth_config(rng)
        t0 = time.perf_counter()
        out = estimate_target_depth([DepthMap(d) for d in depths], cams, target)
        elapsed += time.perf_counter() - t0
        ref, valid = oracles.splat_target_depth(depths, cams, target)
        mismatched += int(np.count_nonzero(out.valid != valid))
        if valid.any():
            worst = max(worst, float(np.abs(out.values[valid] - ref[valid]).max()))
    ok = mismatched == 0 and worst <= 1e-9 and elapsed < 5.0
    report(1, ok, f"50 configs, max |diff| {worst:.1e}, validity mismatches {mismatched}, {elapsed:.2f} s")


# --- criterion 2 ---------------------------------------------------------------


def test_criterion_2_compositing_conservation():
    rng = np.random.default_rng(7)
    worst, count = 0.0, 0
    for n in range(1, 17):
        rays = 625
        far = 6.0
        ts = np.sort(rng.uniform(0.5, far, (rays, n)), axis=1)
        sig = rng.exponential(2.0, (rays, n)) * (rng.random((rays, n)) < 0.7)
        _, res, w = composite(torch.tensor(ts), torch.tensor(sig), torch.tensor(rng.random((rays, n, 3))), far)
        worst = max(worst, float((w.sum(dim=1) + res - 1.0).abs().max()))
        count += rays
    ts = torch.tensor([1.0, 2.0], dtype=torch.float64)
    _, _, w = composite(ts, torch.full((2,), float(np.log(2.0)), dtype=torch.float64), torch.ones(2, 3,
                                                                                               dtype=torch.float64), 3.0)
    ln2 = float(np.abs(w.numpy() - [0.5, 0.25]).max())
    ok = count == 10_000 and worst <= 1e-6 and ln2 <= 1e-9
    report(2, ok, f"{count} rays, max |sum - 1| {worst:.1e}, ln 2 weights off by {ln2:.1e}")


# --- criterion 3 ---------------------------------------------------------------


def test_criterion_3_full_pipeline_gradients(tiny_bundle):
    assert tiny_bundle.target.image.shape[:2] == (8, 8) and len(tiny_bundle.sources) == 2
    t0 = time.perf_counter()
    errors, n_params = pipeline_gradient_errors(tiny_bundle, per_param=4)
    elapsed = time.perf_counter() - t0
    worst = max(errors.values())
    ok = len(errors) == n_params and worst < 1e-4 and elapsed < 60.0
    report(3, ok, f"{n_params} parameters, max relative error {worst:.1e}, {elapsed:.1f} s")


# --- criterion 4 ---------------------------------------------------------------


def test_criterion_4_sampling_statistics():
    ts = depth_guided(np.full(100_000, 2.0), 0.5, 5.0, 1, np.random.default_rng(11))[:, 0]
    mean_err = abs(ts.mean() - 2.0) / 2.0
    std_err = abs(ts.std() - 0.5) / 0.5
    bounded = bool(ts.min() >= 0.5 and ts.max() <= 5.0)
    arith = gaussian_sigma(2.0, 0.5, 5.0) == 0.5 and abs(gaussian_sigma(4.7, 0.5, 5.0) - 0.1) <= 1e-15
    ok = mean_err <= 0.01 and std_err <= 0.02 and bounded and arith
    report(4, ok, f"mean off {mean_err:.2%}, std off {std_err:.2%}, in bounds {bounded}, v cases {arith}")


# --- criterion 9 ---------------------------------------------------------------


def test_criterion_9_metric_units_and_constants():
    a = np.zeros((4, 4, 3))
    checks = {
        "psnr 0.1": abs(psnr(a, a + 0.1) - 20.0) <= 1e-9,
        "psnr identical": np.isinf(psnr(a, a)) and psnr_for_csv(psnr(a, a)) == PSNR_CAP,
        "ssim identical": abs(ssim(a + 0.3, a + 0.3) - 1.0) <= 1e-12,
        "ssim black/white": abs(ssim(np.zeros((8, 8)), np.ones((8, 8))) - SSIM_C1 / (1 + SSIM_C1)) <= 1e-12,
        "seg perfect": seg_metrics(np.array([0, 1, 2]), np.array([0, 1, 2]), 6)[:3] == (1.0, 1.0, 1.0),
        "seg hand count": seg_metrics(np.zeros(4, int), np.array([0, 0, 1, 1]), 2)[:3] == (0.25, 0.5, 0.5),
        "lambda": SEM_WEIGHT == 0.5 and Config().sem_weight == 0.5,
        "ssl weights": SSL_WEIGHTS == (1.0, 0.2, 0.0067),
        "k": Config().k == 8,
        "lr": (LR_START, LR_END) == (5e-4, 1e-5) and (Config().lr_start, Config().lr_end) == (5e-4, 1e-5),
    }
    failed = [k for k, v in checks.items() if not v]
    report(9, not failed, f"{len(checks) - len(failed)}/{len(checks)} checks" + (f", failed {failed}" if failed else ""))


# --- desk experiments (criteria 5 to 8) -----------------------------------------


@pytest.fixture(scope="module")
def desk_data():
    data = RUN_DIR / "data"
    if len(io.list_scenes(data / "train")) != 8 or len(io.list_scenes(data / "test")) != 2:
        generate_dataset(data)
    return data


def desk_config(name: str, data: Path):
    cfg = Config().with_overrides(total_steps=DESK_STEPS, data_dir=str(data), **DESK, **RUNS[name])
    return cfg.train_config(RUN_DIR / name)


def trained(name: str, data: Path):
    """Checkpoint for a desk run, training or resuming it when needed."""
    cfg = desk_config(name, data)
    ckpt = Path(cfg.out_dir) / "checkpoint.pt"
    done = ckpt.exists() and read_checkpoint(ckpt)["state"]["step"] >= cfg.total_steps
    if not done:
        train(cfg, resume=ckpt.exists())
    model, _, saved = load_model(ckpt)
    assert replace(saved, data_dir=cfg.data_dir, out_dir=cfg.out_dir) == cfg, "cached run has other settings"
    return model, saved


@pytest.fixture(scope="module")
def test_scenes(desk_data):
    return load_test_split(desk_data)


@pytest.fixture(scope="module")
def evaluations(desk_data, test_scenes):
    """Mean test metrics per run, computed once."""
    out = {}

    def get(name):
        if name not in out:
            model, cfg = trained(name, desk_data)
            with torch.no_grad():
                reports = evaluate_bundles(model, test_scenes, cfg)
            out[name] = dict(psnr=float(np.mean([psnr_for_csv(r.psnr) for r in reports])),
                             miou=float(np.mean([r.miou for r in reports])), model=model, cfg=cfg)
        return out[name]

    return get


def test_criterion_5_sampling_efficiency(evaluations, test_scenes):
    run = evaluations("full")
    rows = sweep_samples(run["model"], test_scenes, run["cfg"], [4, 64])
    got = {(n, mode): p for n, mode, p in rows}
    guided4, uniform4, uniform64 = got[4, "depth_guided"], got[4, "uniform"], got[64, "uniform"]
    ok = guided4 >= uniform64 - 1.5 and guided4 >= uniform4 + 1.0
    report(5, ok, f"guided N=4 {guided4:.2f} dB, uniform N=4 {uniform4:.2f} dB, uniform N=64 {uniform64:.2f} dB "
                  f"({DESK_STEPS} steps)")


def test_criterion_6_ablation_ordering(evaluations):
    full = evaluations("full")["miou"]
    a = evaluations("uniform_semantic")["miou"]
    b = evaluations("uniform_image")["miou"]
    ok = full > a and full > b
    report(6, ok, f"mIoU full {full:.4f}, uniform semantic {a:.4f} (margin {full - a:+.4f}), "
                  f"uniform image {b:.4f} (margin {full - b:+.4f})")


def test_criterion_7_generalization(evaluations, test_scenes):
    run = evaluations("full")
    # evaluation leaves the weights untouched
    before = {n: p.detach().clone() for n, p in run["model"].named_parameters()}
    with torch.no_grad():
        evaluate_bundles(run["model"], test_scenes[:1], run["cfg"])
    unchanged = all(torch.equal(before[n], p) for n, p in run["model"].named_parameters())
    train_ids = {b.scene_id for b in load_test_split(run["cfg"].data_dir, "train")}
    held_out = not train_ids & {b.scene_id for b in test_scenes}
    ok = unchanged and held_out and run["miou"] >= MIN_TEST_MIOU and run["psnr"] >= MIN_TEST_PSNR
    report(7, ok, f"test mIoU {run['miou']:.4f} (>= {MIN_TEST_MIOU}), PSNR {run['psnr']:.2f} dB "
                  f"(>= {MIN_TEST_PSNR}), held out {held_out}, weights unchanged {unchanged}")


def test_criterion_8_self_supervised(evaluations, desk_data):
    seen = []
    io.depth_read_hooks.append(seen.append)
    try:
        cfg = desk_config("self_supervised", desk_data)
        train(replace(cfg, total_steps=2, out_dir=str(RUN_DIR / "ssl_probe")))
    finally:
        io.depth_read_hooks.remove(seen.append)
    ssl = evaluations("self_supervised")["psnr"]
    gt = evaluations("full")["psnr"]
    ok = not seen and ssl >= gt - 2.0
    report(8, ok, f"self-supervised {ssl:.2f} dB vs GT-depth {gt:.2f} dB (gap {gt - ssl:+.2f}), depth reads {len(seen)}")
