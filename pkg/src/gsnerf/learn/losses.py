"""Training losses: rendering, depth supervision, self-supervised depth, semantics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ..geometry import CameraView
from ..metrics import ssim_map
from ..reasoner import cam_tensors, in_frame, normalize_pixels, project_points

SEM_WEIGHT = 0.5  # lambda
SSL_WEIGHTS = (1.0, 0.2, 0.0067)  # reconstruction, SSIM, smoothness
SMOOTH_L1_BETA = 1.0
MODES = ("with_gt_depth", "self_supervised")


@dataclass
class LossReport:
    l_image: torch.Tensor
    l_sem: torch.Tensor
    total: torch.Tensor
    mode: str
    l_depth: torch.Tensor | None = None
    l_ssl: torch.Tensor | None = None
    l_rc: torch.Tensor | None = None
    l_ssim: torch.Tensor | None = None
    l_smooth: torch.Tensor | None = None
    n_rays: int = 1
    weights: dict = field(default_factory=lambda: {"lambda": SEM_WEIGHT, "lambda1": SSL_WEIGHTS[0],
                                                   "lambda2": SSL_WEIGHTS[1], "lambda3": SSL_WEIGHTS[2]})

    def scalars(self) -> dict[str, float]:
        def f(x):
            return float("nan") if x is None else float(x.detach() if torch.is_tensor(x) else x)

        return {"l_image": f(self.l_image), "l_image_mean": f(self.l_image) / max(self.n_rays, 1),
                "l_depth": f(self.l_depth), "l_ssl": f(self.l_ssl), "l_rc": f(self.l_rc),
                "l_ssim": f(self.l_ssim), "l_smooth": f(self.l_smooth), "l_sem": f(self.l_sem),
                "total": f(self.total)}


def loss_image(rendered: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Sum over rays of the squared color error."""
    if rendered.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(rendered.shape)} vs {tuple(gt.shape)}")
    return ((rendered - gt) ** 2).sum()


def smooth_l1(x: torch.Tensor, beta: float = SMOOTH_L1_BETA) -> torch.Tensor:
    ax = x.abs()
    return torch.where(ax < beta, 0.5 * x * x / beta, ax - 0.5 * beta)


def loss_depth(pred: torch.Tensor, gt: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Smooth-L1 depth error averaged over valid pixels of each view, then over views.

    pred, gt, valid: (K, H, W).
    """
    if pred.shape != gt.shape or pred.shape != valid.shape:
        raise ValueError("depth prediction, ground truth and mask shapes differ")
    valid = valid.to(torch.bool)
    counts = valid.flatten(1).sum(dim=1)
    if not bool(counts.any()):
        raise ValueError("no valid ground-truth depth pixels")
    err = torch.where(valid, smooth_l1(pred - gt.to(pred.dtype)), torch.zeros_like(pred))
    has = counts > 0
    per_view = err.flatten(1).sum(dim=1)[has] / counts[has].to(pred.dtype)
    return per_view.mean()


def loss_sem(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean softmax cross-entropy; logits (R, C), integer labels (R,)."""
    C = logits.shape[-1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= C):
        raise ValueError(f"label outside [0, {C})")
    return F.cross_entropy(logits, labels.long(), reduction="mean")


def warp_from(images: torch.Tensor, depths: torch.Tensor, cams: Sequence[CameraView], k: int, j: int):
    """Reconstruct view k by sampling image j at the reprojection of view k's depth map.

    Returns (3, H, W) reconstruction and the (H, W) in-frame mask.
    """
    H, W = depths.shape[-2:]
    Ks, Rs, ts = cam_tensors(cams, depths.dtype)
    v, u = torch.meshgrid(torch.arange(H, dtype=depths.dtype), torch.arange(W, dtype=depths.dtype), indexing="ij")
    Kk = Ks[k]
    rays = torch.stack([(u - Kk[0, 2]) / Kk[0, 0], (v - Kk[1, 2]) / Kk[1, 1], torch.ones_like(u)], dim=-1)
    world = (depths[k].unsqueeze(-1) * rays) @ Rs[k].T + ts[k]
    uv, z = project_points(world, Ks[j], Rs[j], ts[j])
    mask = in_frame(uv, z, W, H)
    grid = normalize_pixels(uv, W, H).unsqueeze(0)
    rec = F.grid_sample(images[j:j + 1], grid, mode="bilinear", padding_mode="border", align_corners=True)[0]
    return rec, mask


def _edge_aware_smoothness(depth: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
    """Mean |first difference of depth| weighted by exp(-|image gradient|); depth (H, W), image (3, H, W)."""
    dx = (depth[:, 1:] - depth[:, :-1]).abs()
    dy = (depth[1:, :] - depth[:-1, :]).abs()
    ix = (image[:, :, 1:] - image[:, :, :-1]).abs().mean(dim=0)
    iy = (image[:, 1:, :] - image[:, :-1, :]).abs().mean(dim=0)
    return 0.5 * ((dx * torch.exp(-ix)).mean() + (dy * torch.exp(-iy)).mean())


def loss_ssl(images: torch.Tensor, depths: torch.Tensor, cams: Sequence[CameraView],
             weights: tuple[float, float, float] = SSL_WEIGHTS):
    """Cross-view photometric consistency of predicted depth maps.

    images (K, 3, H, W), depths (K, H, W). Each view k is reconstructed from
    every other view j through D_k; reconstruction MSE and 1 - SSIM are taken
    over in-frame pixels and averaged over ordered pairs. Returns
    (total, l_rc, l_ssim, l_smooth).
    """
    n = len(cams)
    if n < 2:
        raise ValueError("self-supervised depth loss needs at least two views")
    rc_terms, ssim_terms = [], []
    for k in range(n):
        for j in range(n):
            if j == k:
                continue
            rec, mask = warp_from(images, depths, cams, k, j)
            m = mask.to(images.dtype)
            cnt = m.sum()
            if cnt == 0:
                continue
            rc_terms.append((((rec - images[k]) ** 2).mean(dim=0) * m).sum() / cnt)
            s = ssim_map(rec[None], images[k:k + 1])[0].mean(dim=0)
            ssim_terms.append(((1.0 - s) * m).sum() / cnt)
    zero = images.sum() * 0.0
    l_rc = torch.stack(rc_terms).mean() if rc_terms else zero
    l_ssim = torch.stack(ssim_terms).mean() if ssim_terms else zero
    l_smooth = torch.stack([_edge_aware_smoothness(depths[k], images[k]) for k in range(n)]).mean()
    total = weights[0] * l_rc + weights[1] * l_ssim + weights[2] * l_smooth
    return total, l_rc, l_ssim, l_smooth


def total_loss(l_image, l_sem, mode: str, l_depth=None, ssl=None, sem_weight: float = SEM_WEIGHT,
               n_rays: int = 1) -> LossReport:
    """Combine parts: image + depth + lambda*sem, or image + ssl + lambda*sem.

    `ssl` is the (total, rc, ssim, smooth) tuple from `loss_ssl`.
    """
    if mode == "with_gt_depth":
        if l_depth is None:
            raise ValueError("with_gt_depth mode needs the depth loss")
        total = l_image + l_depth + sem_weight * l_sem
        return LossReport(l_image, l_sem, total, mode, l_depth=l_depth, n_rays=n_rays)
    if mode == "self_supervised":
        if ssl is None:
            raise ValueError("self_supervised mode needs the ssl loss")
        total = l_image + ssl[0] + sem_weight * l_sem
        return LossReport(l_image, l_sem, total, mode, l_ssl=ssl[0], l_rc=ssl[1], l_ssim=ssl[2],
                          l_smooth=ssl[3], n_rays=n_rays)
    raise ValueError(f"unknown supervision mode {mode!r}; expected one of {MODES}")
