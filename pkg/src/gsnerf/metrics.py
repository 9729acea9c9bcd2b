"""Image and segmentation quality metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_WINDOW = 3
PSNR_CAP = 99.0


@dataclass
class EvalReport:
    psnr: float
    ssim: float
    miou: float
    pixel_acc: float
    class_acc: float
    per_class_iou: np.ndarray = field(default_factory=lambda: np.zeros(0))
    n_pixels: int = 0


def _check_shapes(a, b):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; identical images give +inf."""
    _check_shapes(a, b)
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def ssim_map(a: torch.Tensor, b: torch.Tensor, c1: float = SSIM_C1, c2: float = SSIM_C2,
             window: int = SSIM_WINDOW) -> torch.Tensor:
    """Local SSIM with a box window; a, b (N, C, H, W) -> (N, C, H, W).

    Borders use reflect padding so the map keeps the input resolution.
    """
    pad = window // 2

    def box(x):
        x = F.pad(x, (pad, pad, pad, pad), mode="reflect") if pad else x
        return F.avg_pool2d(x, window, stride=1)

    mu_a, mu_b = box(a), box(b)
    var_a = box(a * a) - mu_a ** 2
    var_b = box(b * b) - mu_b ** 2
    cov = box(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b) -> float:
    """Mean local SSIM of the channel-mean grayscale images."""
    _check_shapes(a, b)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 3:
        a, b = a.mean(axis=-1), b.mean(axis=-1)
    ta = torch.from_numpy(a)[None, None]
    tb = torch.from_numpy(b)[None, None]
    return float(ssim_map(ta, tb).mean())


def confusion_matrix(pred, gt, n_classes: int) -> np.ndarray:
    pred = np.asarray(pred).ravel().astype(np.int64)
    gt = np.asarray(gt).ravel().astype(np.int64)
    _check_shapes(pred, gt)
    for name, arr in (("prediction", pred), ("ground truth", gt)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ValueError(f"{name} label outside [0, {n_classes})")
    return np.bincount(gt * n_classes + pred, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def seg_metrics(pred, gt, n_classes: int):
    """(miou, pixel_acc, class_acc, per_class_iou); rows of the confusion matrix are GT.

    Classes absent from both prediction and GT get NaN IoU and are left out of
    the mean; class accuracy averages recall over GT-present classes.
    """
    cm = confusion_matrix(pred, gt, n_classes).astype(np.float64)
    tp = np.diag(cm)
    gt_count = cm.sum(axis=1)
    pred_count = cm.sum(axis=0)
    union = gt_count + pred_count - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
        recall = np.where(gt_count > 0, tp / gt_count, np.nan)
    miou = float(np.nanmean(iou)) if np.any(union > 0) else 1.0
    total = cm.sum()
    pixel_acc = float(tp.sum() / total) if total else 1.0
    class_acc = float(np.nanmean(recall)) if np.any(gt_count > 0) else 1.0
    return miou, pixel_acc, class_acc, iou


def evaluate(rgb, rgb_gt, labels, labels_gt, n_classes: int) -> EvalReport:
    miou, acc, cacc, iou = seg_metrics(labels, labels_gt, n_classes)
    return EvalReport(psnr(rgb, rgb_gt), ssim(rgb, rgb_gt), miou, acc, cacc, iou, int(np.size(labels_gt)))


def psnr_for_csv(value: float) -> float:
    return min(value, PSNR_CAP)
