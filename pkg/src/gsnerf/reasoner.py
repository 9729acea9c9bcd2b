"""Geometry/semantic reasoning over the source views.

A shared stride-1 CNN encodes every source image; a semantic decoder maps those
features to semantic features; a plane-sweep cost volume gathers the features of
all views onto fronto-parallel planes of each reference view, from which a
learned map produces the volume feature and per-plane probabilities. Depth is
the probability-weighted mean of the plane depths.

Tensors are channels-first: features (K, d, H, W), volumes (K, d, L, H, W).
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import CameraView


@dataclass
class VolumeFeature:
    values: torch.Tensor  # (d, L, H, W)
    planes: torch.Tensor  # (L,) ascending depths
    prob: torch.Tensor  # (L, H, W)


@dataclass
class ReasonerOutput:
    f_image: torch.Tensor  # (K, d, H, W)
    f_sem: torch.Tensor  # (K, d, H, W)
    volume: torch.Tensor  # (K, d, L, H, W)
    prob: torch.Tensor  # (K, L, H, W)
    planes: torch.Tensor  # (K, L)
    depth: torch.Tensor  # (K, H, W)

    def view_volume(self, k: int) -> VolumeFeature:
        return VolumeFeature(self.volume[k], self.planes[k], self.prob[k])


def plane_depths(near: float, far: float, n_planes: int) -> np.ndarray:
    """Depth hypotheses spaced linearly in inverse depth, ascending."""
    if n_planes < 2:
        return np.array([0.5 * (near + far)])
    return 1.0 / np.linspace(1.0 / near, 1.0 / far, n_planes)


def cam_tensors(cams: Sequence[CameraView], dtype=torch.float64):
    """Stacked intrinsics (K,3,3), rotations (K,3,3) and centers (K,3) as tensors."""
    K = torch.tensor(np.stack([c.intrinsics for c in cams]), dtype=dtype)
    R = torch.tensor(np.stack([c.rotation for c in cams]), dtype=dtype)
    t = torch.tensor(np.stack([c.center for c in cams]), dtype=dtype)
    return K, R, t


def project_points(points: torch.Tensor, K: torch.Tensor, R: torch.Tensor, t: torch.Tensor):
    """World points (..., 3) into one camera: pixels (..., 2) and camera-z depth (...)."""
    p = (points - t) @ R
    z = p[..., 2]
    zs = torch.where(z.abs() > 1e-12, z, torch.full_like(z, 1e-12))
    u = K[0, 0] * p[..., 0] / zs + K[0, 2]
    v = K[1, 1] * p[..., 1] / zs + K[1, 2]
    return torch.stack([u, v], dim=-1), z


def normalize_pixels(uv: torch.Tensor, width: int, height: int) -> torch.Tensor:
    """Pixel-center coordinates -> grid_sample coordinates (align_corners=True)."""
    sx = 2.0 / max(width - 1, 1)
    sy = 2.0 / max(height - 1, 1)
    return torch.stack([uv[..., 0] * sx - 1.0, uv[..., 1] * sy - 1.0], dim=-1)


def in_frame(uv: torch.Tensor, z: torch.Tensor, width: int, height: int) -> torch.Tensor:
    return (z > 0) & (uv[..., 0] >= 0) & (uv[..., 0] < width) & (uv[..., 1] >= 0) & (uv[..., 1] < height)


def bilinear_lookup(maps: torch.Tensor, uv: torch.Tensor) -> torch.Tensor:
    """Sample maps (B, C, H, W) at pixel coordinates uv (B, P, 2) -> (B, P, C)."""
    H, W = maps.shape[-2:]
    grid = normalize_pixels(uv, W, H).unsqueeze(2)
    out = F.grid_sample(maps, grid.to(maps.dtype), mode="bilinear", padding_mode="border", align_corners=True)
    return out.squeeze(-1).transpose(1, 2)


GRID_CACHE_SIZE = 1024  # warp grids kept for reuse; one entry per (reference, source, planes) triple
_grid_cache: OrderedDict = OrderedDict()


def _cam_key(cam: CameraView):
    return cam.intrinsics.tobytes(), cam.pose.tobytes(), cam.width, cam.height


def _pair_grid(ref: CameraView, src: CameraView, planes: np.ndarray, dtype):
    """Grid (L*H, W, 2) and mask (L, H, W) warping `src` onto the planes of `ref`.

    The homogeneous pixel in `src` of the depth-z point behind reference pixel q
    is a + z * M q with a = K_s R_s^T (C_r - C_s) and M = K_s R_s^T R_r K_r^-1.
    """
    key = (_cam_key(ref), _cam_key(src), planes.tobytes(), dtype)
    hit = _grid_cache.get(key)
    if hit is not None:
        _grid_cache.move_to_end(key)
        return hit
    H, W = ref.height, ref.width
    KRt = src.intrinsics @ src.rotation.T
    M = KRt @ ref.rotation @ np.linalg.inv(ref.intrinsics)
    a = KRt @ (ref.center - src.center)
    v, u = np.mgrid[0:H, 0:W]
    q = np.stack([u.ravel(), v.ravel(), np.ones(H * W)]).astype(np.float64)
    p = a[None, :, None] + planes[:, None, None] * (M @ q)[None]  # (L, 3, HW)
    z = p[:, 2]
    zs = np.where(np.abs(z) > 1e-12, z, 1e-12)
    pu, pv = p[:, 0] / zs, p[:, 1] / zs
    mask = (z > 0) & (pu >= 0) & (pu < W) & (pv >= 0) & (pv < H)
    sx, sy = 2.0 / max(W - 1, 1), 2.0 / max(H - 1, 1)
    gx = np.where(mask, np.clip(pu, 0, W - 1) * sx - 1.0, -8.0)
    gy = np.where(mask, np.clip(pv, 0, H - 1) * sy - 1.0, -8.0)
    grid = torch.as_tensor(np.stack([gx, gy], axis=-1).reshape(-1, W, 2), dtype=dtype)
    entry = grid, torch.as_tensor(mask.reshape(-1, H, W))
    _grid_cache[key] = entry
    if len(_grid_cache) > GRID_CACHE_SIZE:
        _grid_cache.popitem(last=False)
    return entry


def sweep_grids(cams: Sequence[CameraView], planes: np.ndarray, dtype=torch.float64):
    """Sampling grids for warping every source view onto every reference view's planes.

    Returns grid (K, K-1, L*H, W, 2) in grid_sample coordinates, a validity mask
    (K, K-1, L, H, W) and the source index table (K, K-1). In-frame locations
    are clamped to the pixel-center range, so zero padding reproduces border
    sampling inside the frame; out-of-frame locations are pushed far outside
    and read back as exact zeros.
    """
    n = len(cams)
    src = torch.tensor([[j for j in range(n) if j != k] for k in range(n)], dtype=torch.long).reshape(n, max(n - 1, 0))
    if n < 2:
        return None, None, src
    planes = np.asarray(np.broadcast_to(planes, (n, np.shape(planes)[-1])), dtype=np.float64)
    pairs = [_pair_grid(cams[k], cams[j], planes[k], dtype) for k in range(n) for j in src[k].tolist()]
    H, W = cams[0].height, cams[0].width
    L = planes.shape[-1]
    grid = torch.stack([g for g, _ in pairs]).view(n, n - 1, L * H, W, 2)
    mask = torch.stack([m for _, m in pairs]).view(n, n - 1, L, H, W)
    return grid, mask, src


def sweep_moments(feats: torch.Tensor, grids: torch.Tensor, masks: torch.Tensor, src: torch.Tensor):
    """Masked mean and variance over views of features warped onto each reference's planes.

    feats (K, d, H, W) -> mean, var (K, d, L, H, W). The reference view's own
    features always take part; warped views only where they land in frame
    (the grids from `sweep_grids` make masked samples read exact zeros).
    """
    n, d, H, W = feats.shape
    L = masks.shape[2]
    warped = F.grid_sample(
        feats[src.reshape(-1)], grids.reshape(-1, L * H, W, 2), mode="bilinear", padding_mode="zeros",
        align_corners=True,
    ).view(n, n - 1, d, L, H, W)
    ref = feats.unsqueeze(2)  # (K, d, 1, H, W)
    count = 1.0 + masks.sum(dim=1, dtype=feats.dtype).unsqueeze(1)  # (K, 1, L, H, W)
    mean = (ref + warped.sum(dim=1)) / count
    sq = (ref * ref + (warped * warped).sum(dim=1)) / count
    return mean, (sq - mean * mean).clamp_min(0.0)


def plane_sweep_moments(ref: int, feats: torch.Tensor, cams: Sequence[CameraView], planes):
    """Mean/variance cost for a single reference view: (d, L, H, W) each."""
    planes = np.asarray(planes, dtype=np.float64)
    grids, masks, src = sweep_grids(cams, planes, feats.dtype)
    mean, var = sweep_moments(feats, grids, masks, src)
    return mean[ref], var[ref]


class Encoder(nn.Module):
    """Three 3x3 stride-1 convolutions, 3 -> d -> d -> d, linear output."""

    def __init__(self, d: int = 8):
        super().__init__()
        self.d = d
        self.conv1 = nn.Conv2d(3, d, 3, padding=1, padding_mode="reflect")
        self.conv2 = nn.Conv2d(d, d, 3, padding=1, padding_mode="reflect")
        self.conv3 = nn.Conv2d(d, d, 3, padding=1, padding_mode="reflect")

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError(f"expected images (K, 3, H, W), got {tuple(images.shape)}")
        x = F.silu(self.conv1(images))
        x = F.silu(self.conv2(x))
        return self.conv3(x)


class SemanticDecoder(nn.Module):
    def __init__(self, d: int = 8):
        super().__init__()
        self.d = d
        self.conv1 = nn.Conv2d(d, d, 3, padding=1, padding_mode="reflect")
        self.conv2 = nn.Conv2d(d, d, 3, padding=1, padding_mode="reflect")

    def forward(self, f_image: torch.Tensor) -> torch.Tensor:
        if f_image.dim() != 4 or f_image.shape[1] != self.d:
            raise ValueError(f"expected features (K, {self.d}, H, W), got {tuple(f_image.shape)}")
        return self.conv2(F.silu(self.conv1(f_image)))


def _pointwise(conv: nn.Conv3d, x: torch.Tensor) -> torch.Tensor:
    w = conv.weight.view(conv.out_channels, conv.in_channels, 1, 1)
    return F.conv2d(x, w, conv.bias)


class CostAggregator(nn.Module):
    """Maps [mean; variance] cost moments to the volume feature and plane scores.

    The score branch regularizes the cost across planes and space with a few
    residual 3x3x3 convolutions run at half resolution (dilated spatially), so
    evidence from textured edges can spread into flat regions.
    """

    def __init__(self, d: int = 8, score_channels: int = 4, dilations: tuple[int, ...] = (1, 2, 4)):
        super().__init__()
        c = score_channels
        self.volume_map = nn.Conv3d(2 * d, d, 1)
        self.score_in = nn.Conv3d(d, c, 1)
        self.context = nn.ModuleList(nn.Conv3d(c, c, 3, padding=(1, r, r), dilation=(1, r, r)) for r in dilations)
        self.score_out = nn.Conv2d(c, 1, 3, padding=1, padding_mode="replicate")

    def forward(self, mean: torch.Tensor, var: torch.Tensor):
        """mean, var (K, d, L, H, W) -> volume (K, d, L, H, W), prob (K, L, H, W)."""
        n, d, L, H, W = mean.shape
        # the 1x1x1 convolutions run as 2D ones over (L*H, W), which is much faster on CPU
        x = torch.cat([mean, var], dim=1).view(n, 2 * d, L * H, W)
        volume = F.silu(_pointwise(self.volume_map, x))
        s = F.silu(_pointwise(self.score_in, volume)).view(n, -1, L, H, W)
        volume = volume.view(n, d, L, H, W)
        h = F.avg_pool3d(s, (1, 2, 2), ceil_mode=True)
        for conv in self.context:
            h = h + F.silu(conv(h))
        up = F.interpolate(h.reshape(n, -1, *h.shape[-2:]), size=(H, W), mode="bilinear", align_corners=False)
        s = (s + up.view(n, -1, L, H, W)).transpose(1, 2).reshape(n * L, -1, H, W)
        score = self.score_out(s).view(n, L, H, W)
        return volume, torch.softmax(score, dim=1)


def predict_depth(prob: torch.Tensor, planes: torch.Tensor) -> torch.Tensor:
    """Soft-argmin: prob (..., L, H, W), planes (..., L) -> expected depth (..., H, W)."""
    return (prob * planes[..., :, None, None]).sum(dim=-3)


class Reasoner(nn.Module):
    def __init__(self, d: int = 8, n_planes: int = 16):
        super().__init__()
        self.d, self.n_planes = d, n_planes
        self.encoder = Encoder(d)
        self.decoder = SemanticDecoder(d)
        self.aggregator = CostAggregator(d)

    def forward(self, images: torch.Tensor, cams: Sequence[CameraView]) -> ReasonerOutput:
        """images (K, 3, H, W) in [0, 1] with their cameras -> ReasonerOutput."""
        if len(cams) < 2:
            raise ValueError("cost volume needs at least two views")
        if images.shape[0] != len(cams):
            raise ValueError("one camera per image required")
        f_image = self.encoder(images)
        f_sem = self.decoder(f_image)
        planes = np.stack([plane_depths(c.near, c.far, self.n_planes) for c in cams])
        grids, masks, src = sweep_grids(cams, planes, images.dtype)
        mean, var = sweep_moments(f_image, grids, masks, src)
        volume, prob = self.aggregator(mean, var)
        planes_t = torch.as_tensor(planes, dtype=images.dtype)
        return ReasonerOutput(f_image, f_sem, volume, prob, planes_t, predict_depth(prob, planes_t))


def build_cost_volume(ref: int, f_images: torch.Tensor, cams: Sequence[CameraView], n_planes: int,
                      aggregator: CostAggregator) -> VolumeFeature:
    if len(cams) < 2:
        raise ValueError("cost volume needs at least two views")
    cam = cams[ref]
    planes = plane_depths(cam.near, cam.far, n_planes)
    mean, var = plane_sweep_moments(ref, f_images, cams, np.broadcast_to(planes, (len(cams), n_planes)))
    volume, prob = aggregator(mean[None], var[None])
    return VolumeFeature(volume[0], torch.as_tensor(planes, dtype=f_images.dtype), prob[0])


def plane_coordinate(z: torch.Tensor, planes: torch.Tensor) -> torch.Tensor:
    """Fractional plane index of camera depth z for inverse-depth-spaced planes."""
    L = planes.shape[-1]
    inv0, inv1 = 1.0 / planes[..., :1], 1.0 / planes[..., -1:]
    zs = torch.where(z > 0, z, torch.ones_like(z))
    return (1.0 / zs - inv0) / (inv1 - inv0) * (L - 1)


def lookup_volume(volume: torch.Tensor, planes: torch.Tensor, uv: torch.Tensor, z: torch.Tensor):
    """Trilinear lookup in (u, v, plane-index).

    volume (B, d, L, H, W), planes (B, L), uv (B, P, 2), z (B, P) ->
    features (B, P, d) zeroed outside the volume, and the inside flag (B, P).
    """
    B, d, L, H, W = volume.shape
    idx = plane_coordinate(z, planes)
    inside = in_frame(uv, z, W, H) & (idx >= -1e-9) & (idx <= L - 1 + 1e-9)
    xy = normalize_pixels(uv, W, H)
    zc = idx * (2.0 / max(L - 1, 1)) - 1.0
    grid = torch.cat([xy, zc.unsqueeze(-1)], dim=-1).view(B, -1, 1, 1, 3).to(volume.dtype)
    out = F.grid_sample(volume, grid, mode="bilinear", padding_mode="border", align_corners=True)
    feats = out.view(B, d, -1).transpose(1, 2)
    return feats * inside.unsqueeze(-1).to(feats.dtype), inside


def sample_volume_feature(vol: VolumeFeature, x, cam: CameraView):
    """Volume feature of one view at world point(s) x; returns (features (..., d), inside flag)."""
    dtype = vol.values.dtype
    x = torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=dtype)
    shape = x.shape[:-1]
    K, R, t = cam_tensors([cam], dtype)
    uv, z = project_points(x.reshape(1, -1, 3), K[0], R[0], t[0])
    feats, inside = lookup_volume(vol.values[None], vol.planes[None], uv, z)
    return feats[0].reshape(*shape, -1), inside[0].reshape(shape)
