"""Depth-guided rendering: per-point multi-view feature aggregation, the volume
renderer (density + color), compositing, and the surface-point semantic renderer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import CameraView
from .reasoner import ReasonerOutput, bilinear_lookup, cam_tensors, in_frame, lookup_volume, project_points

OCCLUSION_EPS_FRACTION = 0.02
PE_OCTAVES = 4


@dataclass
class AggregatedFeature:
    rows: torch.Tensor  # (P, K, c) per-view features, masked rows zeroed
    global_: torch.Tensor  # (P, 2c) [masked mean; masked variance]
    mask: torch.Tensor  # (P, K) bool, the mask actually applied
    fallback: torch.Tensor  # (P,) bool, all views were masked

    @property
    def full_mask(self) -> torch.Tensor:
        """(P, K+1) mask with the always-on global row first."""
        ones = torch.ones_like(self.mask[:, :1])
        return torch.cat([ones, self.mask], dim=1)


def positional_encoding(x: torch.Tensor, octaves: int = PE_OCTAVES) -> torch.Tensor:
    freqs = (2.0 ** torch.arange(octaves, dtype=x.dtype)) * torch.pi
    ang = x.unsqueeze(-1) * freqs  # (..., 3, F)
    return torch.cat([x, torch.sin(ang).flatten(-2), torch.cos(ang).flatten(-2)], dim=-1)


def pe_dim(octaves: int = PE_OCTAVES) -> int:
    return 3 + 6 * octaves


def masked_moments(rows: torch.Tensor, mask: torch.Tensor):
    """Mean and population variance over views using only masked-in rows.

    rows (P, K, c), mask (P, K) -> mean (P, c), var (P, c), effective mask and
    fallback flag; points with no view left use all K views.
    """
    fallback = ~mask.any(dim=1)
    eff = mask | fallback.unsqueeze(1)
    w = eff.unsqueeze(-1).to(rows.dtype)
    count = w.sum(dim=1)
    # moments about the first kept row, so identical rows give exactly zero variance
    first = eff.to(torch.int8).argmax(dim=1)
    center = rows[torch.arange(rows.shape[0]), first].unsqueeze(1)
    diff = rows - center
    shift = (w * diff).sum(dim=1) / count
    var = (w * (diff - shift.unsqueeze(1)) ** 2).sum(dim=1) / count
    return center.squeeze(1) + shift, var, eff, fallback


@dataclass
class ViewGeometry:
    """Projections of a point batch into all source views."""

    uv: torch.Tensor  # (K, P, 2)
    z: torch.Tensor  # (K, P)
    inside: torch.Tensor  # (K, P)
    visible: torch.Tensor  # (K, P) in frame and not behind the view's depth map


def view_geometry(points: torch.Tensor, out: ReasonerOutput, cams: Sequence[CameraView],
                  depths: torch.Tensor | None = None) -> ViewGeometry:
    """Reproject points (P, 3) into every source view and apply the occlusion test."""
    Ks, Rs, ts = cam_tensors(cams, points.dtype)
    H, W = out.f_image.shape[-2:]
    uvs, zs = [], []
    for k in range(len(cams)):
        uv, z = project_points(points, Ks[k], Rs[k], ts[k])
        uvs.append(uv)
        zs.append(z)
    uv, z = torch.stack(uvs), torch.stack(zs)
    inside = in_frame(uv, z, W, H)
    depth = (out.depth if depths is None else depths).detach()
    d_at = bilinear_lookup(depth.unsqueeze(1), uv)[..., 0]  # (K, P)
    eps = torch.tensor([OCCLUSION_EPS_FRACTION * (c.far - c.near) for c in cams], dtype=points.dtype)
    visible = inside & (z <= d_at + eps[:, None])
    return ViewGeometry(uv, z, inside, visible)


def aggregate_features(points: torch.Tensor, out: ReasonerOutput, cams: Sequence[CameraView],
                       geom: ViewGeometry | None = None) -> AggregatedFeature:
    """Rows [f_image(w(x)); f_volume(x)] for every source view plus the masked global row."""
    geom = geom if geom is not None else view_geometry(points, out, cams)
    f_img = bilinear_lookup(out.f_image, geom.uv)  # (K, P, d)
    f_vol, vol_inside = lookup_volume(out.volume, out.planes, geom.uv, geom.z)
    rows = torch.cat([f_img, f_vol], dim=-1).transpose(0, 1)  # (P, K, 2d)
    mask = (geom.visible & vol_inside).transpose(0, 1)
    mean, var, eff, fallback = masked_moments(rows, mask)
    rows = rows * eff.unsqueeze(-1).to(rows.dtype)
    return AggregatedFeature(rows, torch.cat([mean, var], dim=-1), eff, fallback)


def aggregate_semantic(points: torch.Tensor, out: ReasonerOutput, cams: Sequence[CameraView],
                       geom: ViewGeometry | None = None) -> AggregatedFeature:
    """Semantic features f_sem(w(x)) per view plus the masked global row."""
    geom = geom if geom is not None else view_geometry(points, out, cams)
    rows = bilinear_lookup(out.f_sem, geom.uv).transpose(0, 1)  # (P, K, d)
    mask = geom.visible.transpose(0, 1)
    mean, var, eff, fallback = masked_moments(rows, mask)
    rows = rows * eff.unsqueeze(-1).to(rows.dtype)
    return AggregatedFeature(rows, torch.cat([mean, var], dim=-1), eff, fallback)


def masked_pool(emb: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    w = mask.unsqueeze(-1).to(emb.dtype)
    return (w * emb).sum(dim=1) / w.sum(dim=1).clamp_min(1.0)


class VolumeRenderer(nn.Module):
    """Per-point density and color from the aggregated multi-view features.

    A shared MLP embeds each view row, the embeddings are mean-pooled under the
    mask and joined with the embedded global row and positional encodings.
    """

    def __init__(self, d: int = 8, hidden: int = 32):
        super().__init__()
        self.view_mlp = nn.Sequential(nn.Linear(2 * d, hidden), nn.SiLU(), nn.Linear(hidden, hidden), nn.SiLU())
        self.global_mlp = nn.Sequential(nn.Linear(4 * d, hidden), nn.SiLU(), nn.Linear(hidden, hidden), nn.SiLU())
        self.trunk = nn.Sequential(nn.Linear(2 * hidden + pe_dim(), hidden), nn.SiLU())
        self.density = nn.Linear(hidden, 1)
        self.color = nn.Sequential(nn.Linear(hidden + pe_dim(), hidden), nn.SiLU(), nn.Linear(hidden, 3))

    def forward(self, x: torch.Tensor, direction: torch.Tensor, feat: AggregatedFeature):
        emb = self.view_mlp(feat.rows)
        pooled = masked_pool(emb, feat.mask)
        h = self.trunk(torch.cat([pooled, self.global_mlp(feat.global_), positional_encoding(x)], dim=-1))
        sigma = F.softplus(self.density(h)).squeeze(-1)
        rgb = torch.sigmoid(self.color(torch.cat([h, positional_encoding(direction)], dim=-1)))
        return sigma, rgb


class SemanticRenderer(nn.Module):
    """Class logits at a single surface point from the aggregated semantic features."""

    def __init__(self, d: int = 8, n_classes: int = 6, hidden: int = 32):
        super().__init__()
        self.view_mlp = nn.Sequential(nn.Linear(d, hidden), nn.SiLU(), nn.Linear(hidden, hidden), nn.SiLU())
        self.global_mlp = nn.Sequential(nn.Linear(2 * d, hidden), nn.SiLU(), nn.Linear(hidden, hidden), nn.SiLU())
        self.head = nn.Sequential(nn.Linear(2 * hidden + pe_dim(), hidden), nn.SiLU(), nn.Linear(hidden, n_classes))

    def forward(self, x: torch.Tensor, feat: AggregatedFeature) -> torch.Tensor:
        pooled = masked_pool(self.view_mlp(feat.rows), feat.mask)
        return self.head(torch.cat([pooled, self.global_mlp(feat.global_), positional_encoding(x)], dim=-1))


def composite(ts, sigmas, colors, far):
    """Alpha-composite sorted samples along each ray.

    ts, sigmas (R, N); colors (R, N, C); far (R,) or scalar. The last interval
    runs to the far bound. Returns color (R, C), residual transmittance (R,)
    and the per-sample weights (R, N).
    """
    ts = torch.as_tensor(ts)
    sigmas = torch.as_tensor(sigmas)
    colors = torch.as_tensor(colors)
    if ts.dim() == 1:
        return tuple(o[0] for o in composite(ts[None], sigmas[None], colors[None], far))
    if torch.any(ts[:, 1:] < ts[:, :-1]):
        raise ValueError("sample positions must be sorted ascending")
    far = torch.as_tensor(far, dtype=ts.dtype).expand(ts.shape[0]).unsqueeze(-1)
    delta = torch.cat([ts[:, 1:] - ts[:, :-1], far - ts[:, -1:]], dim=1)
    tau = sigmas * delta
    csum = torch.cumsum(tau, dim=1)
    trans = torch.exp(-torch.cat([torch.zeros_like(csum[:, :1]), csum[:, :-1]], dim=1))
    alpha = 1.0 - torch.exp(-tau)
    weights = trans * alpha
    rgb = (weights.unsqueeze(-1) * colors).sum(dim=1)
    return rgb, torch.exp(-csum[:, -1]), weights
