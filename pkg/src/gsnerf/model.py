"""End-to-end model: reason over source views, estimate target depth, render rays."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from . import sampling
from .geometry import CameraView, DepthMap, Ray, depth_to_ray_distance, estimate_target_depth, ray_directions
from .reasoner import Reasoner, ReasonerOutput
from .render import (SemanticRenderer, VolumeRenderer, aggregate_features, aggregate_semantic, composite,
                     view_geometry)

SEMANTIC_MODES = ("surface", "uniform")


@dataclass(frozen=True)
class ModelConfig:
    d: int = 8
    n_planes: int = 16
    hidden: int = 32
    n_classes: int = 6


@dataclass
class RayBatch:
    origins: torch.Tensor  # (R, 3)
    dirs: torch.Tensor  # (R, 3) unit
    near: torch.Tensor  # (R,)
    far: torch.Tensor  # (R,)
    surface: torch.Tensor  # (R,) distance along the ray to the estimated surface
    pixels: np.ndarray  # (R, 2) integer (u, v)

    def __len__(self):
        return len(self.pixels)


@dataclass
class RayOutput:
    rgb: torch.Tensor  # (R, 3)
    residual: torch.Tensor  # (R,) transmittance left after the last sample
    logits: torch.Tensor  # (R, C)
    weights: torch.Tensor  # (R, N)
    ts: torch.Tensor  # (R, N)
    fallback: torch.Tensor  # (R,) semantic point had every view masked


def images_to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """(K, H, W, 3) array -> (K, 3, H, W) tensor."""
    return torch.as_tensor(np.asarray(images), dtype=dtype).permute(0, 3, 1, 2).contiguous()


def make_rays(cam: CameraView, pixels, depth_target: DepthMap, dtype=torch.float32) -> RayBatch:
    """Rays through `pixels` of the target camera with their estimated surface distance."""
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    dirs = ray_directions(cam, pixels)
    z = depth_target.values[pixels[:, 1], pixels[:, 0]]
    t_surf = np.clip(depth_to_ray_distance(z, cam, pixels), cam.near, cam.far)
    n = len(pixels)
    return RayBatch(
        torch.as_tensor(np.tile(cam.center, (n, 1)), dtype=dtype),
        torch.as_tensor(dirs, dtype=dtype),
        torch.full((n,), cam.near, dtype=dtype),
        torch.full((n,), cam.far, dtype=dtype),
        torch.as_tensor(t_surf, dtype=dtype),
        pixels,
    )


def draw_samples(rays: RayBatch, kind: str, n: int, rng: np.random.Generator) -> torch.Tensor:
    ts = sampling.sample_batch(kind, rays.surface.double().numpy(), rays.near.double().numpy(),
                               rays.far.double().numpy(), n, rng, n_rays=len(rays))
    return torch.as_tensor(ts, dtype=rays.origins.dtype)


class GSNeRF(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        self.reasoner = Reasoner(cfg.d, cfg.n_planes)
        self.volume_renderer = VolumeRenderer(cfg.d, cfg.hidden)
        self.semantic_renderer = SemanticRenderer(cfg.d, cfg.n_classes, cfg.hidden)

    def reason(self, images: torch.Tensor, cams: Sequence[CameraView]) -> ReasonerOutput:
        return self.reasoner(images, cams)

    @staticmethod
    def target_depth(out: ReasonerOutput, cams: Sequence[CameraView], target: CameraView) -> DepthMap:
        depths = out.depth.detach().double().numpy()
        return estimate_target_depth([DepthMap(d, np.ones(d.shape, bool)) for d in depths], cams, target)

    def _points_field(self, out, cams, rays, ts):
        pts = rays.origins[:, None, :] + ts[..., None] * rays.dirs[:, None, :]
        R, N = ts.shape
        flat = pts.reshape(-1, 3)
        dirs = rays.dirs[:, None, :].expand(R, N, 3).reshape(-1, 3)
        feat = aggregate_features(flat, out, cams)
        sigma, rgb = self.volume_renderer(flat, dirs, feat)
        return sigma.view(R, N), rgb.view(R, N, 3), flat

    def render_rays(self, out: ReasonerOutput, cams: Sequence[CameraView], rays: RayBatch, ts: torch.Tensor,
                    semantic: str = "surface", sem_ts: torch.Tensor | None = None) -> RayOutput:
        """Volume-render colors at samples `ts` and semantic logits per ray.

        semantic="surface" evaluates the semantic renderer once at the estimated
        surface point; "uniform" evaluates it at the samples `sem_ts` (default
        `ts`) and blends the logits with the volume-rendering weights.
        """
        if semantic not in SEMANTIC_MODES:
            raise ValueError(f"unknown semantic mode {semantic!r}")
        sigma, rgb, _ = self._points_field(out, cams, rays, ts)
        color, residual, weights = composite(ts, sigma, rgb, rays.far)
        R = len(rays)
        if semantic == "surface":
            xz = rays.origins + rays.surface[:, None] * rays.dirs
            feat = aggregate_semantic(xz, out, cams)
            logits = self.semantic_renderer(xz, feat)
            fallback = feat.fallback
        else:
            if sem_ts is None or sem_ts is ts:
                sem_ts, sem_w = ts, weights
            else:
                s_sigma, s_rgb, _ = self._points_field(out, cams, rays, sem_ts)
                sem_w = composite(sem_ts, s_sigma, s_rgb, rays.far)[2]
            pts = (rays.origins[:, None, :] + sem_ts[..., None] * rays.dirs[:, None, :]).reshape(-1, 3)
            feat = aggregate_semantic(pts, out, cams)
            point_logits = self.semantic_renderer(pts, feat).view(R, sem_ts.shape[1], -1)
            logits = (sem_w.unsqueeze(-1) * point_logits).sum(dim=1)
            fallback = feat.fallback.view(R, -1).all(dim=1)
        return RayOutput(color, residual, logits, weights, ts, fallback)

    def render_pixel(self, ray: Ray, z: float, out: ReasonerOutput, cams: Sequence[CameraView], n: int,
                     mode: str, rng: np.random.Generator):
        """Render one ray; z is the estimated surface distance along it."""
        dtype = out.f_image.dtype
        batch = RayBatch(
            torch.as_tensor(ray.origin[None], dtype=dtype), torch.as_tensor(ray.direction[None], dtype=dtype),
            torch.tensor([ray.near], dtype=dtype), torch.tensor([ray.far], dtype=dtype),
            torch.tensor([float(np.clip(z, ray.near, ray.far))], dtype=dtype), np.array([ray.pixel]),
        )
        ts = draw_samples(batch, mode, n, rng)
        res = self.render_rays(out, cams, batch, ts)
        return res.rgb[0], {"residual": res.residual[0], "ts": res.ts[0], "weights": res.weights[0]}

    def semantic_forward(self, ray: Ray, z: float, out: ReasonerOutput, cams: Sequence[CameraView]):
        """Semantic logits for one ray at distance z, plus the all-masked flag."""
        dtype = out.f_image.dtype
        xz = torch.as_tensor((ray.origin + z * ray.direction)[None], dtype=dtype)
        feat = aggregate_semantic(xz, out, cams)
        return self.semantic_renderer(xz, feat)[0], bool(feat.fallback[0])


@torch.no_grad()
def render_view(model: GSNeRF, images: torch.Tensor, cams: Sequence[CameraView], target: CameraView, n: int,
                kind: str, seed: int = 0, semantic: str = "surface", chunk: int = 2048):
    """Render a full target image.

    Returns rgb (H, W, 3), logits (H, W, C), the estimated target depth and
    the residual transmittance map.
    """
    out = model.reason(images, cams)
    depth_t = model.target_depth(out, cams, target)
    H, W = target.height, target.width
    v, u = np.mgrid[0:H, 0:W]
    pixels = np.stack([u.ravel(), v.ravel()], axis=1)
    rng = np.random.default_rng(seed)
    rgbs, logits, res = [], [], []
    for s in range(0, len(pixels), chunk):
        rays = make_rays(target, pixels[s:s + chunk], depth_t, images.dtype)
        ts = draw_samples(rays, kind, n, rng)
        o = model.render_rays(out, cams, rays, ts, semantic=semantic)
        rgbs.append(o.rgb)
        logits.append(o.logits)
        res.append(o.residual)
    rgb = torch.cat(rgbs).view(H, W, 3).numpy()
    lg = torch.cat(logits).view(H, W, -1).numpy()
    return rgb, lg, depth_t, torch.cat(res).view(H, W).numpy()
