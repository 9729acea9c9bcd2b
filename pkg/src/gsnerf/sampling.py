"""Sample positions along rays: stratified uniform, depth-guided Gaussian, and their mix.

The batch functions work on arrays of rays (leading dimension R) and are what the
renderer uses; the single-ray wrappers return a `SampleSet`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Ray

SIGMA_FLOOR_FRACTION = 1e-3
KINDS = ("uniform", "depth_guided", "mixed")


@dataclass
class SampleSet:
    ts: np.ndarray
    kind: str
    rng: np.random.Generator | None = None


def _as_col(x, n_rays):
    return np.broadcast_to(np.asarray(x, dtype=np.float64), (n_rays,))[:, None]


def stratified(near, far, n: int, rng: np.random.Generator, n_rays: int | None = None) -> np.ndarray:
    """One uniform draw inside each of `n` equal bins of [near, far); returns (R, n)."""
    if n < 1:
        raise ValueError("sample count must be >= 1")
    n_rays = n_rays if n_rays is not None else np.size(near)
    lo, hi = _as_col(near, n_rays), _as_col(far, n_rays)
    edges = np.arange(n) / n
    u = rng.random((n_rays, n))
    ts = lo + (edges + u / n) * (hi - lo)
    # keep draws in the half-open bin despite rounding at the top edge
    return np.minimum(ts, np.nextafter(lo + (edges + 1.0 / n) * (hi - lo), -np.inf))


def gaussian_sigma(z, near, far) -> np.ndarray:
    """Standard deviation that places 3 sigma at the nearest bound, floored away from 0."""
    z, near, far = (np.asarray(a, dtype=np.float64) for a in (z, near, far))
    v = np.minimum(np.abs(z - far), np.abs(z - near)) / 3.0
    return np.maximum(v, SIGMA_FLOOR_FRACTION * (far - near))


def depth_guided(z, near, far, n: int, rng: np.random.Generator) -> np.ndarray:
    """`n` sorted draws from N(z, v^2) clamped to [near, far]; returns (R, n)."""
    if n < 1:
        raise ValueError("sample count must be >= 1")
    z = np.atleast_1d(np.asarray(z, dtype=np.float64))
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), z.shape)
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), z.shape)
    if np.any(z < near) or np.any(z > far):
        raise ValueError("guide depth outside [near, far]")
    v = gaussian_sigma(z, near, far)
    ts = z[:, None] + v[:, None] * rng.standard_normal((len(z), n))
    return np.sort(np.clip(ts, near[:, None], far[:, None]), axis=1)


def mixed(z, near, far, n: int, rng: np.random.Generator) -> np.ndarray:
    """ceil(n/2) stratified plus floor(n/2) depth-guided samples, merged and sorted."""
    if n < 2:
        raise ValueError("mixed sampling needs n >= 2")
    z = np.atleast_1d(np.asarray(z, dtype=np.float64))
    n_uniform = (n + 1) // 2
    u = stratified(near, far, n_uniform, rng, n_rays=len(z))
    g = depth_guided(z, near, far, n - n_uniform, rng)
    return np.sort(np.concatenate([u, g], axis=1), axis=1)


def sample_batch(kind: str, z, near, far, n: int, rng: np.random.Generator, n_rays: int | None = None) -> np.ndarray:
    if kind == "uniform":
        return stratified(near, far, n, rng, n_rays=n_rays if n_rays is not None else np.size(z))
    if kind == "depth_guided":
        return depth_guided(z, near, far, n, rng)
    if kind == "mixed":
        return mixed(z, near, far, n, rng)
    raise ValueError(f"unknown sampling kind {kind!r}; expected one of {KINDS}")


def sample_uniform(ray: Ray, n: int, rng: np.random.Generator) -> SampleSet:
    return SampleSet(stratified(ray.near, ray.far, n, rng, n_rays=1)[0], "uniform", rng)


def sample_depth_guided(ray: Ray, z: float, n: int, rng: np.random.Generator) -> SampleSet:
    return SampleSet(depth_guided(z, ray.near, ray.far, n, rng)[0], "depth_guided", rng)


def sample_mixed(ray: Ray, z: float, n: int, rng: np.random.Generator) -> SampleSet:
    return SampleSet(mixed(z, ray.near, ray.far, n, rng)[0], "mixed", rng)


def points_from_t(ray: Ray, ts) -> np.ndarray:
    ts = np.asarray(ts, dtype=np.float64)
    return ray.origin + ts[..., None] * ray.direction
