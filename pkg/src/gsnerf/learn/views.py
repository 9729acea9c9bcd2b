"""Choosing a target view and K nearby-yet-sparse source views from a scene bundle."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..scenegen import RigSpec, SceneBundle, ViewData


def view_angle_deg(a: ViewData, b: ViewData) -> float:
    """Angle between the viewing directions of two cameras."""
    c = float(np.clip(np.dot(a.cam.forward, b.cam.forward), -1.0, 1.0))
    return float(np.degrees(np.arccos(c)))


def nearest_sources(target: ViewData, pool: Sequence[ViewData], k: int,
                    min_sep_deg: float = RigSpec.min_sep_deg) -> list[int]:
    """Indices into `pool` of the k views closest to the target camera center.

    Candidates are taken in order of distance and skipped when they come within
    `min_sep_deg` of an already chosen view; if that leaves fewer than k, the
    skipped ones are added back by distance.
    """
    if len(pool) < k:
        raise ValueError(f"need {k} source views, only {len(pool)} available")
    dist = np.array([np.linalg.norm(v.cam.center - target.cam.center) for v in pool])
    order = [int(i) for i in np.argsort(dist, kind="stable")]
    chosen: list[int] = []
    for i in order:
        if len(chosen) == k:
            break
        if all(view_angle_deg(pool[i], pool[j]) >= min_sep_deg for j in chosen):
            chosen.append(i)
    for i in order:
        if len(chosen) == k:
            break
        if i not in chosen:
            chosen.append(i)
    return sorted(chosen, key=lambda i: (dist[i], i))


def select_views(bundles: SceneBundle | Sequence[SceneBundle], k: int, rng: np.random.Generator,
                 targets: str = "all", min_sep_deg: float = RigSpec.min_sep_deg):
    """Pick a scene, a target view and k source views.

    targets="all" lets any of the bundle's views act as target with the sources
    drawn from the rest (training); targets="fixed" always uses the bundle's
    designated target (evaluation). Returns (bundle, target, sources).
    """
    if isinstance(bundles, SceneBundle):
        bundles = [bundles]
    if not bundles:
        raise ValueError("no scene bundles to choose from")
    bundle = bundles[int(rng.integers(len(bundles)))]
    views = bundle.views
    if targets == "fixed":
        t = len(views) - 1
    elif targets == "all":
        t = int(rng.integers(len(views)))
    else:
        raise ValueError(f"unknown target policy {targets!r}")
    target = views[t]
    pool = [v for i, v in enumerate(views) if i != t]
    idx = nearest_sources(target, pool, k, min_sep_deg)
    return bundle, target, [pool[i] for i in idx]
