"""Procedural Lambertian scenes with an analytic ray tracer.

The tracer produces the three ground-truth channels (color, depth, class) from a
single nearest-hit query, so they are consistent by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import DEPTH_SENTINEL, CameraView, DepthMap, Ray, look_at, pixel_grid, ray_directions

HIT_EPS = 1e-9


@dataclass(frozen=True)
class SemanticClass:
    name: str
    shape: str  # "plane" | "sphere" | "box"
    albedo: tuple[float, float, float]


DEFAULT_CLASSES: tuple[SemanticClass, ...] = (
    SemanticClass("wall", "plane", (0.78, 0.74, 0.66)),
    SemanticClass("floor", "plane", (0.42, 0.32, 0.22)),
    SemanticClass("ball", "sphere", (0.86, 0.18, 0.14)),
    SemanticClass("crate", "box", (0.18, 0.32, 0.86)),
    SemanticClass("lamp", "sphere", (0.92, 0.82, 0.18)),
    SemanticClass("block", "box", (0.16, 0.72, 0.28)),
)


@dataclass(frozen=True)
class Primitive:
    shape: str
    albedo: np.ndarray
    class_id: int
    center: np.ndarray = None  # sphere center / box center / point on plane
    radius: float = 0.0  # sphere
    half_size: np.ndarray = None  # box
    normal: np.ndarray = None  # plane


@dataclass
class Scene:
    primitives: list[Primitive]
    background_albedo: np.ndarray
    background_class: int
    light_dir: np.ndarray
    ambient: float
    n_classes: int
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("scene needs at least one primitive")
        for p in self.primitives:
            if not 0 <= p.class_id < self.n_classes:
                raise ValueError(f"class id {p.class_id} out of range [0, {self.n_classes})")
            if np.any(p.albedo < 0) or np.any(p.albedo > 1):
                raise ValueError("albedo components must lie in [0, 1]")
        self.light_dir = np.asarray(self.light_dir, dtype=np.float64)
        self.light_dir = self.light_dir / np.linalg.norm(self.light_dir)


@dataclass(frozen=True)
class SceneSpec:
    """Counts and ranges used by `build_scene`."""

    n_objects: tuple[int, int] = (4, 6)
    classes: tuple[SemanticClass, ...] = DEFAULT_CLASSES
    room: bool = True
    placement_lo: tuple[float, float, float] = (-1.3, -1.0, -1.1)
    placement_hi: tuple[float, float, float] = (1.3, 0.6, 1.1)
    floor_height: float = -1.0
    wall_depth: float = 2.2
    size_range: tuple[float, float] = (0.3, 0.6)
    albedo_jitter: float = 0.06
    ambient: float = 0.35

    @property
    def n_classes(self) -> int:
        return len(self.classes)


@dataclass(frozen=True)
class RigSpec:
    """Camera rig on a spherical cap around `axis`, all cameras looking at `look_target`."""

    width: int = 64
    height: int = 64
    focal: float = 64.0
    near: float = 1.0
    far: float = 8.0
    distance: float = 3.6
    look_target: tuple[float, float, float] = (0.0, -0.5, 0.2)
    axis: tuple[float, float, float] = (0.0, 0.45, -1.0)
    cap_deg: float = 20.0
    min_sep_deg: float = 10.0
    max_from_target_deg: float = 40.0


@dataclass
class ViewData:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    depth: DepthMap | None
    semantics: np.ndarray  # (H, W) integer class ids
    cam: CameraView


@dataclass
class SceneBundle:
    sources: list[ViewData]
    target: ViewData
    scene_id: str
    class_names: tuple[str, ...] = field(default_factory=tuple)

    @property
    def views(self) -> list[ViewData]:
        return [*self.sources, self.target]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)


def build_scene(seed: int, spec: SceneSpec = SceneSpec()) -> Scene:
    lo_n, hi_n = spec.n_objects
    if hi_n < 1 and not spec.room:
        raise ValueError("scene spec yields zero primitives")
    if spec.n_classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    lo, hi = np.array(spec.placement_lo), np.array(spec.placement_hi)

    def albedo(c: SemanticClass):
        a = np.array(c.albedo) + rng.uniform(-spec.albedo_jitter, spec.albedo_jitter, 3)
        return np.clip(a, 0.0, 1.0)

    prims: list[Primitive] = []
    plane_ids = [i for i, c in enumerate(spec.classes) if c.shape == "plane"]
    object_ids = [i for i, c in enumerate(spec.classes) if c.shape != "plane"]
    if spec.room:
        if len(plane_ids) < 2:
            raise ValueError("room scenes need two plane classes (wall, floor)")
        wall, floor = plane_ids[0], plane_ids[1]
        prims.append(Primitive("plane", albedo(spec.classes[floor]), floor,
                               center=np.array([0.0, spec.floor_height, 0.0]), normal=np.array([0.0, 1.0, 0.0])))
        prims.append(Primitive("plane", albedo(spec.classes[wall]), wall,
                               center=np.array([0.0, 0.0, spec.wall_depth]), normal=np.array([0.0, 0.0, -1.0])))
    if not object_ids and hi_n > 0:
        raise ValueError("scene spec has objects but no object classes")
    n = int(rng.integers(lo_n, hi_n + 1)) if hi_n > 0 else 0
    for _ in range(n):
        cid = int(rng.choice(object_ids))
        cls = spec.classes[cid]
        size = rng.uniform(*spec.size_range)
        center = rng.uniform(lo, hi)
        if spec.room:
            # rest on the floor
            center[1] = spec.floor_height + size
        center = np.clip(center, lo, hi)
        if cls.shape == "sphere":
            prims.append(Primitive("sphere", albedo(cls), cid, center=center, radius=size))
        else:
            half = size * rng.uniform(0.7, 1.0, 3)
            if spec.room:
                center[1] = spec.floor_height + half[1]
            prims.append(Primitive("box", albedo(cls), cid, center=center, half_size=half))
    light = np.array([-0.4, 1.0, -0.6]) + rng.uniform(-0.2, 0.2, 3)
    bg_class = plane_ids[0] if plane_ids else 0
    return Scene(prims, np.array(spec.classes[bg_class].albedo) * 0.5, bg_class, light,
                 spec.ambient, spec.n_classes, tuple(c.name for c in spec.classes))


def _intersect(p: Primitive, o: np.ndarray, d: np.ndarray):
    """Nearest positive hit distance and normal for rays (n, 3); inf where missed."""
    n = len(o)
    t = np.full(n, np.inf)
    normal = np.zeros((n, 3))
    if p.shape == "sphere":
        oc = o - p.center
        b = np.einsum("ij,ij->i", d, oc)
        c = np.einsum("ij,ij->i", oc, oc) - p.radius ** 2
        disc = b * b - c
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0, t1 = -b - sq, -b + sq
        tt = np.where(t0 > HIT_EPS, t0, t1)
        hit &= tt > HIT_EPS
        t[hit] = tt[hit]
        normal[hit] = (o[hit] + tt[hit, None] * d[hit] - p.center) / p.radius
    elif p.shape == "box":
        lo, hi = p.center - p.half_size, p.center + p.half_size
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            ta, tb = (lo - o) * inv, (hi - o) * inv
        # rays parallel to a slab: inside -> unbounded interval, outside -> empty
        par = d == 0
        inside = (o >= lo) & (o <= hi)
        tnear = np.where(par, np.where(inside, -np.inf, np.inf), np.minimum(ta, tb))
        tfar = np.where(par, np.where(inside, np.inf, -np.inf), np.maximum(ta, tb))
        tmin, tmax = tnear.max(axis=1), tfar.min(axis=1)
        hit = (tmax >= tmin) & (tmax > HIT_EPS)
        tt = np.where(tmin > HIT_EPS, tmin, tmax)
        axis_in = np.argmax(tnear, axis=1)
        axis_out = np.argmin(tfar, axis=1)
        axis = np.where(tmin > HIT_EPS, axis_in, axis_out)
        rows = np.arange(n)
        sign = np.where(tmin > HIT_EPS, -np.sign(d[rows, axis]), np.sign(d[rows, axis]))
        t[hit] = tt[hit]
        normal[rows[hit], axis[hit]] = sign[hit]
    elif p.shape == "plane":
        denom = d @ p.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            tt = ((p.center - o) @ p.normal) / denom
        hit = (denom != 0) & (tt > HIT_EPS)
        t[hit] = tt[hit]
        normal[hit] = p.normal
    else:
        raise ValueError(f"unknown shape {p.shape!r}")
    return t, normal


def trace_rays(scene: Scene, origins, directions):
    """Vectorized nearest-hit tracing.

    Returns rgb (n, 3), ray distance (n,) with inf on miss, class ids (n,).
    """
    o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    d = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    o = np.broadcast_to(o, d.shape)
    n = len(d)
    best_t = np.full(n, np.inf)
    best_normal = np.zeros((n, 3))
    best_idx = np.full(n, -1)
    for i, p in enumerate(scene.primitives):
        t, nrm = _intersect(p, o, d)
        closer = t < best_t
        best_t[closer] = t[closer]
        best_normal[closer] = nrm[closer]
        best_idx[closer] = i
    hit = best_idx >= 0
    # shade the side facing the ray
    facing = np.einsum("ij,ij->i", best_normal, d) > 0
    best_normal[facing] *= -1
    albedo = np.tile(scene.background_albedo, (n, 1))
    classes = np.full(n, scene.background_class, dtype=np.int64)
    if hit.any():
        albedo[hit] = np.stack([scene.primitives[i].albedo for i in best_idx[hit]])
        classes[hit] = [scene.primitives[i].class_id for i in best_idx[hit]]
    lambert = np.maximum(0.0, best_normal @ scene.light_dir)
    shade = np.where(hit, scene.ambient + lambert * (1.0 - scene.ambient), 1.0)
    rgb = np.clip(albedo * shade[:, None], 0.0, 1.0)
    return rgb, best_t, classes


def trace(scene: Scene, ray: Ray):
    """Trace one ray: (rgb, hit distance along the ray or DEPTH_SENTINEL, class id)."""
    rgb, t, cls = trace_rays(scene, ray.origin[None], ray.direction[None])
    depth = float(t[0]) if np.isfinite(t[0]) else DEPTH_SENTINEL
    return rgb[0], depth, int(cls[0])


def render_view(scene: Scene, cam: CameraView) -> ViewData:
    H, W = cam.height, cam.width
    uv = pixel_grid(H, W).reshape(-1, 2)
    dirs = ray_directions(cam, uv)
    rgb, t, cls = trace_rays(scene, cam.center[None], dirs)
    z = t * (dirs @ cam.forward)
    valid = np.isfinite(t) & (z >= cam.near) & (z <= cam.far)
    depth = np.where(valid, z, DEPTH_SENTINEL).astype(np.float32).reshape(H, W)
    return ViewData(rgb.reshape(H, W, 3), DepthMap(depth, valid.reshape(H, W)),
                    cls.reshape(H, W).astype(np.int64), cam)


def render_views(scene: Scene, cams: Sequence[CameraView], scene_id: str = "0",
                 target_index: int = -1) -> SceneBundle:
    """Trace every camera; the camera at `target_index` becomes the bundle target."""
    if len(cams) < 2:
        raise ValueError("need at least two cameras (sources plus target)")
    views = [render_view(scene, c) for c in cams]
    target = views.pop(target_index)
    return SceneBundle(views, target, str(scene_id), scene.class_names)


def _angle_deg(a, b) -> float:
    return float(np.degrees(np.arccos(np.clip(np.dot(a, b), -1.0, 1.0))))


def _cap_direction(rng, axis, cap_deg):
    # uniform on the spherical cap around axis
    cos_max = np.cos(np.radians(cap_deg))
    cos_t = rng.uniform(cos_max, 1.0)
    phi = rng.uniform(0.0, 2 * np.pi)
    sin_t = np.sqrt(1 - cos_t ** 2)
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(axis, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    return cos_t * axis + sin_t * (np.cos(phi) * e1 + np.sin(phi) * e2)


def camera_rig(seed: int, n_sources: int, rig: RigSpec = RigSpec()) -> tuple[list[CameraView], CameraView]:
    """Sample a target camera and `n_sources` nearby-yet-sparse source cameras."""
    rng = np.random.default_rng(seed)
    axis = np.array(rig.axis, dtype=np.float64)
    axis /= np.linalg.norm(axis)
    for _ in range(1000):
        dirs = [_cap_direction(rng, axis, rig.cap_deg)]
        for _ in range(20000):
            if len(dirs) == n_sources + 1:
                break
            cand = _cap_direction(rng, axis, rig.cap_deg)
            if _angle_deg(cand, dirs[0]) > rig.max_from_target_deg:
                continue
            if all(_angle_deg(cand, d) >= rig.min_sep_deg for d in dirs):
                dirs.append(cand)
        if len(dirs) == n_sources + 1:
            break
    else:
        raise ValueError("could not place cameras with the requested separation")
    target = np.array(rig.look_target)
    cx, cy = (rig.width - 1) / 2.0, (rig.height - 1) / 2.0
    cams = [
        CameraView.from_params(rig.focal, rig.focal, cx, cy, rig.width, rig.height, rig.near, rig.far,
                               look_at(target + rig.distance * d, target))
        for d in dirs
    ]
    return cams[1:], cams[0]


def make_bundle(seed: int, n_sources: int = 8, spec: SceneSpec = SceneSpec(), rig: RigSpec = RigSpec(),
                scene_id: str | None = None) -> SceneBundle:
    scene = build_scene(seed, spec)
    sources, target = camera_rig(seed + 7919, n_sources, rig)
    return render_views(scene, [*sources, target], scene_id if scene_id is not None else str(seed))
