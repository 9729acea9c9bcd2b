"""Pinhole cameras, rigid transforms, ray generation and target-view depth splatting.

Conventions: OpenCV-style camera frame (x right, y down, z forward), poses are
camera-to-world rigid transforms, and integer pixel coordinates address pixel
centers. Depth maps store camera-frame z in meters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

DEPTH_SENTINEL = 0.0
OCCLUSION_FRACTION = 0.05
SNAP_TOLERANCE = 1e-6  # pixels


@dataclass(frozen=True)
class CameraView:
    intrinsics: np.ndarray  # 3x3
    pose: np.ndarray  # 4x4 camera-to-world
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64)
        pose = np.asarray(self.pose, dtype=np.float64)
        if pose.shape == (3, 4):
            pose = np.vstack([pose, [0.0, 0.0, 0.0, 1.0]])
        if K.shape != (3, 3) or pose.shape != (4, 4):
            raise ValueError("intrinsics must be 3x3 and pose 3x4 or 4x4")
        R = pose[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise ValueError("pose rotation is not orthonormal")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if not 0 < self.near < self.far:
            raise ValueError(f"need 0 < near < far, got {self.near}, {self.far}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "pose", pose)

    @classmethod
    def from_params(cls, fx, fy, cx, cy, width, height, near, far, pose=None) -> "CameraView":
        K = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
        return cls(K, np.eye(4) if pose is None else pose, int(width), int(height), float(near), float(far))

    @property
    def rotation(self) -> np.ndarray:
        return self.pose[:3, :3]

    @property
    def center(self) -> np.ndarray:
        return self.pose[:3, 3]

    @property
    def forward(self) -> np.ndarray:
        return self.pose[:3, 2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float
    pixel: tuple[int, int]


@dataclass
class DepthMap:
    values: np.ndarray  # (H, W) float
    valid: np.ndarray = field(default=None)  # (H, W) bool

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.valid is None:
            self.valid = self.values > DEPTH_SENTINEL
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != self.values.shape:
            raise ValueError("valid mask shape differs from depth values")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Camera-to-world pose for a camera at `eye` looking at `target`; `up` is world up."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    down = -np.asarray(up, dtype=np.float64)
    right = np.cross(down, forward)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = right, down, forward, eye
    return pose


def transform(points, from_pose, to_pose) -> np.ndarray:
    """Re-express points given in the frame of `from_pose` in the frame of `to_pose`.

    Both poses map their local frame to world (camera-to-world), so the world
    frame itself is the identity pose.
    """
    p = np.asarray(points, dtype=np.float64)
    A = np.asarray(from_pose, dtype=np.float64)
    B = np.asarray(to_pose, dtype=np.float64)
    world = p @ A[:3, :3].T + A[:3, 3]
    return (world - B[:3, 3]) @ B[:3, :3]


def project(points, cam: CameraView):
    """World points (..., 3) -> continuous pixels (..., 2), camera-z depth (...), in-frustum flag (...)."""
    p_cam = transform(points, np.eye(4), cam.pose)
    z = p_cam[..., 2]
    K = cam.intrinsics
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K[0, 0] * p_cam[..., 0] / z + K[0, 2]
        v = K[1, 1] * p_cam[..., 1] / z + K[1, 2]
    inside = (z > 0) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    return np.stack([u, v], axis=-1), z, inside


def unproject(pixels, depth, cam: CameraView) -> np.ndarray:
    """Pixels (..., 2) at camera-z `depth` (...) -> world points (..., 3)."""
    uv = np.asarray(pixels, dtype=np.float64)
    z = np.asarray(depth, dtype=np.float64)
    if np.any(z <= 0):
        raise ValueError("unproject requires positive depth")
    K = cam.intrinsics
    x = (uv[..., 0] - K[0, 2]) / K[0, 0] * z
    y = (uv[..., 1] - K[1, 2]) / K[1, 1] * z
    p_cam = np.stack(np.broadcast_arrays(x, y, z), axis=-1)
    return transform(p_cam, cam.pose, np.eye(4))


def pixel_grid(height: int, width: int) -> np.ndarray:
    """(H, W, 2) array of integer (u, v) pixel-center coordinates."""
    v, u = np.mgrid[0:height, 0:width]
    return np.stack([u, v], axis=-1).astype(np.float64)


def ray_directions(cam: CameraView, pixels) -> np.ndarray:
    """Unit world-frame directions through the given pixel centers."""
    uv = np.asarray(pixels, dtype=np.float64)
    K = cam.intrinsics
    d_cam = np.stack(
        [(uv[..., 0] - K[0, 2]) / K[0, 0], (uv[..., 1] - K[1, 2]) / K[1, 1], np.ones(uv.shape[:-1])],
        axis=-1,
    )
    d = d_cam @ cam.rotation.T
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def gen_rays(cam: CameraView, pixels: Sequence[tuple[int, int]]) -> list[Ray]:
    uv = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    bad = (uv[:, 0] < 0) | (uv[:, 0] >= cam.width) | (uv[:, 1] < 0) | (uv[:, 1] >= cam.height)
    if np.any(bad):
        raise ValueError(f"pixel {tuple(uv[np.argmax(bad)])} outside {cam.width}x{cam.height} image")
    dirs = ray_directions(cam, uv)
    return [
        Ray(cam.center.copy(), d, cam.near, cam.far, (int(p[0]), int(p[1])))
        for p, d in zip(uv, dirs)
    ]


def depth_to_ray_distance(depth, cam: CameraView, pixels) -> np.ndarray:
    """Convert camera-z depth at pixels into distance along the unit-norm pixel ray."""
    uv = np.asarray(pixels, dtype=np.float64)
    K = cam.intrinsics
    x = (uv[..., 0] - K[0, 2]) / K[0, 0]
    y = (uv[..., 1] - K[1, 2]) / K[1, 1]
    return np.asarray(depth) * np.sqrt(x * x + y * y + 1.0)


def _splat(depths, cams, target: CameraView):
    """Bilinear z-buffered splat of source depth points into the target image.

    Returns per-pixel accumulated weight and weighted depth (flattened, H*W).
    """
    H, W = target.height, target.width
    tau = OCCLUSION_FRACTION * (target.far - target.near)
    pix, zs, ws = [], [], []
    for dm, cam in zip(depths, cams):
        values = dm.values if isinstance(dm, DepthMap) else np.asarray(dm)
        valid = dm.valid if isinstance(dm, DepthMap) else values > DEPTH_SENTINEL
        grid = pixel_grid(*values.shape)[valid]
        if grid.size == 0:
            continue
        world = unproject(grid, values[valid].astype(np.float64), cam)
        uv, z, _ = project(world, target)
        keep = z > 0
        uv, z = uv[keep], z[keep]
        # reprojections that land on a pixel center up to rounding give it full weight
        near_int = np.round(uv)
        uv = np.where(np.abs(uv - near_int) < SNAP_TOLERANCE, near_int, uv)
        base = np.floor(uv).astype(np.int64)
        frac = uv - base
        for du in (0, 1):
            for dv in (0, 1):
                wu = 1.0 - frac[:, 0] if du == 0 else frac[:, 0]
                wv = 1.0 - frac[:, 1] if dv == 0 else frac[:, 1]
                w = wu * wv
                pu, pv = base[:, 0] + du, base[:, 1] + dv
                ok = (w > 0) & (pu >= 0) & (pu < W) & (pv >= 0) & (pv < H)
                pix.append(pv[ok] * W + pu[ok])
                zs.append(z[ok])
                ws.append(w[ok])
    if not pix:
        return np.zeros(H * W), np.zeros(H * W)
    pix, zs, ws = np.concatenate(pix), np.concatenate(zs), np.concatenate(ws)
    zmin = np.full(H * W, np.inf)
    np.minimum.at(zmin, pix, zs)
    front = zs <= zmin[pix] + tau
    wsum = np.bincount(pix[front], weights=ws[front], minlength=H * W)
    zsum = np.bincount(pix[front], weights=(ws * zs)[front], minlength=H * W)
    return wsum, zsum


def fill_holes(values: np.ndarray, valid: np.ndarray, fallback: float) -> np.ndarray:
    """Fill invalid pixels with the depth of the nearest valid pixel (Euclidean)."""
    if not valid.any():
        return np.full(values.shape, fallback)
    if valid.all():
        return values.copy()
    _, (iy, ix) = ndimage.distance_transform_edt(~valid, return_indices=True)
    return values[iy, ix]


def estimate_target_depth(depths, cams: Sequence[CameraView], target: CameraView) -> DepthMap:
    """Reproject source depth maps into the target view.

    Every valid source pixel is lifted to 3D with its depth, moved into the
    target frame and splatted bilinearly onto the 4 surrounding pixels.
    Within a pixel, contributions farther than the occlusion tolerance behind
    the nearest contribution are dropped before weighted averaging.
    """
    if len(depths) == 0:
        raise ValueError("estimate_target_depth needs at least one source depth map")
    if len(depths) != len(cams):
        raise ValueError("depths and cams must have equal length")
    H, W = target.height, target.width
    wsum, zsum = _splat(depths, cams, target)
    valid = wsum > 0
    values = np.zeros(H * W)
    values[valid] = zsum[valid] / wsum[valid]
    values = np.clip(values, target.near, target.far).reshape(H, W)
    valid = valid.reshape(H, W)
    filled = fill_holes(values, valid, 0.5 * (target.near + target.far))
    return DepthMap(filled, valid)
