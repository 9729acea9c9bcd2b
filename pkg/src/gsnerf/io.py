"""On-disk scene bundles.

Layout::

    scene_<id>/
        manifest.txt
        view_0/ ... view_<K-1>/, view_t/
            rgb.png  depth.dpf  sem.png  pose.txt  intr.txt

Depth rasters (``.dpf``) are a 16-byte header (magic ``DPF1``, u32 width,
u32 height, u32 reserved) followed by little-endian float32 values, row-major.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image

from .geometry import DEPTH_SENTINEL, CameraView, DepthMap
from .scenegen import SceneBundle, ViewData

DPF_MAGIC = b"DPF1"
DPF_HEADER = struct.Struct("<4sIII")


class BundleIOError(OSError):
    """A bundle file is missing or malformed."""

    def __init__(self, message: str, path: Path | str | None = None):
        super().__init__(message)
        self.path = None if path is None else Path(path)


# Called with the path of every depth raster read; tests hook this to prove
# that self-supervised training never touches ground-truth depth.
depth_read_hooks: list[Callable[[Path], None]] = []


def write_depth(path, depth: np.ndarray) -> None:
    d = np.ascontiguousarray(depth, dtype="<f4")
    h, w = d.shape
    with open(path, "wb") as f:
        f.write(DPF_HEADER.pack(DPF_MAGIC, w, h, 0))
        f.write(d.tobytes())


def read_depth(path) -> np.ndarray:
    path = Path(path)
    for hook in depth_read_hooks:
        hook(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise BundleIOError(f"cannot read depth raster {path}: {e.strerror}", path) from e
    if len(raw) < DPF_HEADER.size:
        raise BundleIOError(f"{path}: truncated header ({len(raw)} of {DPF_HEADER.size} bytes)", path)
    magic, w, h, _ = DPF_HEADER.unpack_from(raw)
    if magic != DPF_MAGIC:
        raise BundleIOError(f"{path}: bad magic {magic!r}", path)
    expected = DPF_HEADER.size + 4 * w * h
    if len(raw) != expected:
        raise BundleIOError(f"{path}: expected {expected} bytes for {w}x{h} raster, found {len(raw)}", path)
    return np.frombuffer(raw, dtype="<f4", offset=DPF_HEADER.size).reshape(h, w).astype(np.float32)


def write_camera(view_dir: Path, cam: CameraView) -> None:
    pose = cam.pose[:3, :4].ravel()
    (view_dir / "pose.txt").write_text(" ".join(repr(float(x)) for x in pose) + "\n")
    K = cam.intrinsics
    vals = [K[0, 0], K[1, 1], K[0, 2], K[1, 2]]
    (view_dir / "intr.txt").write_text(
        " ".join(repr(float(x)) for x in vals) + f" {cam.width} {cam.height} {cam.near!r} {cam.far!r}\n"
    )


def read_camera(view_dir: Path) -> CameraView:
    try:
        pose_vals = [float(x) for x in (view_dir / "pose.txt").read_text().split()]
        intr_vals = (view_dir / "intr.txt").read_text().split()
    except OSError as e:
        raise BundleIOError(f"{view_dir}: missing camera file ({e.filename})", view_dir) from e
    except ValueError as e:
        raise BundleIOError(f"{view_dir}/pose.txt: {e}", view_dir) from e
    if len(pose_vals) != 12 or len(intr_vals) != 8:
        raise BundleIOError(f"{view_dir}: pose needs 12 values and intrinsics 8", view_dir)
    try:
        fx, fy, cx, cy = (float(x) for x in intr_vals[:4])
        w, h = int(intr_vals[4]), int(intr_vals[5])
        near, far = float(intr_vals[6]), float(intr_vals[7])
    except ValueError as e:
        raise BundleIOError(f"{view_dir}/intr.txt: {e}", view_dir) from e
    pose = np.array(pose_vals).reshape(3, 4)
    return CameraView.from_params(fx, fy, cx, cy, w, h, near, far, pose)


def _write_view(view_dir: Path, view: ViewData) -> None:
    view_dir.mkdir(parents=True, exist_ok=True)
    rgb = np.round(np.clip(view.image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(rgb, "RGB").save(view_dir / "rgb.png")
    if view.semantics.max(initial=0) > 255:
        raise ValueError("class ids above 255 cannot be stored in sem.png")
    Image.fromarray(view.semantics.astype(np.uint8), "L").save(view_dir / "sem.png")
    if view.depth is not None:
        write_depth(view_dir / "depth.dpf", np.where(view.depth.valid, view.depth.values, DEPTH_SENTINEL))
    write_camera(view_dir, view.cam)


def _read_png(path: Path, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode != mode:
                raise BundleIOError(f"{path}: expected {mode} image, found {im.mode}", path)
            return np.asarray(im)
    except OSError as e:
        if isinstance(e, BundleIOError):
            raise
        raise BundleIOError(f"cannot read {path}: {e}", path) from e


def _read_view(view_dir: Path, load_depth: bool) -> ViewData:
    if not view_dir.is_dir():
        raise BundleIOError(f"missing view directory {view_dir}", view_dir)
    cam = read_camera(view_dir)
    image = _read_png(view_dir / "rgb.png", "RGB").astype(np.float32) / 255.0
    sem = _read_png(view_dir / "sem.png", "L").astype(np.int64)
    depth = None
    if load_depth:
        values = read_depth(view_dir / "depth.dpf")
        depth = DepthMap(values, values > DEPTH_SENTINEL)
    for name, arr in (("rgb.png", image), ("sem.png", sem)):
        if arr.shape[:2] != (cam.height, cam.width):
            raise BundleIOError(f"{view_dir / name}: size {arr.shape[:2]} disagrees with intr.txt", view_dir)
    return ViewData(image, depth, sem, cam)


def write_manifest(path: Path, k: int, class_names, height: int, width: int) -> None:
    lines = [f"K {k}", f"C {len(class_names)}", f"H {height}", f"W {width}"]
    lines += [f"{i}\t{name}" for i, name in enumerate(class_names)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: Path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise BundleIOError(f"cannot read manifest {path}", path) from e
    out: dict = {"classes": []}
    for line in text.splitlines():
        if not line.strip():
            continue
        if "\t" in line:
            idx, name = line.split("\t", 1)
            out["classes"].append((int(idx), name))
        else:
            key, value = line.split()
            out[key] = int(value)
    for key in ("K", "C", "H", "W"):
        if key not in out:
            raise BundleIOError(f"{path}: missing {key}", path)
    if len(out["classes"]) != out["C"]:
        raise BundleIOError(f"{path}: lists {len(out['classes'])} classes, declares C={out['C']}", path)
    return out


def bundle_dir(root, scene_id: str) -> Path:
    return Path(root) / f"scene_{scene_id}"


def write_bundle(root, bundle: SceneBundle) -> Path:
    out = bundle_dir(root, bundle.scene_id)
    out.mkdir(parents=True, exist_ok=True)
    for k, view in enumerate(bundle.sources):
        _write_view(out / f"view_{k}", view)
    _write_view(out / "view_t", bundle.target)
    cam = bundle.target.cam
    write_manifest(out / "manifest.txt", len(bundle.sources), bundle.class_names, cam.height, cam.width)
    return out


def read_bundle(path, load_depth: bool = True) -> SceneBundle:
    """Read a scene directory. With ``load_depth=False`` no depth raster is opened."""
    path = Path(path)
    if not path.is_dir():
        raise BundleIOError(f"no scene bundle at {path}", path)
    manifest = read_manifest(path / "manifest.txt")
    sources = [_read_view(path / f"view_{k}", load_depth) for k in range(manifest["K"])]
    target = _read_view(path / "view_t", load_depth)
    names = tuple(name for _, name in sorted(manifest["classes"]))
    scene_id = path.name[len("scene_"):] if path.name.startswith("scene_") else path.name
    return SceneBundle(sources, target, scene_id, names)


def list_scenes(root) -> list[Path]:
    return sorted(p for p in Path(root).glob("scene_*") if p.is_dir())
