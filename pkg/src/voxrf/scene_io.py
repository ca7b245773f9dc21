"""Posed-image dataset ingestion and per-pixel camera rays.

Datasets use the transforms-JSON manifest layout: a ``transforms_train.json``
(and optionally ``transforms_test.json``) holding a horizontal field of view
``camera_angle_x`` plus one 4x4 camera-to-world ``transform_matrix`` per
frame, with cameras looking down their local -z axis and +y up. Images are
stored as PNGs next to the manifest; an alpha channel, when present, is kept
as a background mask and the color is composited over a constant background
so photometric residuals are defined on every pixel. All colors are decoded
from sRGB to linear [0, 1] on load and every computation downstream happens
in linear space.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

# Default world-space bounds: the synthetic-dataset unit box scaled by 1.5.
DEFAULT_BBOX = np.array([[-1.5, -1.5, -1.5], [1.5, 1.5, 1.5]])
DEFAULT_BACKGROUND = (1.0, 1.0, 1.0)


class DatasetError(RuntimeError):
    """Manifest or image data is missing or inconsistent."""


@dataclass(frozen=True)
class CameraIntrinsics:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be >= 1")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def scaled(self, factor: int) -> "CameraIntrinsics":
        return CameraIntrinsics(self.width // factor, self.height // factor,
                                self.fx / factor, self.fy / factor,
                                self.cx / factor, self.cy / factor)


@dataclass(frozen=True)
class CameraPose:
    """Rigid camera-to-world transform (rotation orthonormal, det +1)."""

    world_from_camera: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.world_from_camera, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError("pose must be a 4x4 matrix")
        r = m[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise ValueError("rotation block is not orthonormal")
        if np.linalg.det(r) < 0:
            raise ValueError("rotation block must have det +1")
        if not np.allclose(m[3], [0.0, 0.0, 0.0, 1.0], atol=1e-9):
            raise ValueError("last pose row must be (0, 0, 0, 1)")
        object.__setattr__(self, "world_from_camera", m)

    @property
    def rotation(self) -> np.ndarray:
        return self.world_from_camera[:3, :3]

    @property
    def center(self) -> np.ndarray:
        return self.world_from_camera[:3, 3]


@dataclass
class CameraView:
    intrinsics: CameraIntrinsics
    pose: CameraPose
    reference_image: np.ndarray
    background_mask: np.ndarray | None = None

    def __post_init__(self):
        img = np.asarray(self.reference_image, dtype=np.float64)
        h, w = self.intrinsics.height, self.intrinsics.width
        if img.shape != (h, w, 3):
            raise DatasetError(
                f"reference image shape {img.shape} does not match "
                f"intrinsics {h}x{w}")
        if not np.isfinite(img).all() or img.min() < 0 or img.max() > 1:
            raise DatasetError("reference image must be finite and in [0,1]")
        self.reference_image = img


@dataclass
class Dataset:
    views: list[CameraView]
    scene_bbox: np.ndarray = field(
        default_factory=lambda: DEFAULT_BBOX.copy())
    scene_kind: str = "synthetic"

    def __post_init__(self):
        if len(self.views) < 2:
            raise DatasetError("a dataset needs at least 2 views")
        if self.scene_kind not in ("synthetic", "real"):
            raise DatasetError(f"unknown scene kind {self.scene_kind!r}")
        bb = np.asarray(self.scene_bbox, dtype=np.float64)
        if bb.shape != (2, 3) or not (bb[1] > bb[0]).all():
            raise DatasetError("scene bbox must have positive extent")
        self.scene_bbox = bb


def srgb_to_linear(c):
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(c):
    c = np.clip(np.asarray(c, dtype=np.float64), 0.0, 1.0)
    return np.where(c <= 0.0031308, c * 12.92,
                    1.055 * c ** (1.0 / 2.4) - 0.055)


def intrinsics_from_fov(width: int, height: int,
                        camera_angle_x: float) -> CameraIntrinsics:
    """Pinhole intrinsics from a horizontal field of view in radians."""
    fx = 0.5 * width / np.tan(0.5 * camera_angle_x)
    return CameraIntrinsics(width, height, fx, fx, width / 2.0, height / 2.0)


def _load_frame_image(path: Path, background):
    img = Image.open(path)
    arr = np.asarray(img, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    mask = None
    if arr.shape[-1] == 4:
        mask = arr[..., 3].copy()
        rgb = srgb_to_linear(arr[..., :3])
        bg = np.asarray(background, dtype=np.float64)
        rgb = rgb * mask[..., None] + bg * (1.0 - mask[..., None])
    else:
        rgb = srgb_to_linear(arr[..., :3])
    return rgb, mask


def load_dataset(root_path, downsample: int = 1, split: str = "train",
                 background=DEFAULT_BACKGROUND,
                 scene_bbox: np.ndarray | None = None) -> Dataset:
    """Load a transforms-JSON dataset from `root_path`.

    `downsample` box-filters the images by an integer factor and scales the
    intrinsics to match. The scene bounding box is taken from the manifest's
    optional ``scene_bbox`` entry unless overridden by the caller; it
    defaults to the unit box scaled by 1.5. Loading is deterministic.
    """
    if downsample < 1:
        raise ValueError("downsample factor must be >= 1")
    root = Path(root_path)
    manifest_path = root / f"transforms_{split}.json"
    if not manifest_path.exists():
        raise DatasetError(f"manifest not found: {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)

    angle = float(manifest["camera_angle_x"])
    views = []
    for frame in manifest["frames"]:
        img_path = root / frame["file_path"]
        if img_path.suffix == "":
            img_path = img_path.with_suffix(".png")
        if not img_path.exists():
            raise DatasetError(f"frame image not found: {img_path}")
        rgb, mask = _load_frame_image(img_path, background)
        h, w = rgb.shape[:2]
        if views and (w, h) != (views[0].intrinsics.width,
                                views[0].intrinsics.height):
            raise DatasetError(f"image size mismatch at {img_path}")
        pose_m = np.asarray(frame["transform_matrix"], dtype=np.float64)
        if abs(np.linalg.det(pose_m)) < 1e-12:
            raise DatasetError(f"non-invertible pose for {img_path}")
        views.append(CameraView(intrinsics_from_fov(w, h, angle),
                                CameraPose(pose_m), rgb, mask))

    if scene_bbox is None:
        if "scene_bbox" in manifest:
            scene_bbox = np.asarray(manifest["scene_bbox"], dtype=np.float64)
        else:
            scene_bbox = DEFAULT_BBOX.copy()
    kind = manifest.get("scene_kind", "synthetic")
    ds = Dataset(views, scene_bbox, kind)
    if downsample > 1:
        ds = downsample_views(ds, downsample)
    return ds


def _box_filter(img: np.ndarray, factor: int) -> np.ndarray:
    h, w = img.shape[:2]
    hc, wc = (h // factor) * factor, (w // factor) * factor
    img = img[:hc, :wc]
    shape = (hc // factor, factor, wc // factor, factor) + img.shape[2:]
    return img.reshape(shape).mean(axis=(1, 3))


def downsample_views(dataset: Dataset, factor: int) -> Dataset:
    """Box-filter every view by an integer factor; intrinsics scale by 1/f."""
    if factor < 1:
        raise ValueError("downsample factor must be >= 1")
    if factor == 1:
        return dataset
    views = []
    for v in dataset.views:
        img = _box_filter(v.reference_image, factor)
        mask = None if v.background_mask is None else \
            _box_filter(v.background_mask, factor)
        views.append(CameraView(v.intrinsics.scaled(factor), v.pose, img,
                                mask))
    return replace(dataset, views=views)


def pixel_ray(view: CameraView, px: int, py: int):
    """World-space ray through the center of pixel (px, py).

    Returns (origin, direction) with a unit direction. The camera looks down
    its local -z axis; +x is right and +y is up in camera space.
    """
    it = view.intrinsics
    if not (0 <= px < it.width and 0 <= py < it.height):
        raise IndexError(f"pixel ({px}, {py}) outside {it.width}x{it.height}")
    d_cam = np.array([(px + 0.5 - it.cx) / it.fx,
                      -(py + 0.5 - it.cy) / it.fy,
                      -1.0])
    d = view.pose.rotation @ d_cam
    return view.pose.center.copy(), d / np.linalg.norm(d)


def camera_rays_for(intrinsics: CameraIntrinsics, pose: CameraPose):
    """Rays for every pixel of a camera, row-major. Returns (origins, dirs)."""
    it = intrinsics
    xs = (np.arange(it.width) + 0.5 - it.cx) / it.fx
    ys = -(np.arange(it.height) + 0.5 - it.cy) / it.fy
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    d_cam = np.stack([gx, gy, -np.ones_like(gx)], axis=-1).reshape(-1, 3)
    d = d_cam @ pose.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.center, d.shape).copy()
    return origins, d


def camera_rays(view: CameraView):
    """Rays for every pixel of `view`, row-major. Returns (origins, dirs)."""
    return camera_rays_for(view.intrinsics, view.pose)


def look_at_pose(center, target, up=(0.0, 0.0, 1.0)) -> CameraPose:
    """Camera-to-world pose at `center` with -z toward `target`."""
    center = np.asarray(center, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - center
    fwd /= np.linalg.norm(fwd)
    z = -fwd
    x = np.cross(np.asarray(up, dtype=np.float64), z)
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        x = np.cross(np.array([0.0, 1.0, 0.0]), z)
        nx = np.linalg.norm(x)
    x /= nx
    y = np.cross(z, x)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = x, y, z, center
    return CameraPose(m)


def project(view: CameraView, points: np.ndarray):
    """Project world points into `view`.

    Returns (uv, visible): uv are continuous pixel coordinates where the
    center of pixel (px, py) is (px + 0.5, py + 0.5); visible is False for
    points behind the camera or outside the image footprint.
    """
    from ._kernels import numpy_backend as nb

    it = view.intrinsics
    u, v, vis = nb.project_points(np.atleast_2d(points), view.pose.center,
                                  view.pose.rotation.T, it.fx, it.fy, it.cx,
                                  it.cy, it.width, it.height)
    return np.stack([u, v], axis=-1), vis
