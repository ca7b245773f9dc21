"""Per-camera difference planes.

Each training camera carries a raster of non-negative scalars alpha, one per
pixel, that blends the rendered view-independent color toward the reference
pixel:

    H_hat = (1 - exp(-alpha * sigma_s)) * (r - H_d) + H_d.

alpha starts at zero and only grows where the volume cannot explain the
pixel on its own, absorbing view-dependent residual. sigma_s is a small
global constant controlling how readily residual moves into the planes. The
planes exist for training views only; novel views render H_d alone.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

DEFAULT_SIGMA_S = 0.002

PLANE_MAGIC = b"VXPL"
PLANE_VERSION = 1


@dataclass
class DifferencePlane:
    alpha: np.ndarray                     # (H, W) >= 0
    sigma_s: float = DEFAULT_SIGMA_S

    def __post_init__(self):
        self.alpha = np.ascontiguousarray(self.alpha, dtype=np.float64)
        if self.alpha.ndim != 2:
            raise ValueError("alpha plane must be 2-D")

    @classmethod
    def zeros(cls, height: int, width: int,
              sigma_s: float = DEFAULT_SIGMA_S) -> "DifferencePlane":
        return cls(np.zeros((height, width)), sigma_s)

    @property
    def resolution(self):
        return self.alpha.shape


def _per_pixel(factor, color_ndim):
    """Align a per-pixel scalar factor with trailing color channels."""
    factor = np.asarray(factor, dtype=np.float64)
    if factor.ndim == color_ndim - 1:
        factor = factor[..., None]
    return factor


def blend(h_d, r, alpha, sigma_s):
    """H_hat per the difference-plane blend; all args broadcast."""
    h_d = np.asarray(h_d, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    beta = _per_pixel(1.0 - np.exp(-np.multiply(alpha, sigma_s)), h_d.ndim)
    return h_d + beta * (r - h_d)


def d_blend_d_alpha(h_d, r, alpha, sigma_s):
    """Analytic derivative of blend() in alpha: -sigma_s e^{-alpha sigma_s} (r - H_d)."""
    h_d = np.asarray(h_d, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    g = _per_pixel(-sigma_s * np.exp(-np.multiply(alpha, sigma_s)), h_d.ndim)
    return g * (r - h_d)


def volume_gradient_scale(alpha, sigma_s):
    """exp(-alpha sigma_s): attenuation of every volume gradient through the
    blended pixel (the same factor applies to the color and density paths)."""
    return np.exp(-np.multiply(alpha, sigma_s))


def specular_component(h_d, r, alpha, sigma_s):
    """View-dependent part of the blended pixel, H_hat - H_d (signed)."""
    return blend(h_d, r, alpha, sigma_s) - np.asarray(h_d, dtype=np.float64)


def upsample_plane(plane: DifferencePlane,
                   new_resolution) -> DifferencePlane:
    """Bilinear resample of alpha to a finer image resolution."""
    nh, nw = (int(n) for n in new_resolution)
    oh, ow = plane.resolution
    if nh < oh or nw < ow:
        raise ValueError("plane upsampling cannot shrink the raster")
    if (nh, nw) == (oh, ow):
        return DifferencePlane(plane.alpha.copy(), plane.sigma_s)
    ys = (np.arange(nh) + 0.5) * (oh / nh) - 0.5
    xs = (np.arange(nw) + 0.5) * (ow / nw) - 0.5
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    alpha = map_coordinates(plane.alpha, [gy.ravel(), gx.ravel()], order=1,
                            mode="nearest").reshape(nh, nw)
    return DifferencePlane(alpha, plane.sigma_s)


def save_plane(plane: DifferencePlane, path):
    """Plane snapshot: header + raw little-endian float32 raster."""
    h, w = plane.resolution
    with open(path, "wb") as f:
        f.write(PLANE_MAGIC)
        f.write(struct.pack("<III", PLANE_VERSION, w, h))
        f.write(struct.pack("<d", plane.sigma_s))
        f.write(plane.alpha.astype("<f4").tobytes())


def load_plane(path) -> DifferencePlane:
    with open(path, "rb") as f:
        if f.read(4) != PLANE_MAGIC:
            raise ValueError(f"not a plane snapshot: {path}")
        version, w, h = struct.unpack("<III", f.read(12))
        if version != PLANE_VERSION:
            raise ValueError(f"unsupported plane version {version}")
        (sigma_s,) = struct.unpack("<d", f.read(8))
        alpha = np.frombuffer(f.read(4 * w * h), dtype="<f4")
    return DifferencePlane(alpha.reshape(h, w).astype(np.float64), sigma_s)


def plane_heatmap(plane: DifferencePlane) -> np.ndarray:
    """Grayscale visualization of alpha, normalized to its own maximum."""
    peak = plane.alpha.max()
    if peak <= 0:
        return np.zeros_like(plane.alpha)
    return plane.alpha / peak
