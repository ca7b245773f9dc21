"""Ray marching and emission/absorption accumulation over the voxel grid.

A ray is sampled at fixed spacing between its bounding-box entry and exit
points (midpoint rule, no jitter, so gradients are deterministic). The
accumulated color of a ray is

    H = sum_j exp(-V_j) * (1 - exp(-sigma_j * delta_j)) * c_j,
    V_j = sum_{k < j} sigma_k * delta_k,

with trilinearly interpolated sigma and c per sample. exp(-V_N) is the
residual transmittance T of the ray; pixels composite as H + T * background.
Marching and accumulation exist both as single-ray functions (march /
accumulate, used by tests and by the per-voxel prior reference path) and as
the batched kernel behind render_image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import scene_io
from ._kernels import get_backend
from ._kernels import numpy_backend as nb
from .volume import SkipMask, VoxelGrid

# Sample spacing as a fraction of the voxel edge at the current level.
DEFAULT_STEP_FACTOR = 0.5


@dataclass
class RaySampleList:
    """Ordered samples of one ray: positions, step lengths, interpolation."""

    positions: np.ndarray                 # (N, 3)
    deltas: np.ndarray                    # (N,)
    ts: np.ndarray                        # (N,) distance along the ray
    weights: np.ndarray                   # (N, 8) trilinear corner weights
    indices: np.ndarray                   # (N, 8) flat cell indices
    t_entry: float
    t_exit: float

    def __len__(self):
        return self.positions.shape[0]


@dataclass
class RayAccumulation:
    H_d: np.ndarray                       # (3,) accumulated color
    T_total: float                        # residual transmittance in [0, 1]
    per_sample_transmittance: np.ndarray  # (N,) exp(-V_j), non-increasing


def march(grid: VoxelGrid, origin, direction, step: float,
          skip: SkipMask | None = None,
          t_max: float | None = None) -> RaySampleList:
    """Sample one ray through the grid at fixed spacing `step`.

    Samples whose containing skip-mask cell is flagged empty are omitted. A
    ray that misses the bbox yields an empty list. `t_max` caps the exit
    parameter (used for camera-to-point visibility segments).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    t0, t1 = nb.clip_rays(grid.bbox[0], grid.bbox[1], origin, direction)
    t0, t1 = float(t0[0]), float(t1[0])
    if t_max is not None:
        t1 = min(t1, t_max)
    empty = RaySampleList(np.zeros((0, 3)), np.zeros(0), np.zeros(0),
                          np.zeros((0, 8)), np.zeros((0, 8), dtype=np.int64),
                          t0, t1)
    if t1 <= t0:
        return empty
    n = int(np.floor((t1 - t0) / step + 1e-9))
    if n == 0:
        return empty
    ts = t0 + (np.arange(n) + 0.5) * step
    pos = origin + ts[:, None] * direction
    keep = np.ones(n, dtype=bool)
    if skip is not None:
        keep = ~nb._skip_lookup(skip.mask, grid.bbox[0], skip.cell_sizes, pos)
    ts, pos = ts[keep], pos[keep]
    idx, w = nb.trilinear_weights(pos, grid.bbox[0], grid.cell_sizes,
                                  grid.resolution)
    return RaySampleList(pos, np.full(ts.shape, step), ts, w, idx, t0, t1)


def accumulate(grid: VoxelGrid, samples: RaySampleList) -> RayAccumulation:
    """Emission/absorption accumulation over an ordered sample list."""
    if len(samples) == 0:
        return RayAccumulation(np.zeros(3), 1.0, np.zeros(0))
    sig = nb.gather(grid.density, samples.indices, samples.weights)
    col = nb.gather(grid.color, samples.indices, samples.weights)
    if not (np.isfinite(sig).all() and np.isfinite(col).all()):
        raise FloatingPointError("non-finite grid values along ray")
    tau = sig * samples.deltas
    v_excl = np.cumsum(tau) - tau
    t_excl = np.exp(-v_excl)
    alpha = 1.0 - np.exp(-tau)
    h = ((t_excl * alpha)[:, None] * col).sum(axis=0)
    t_total = float(np.exp(-(v_excl[-1] + tau[-1])))
    return RayAccumulation(h, t_total, t_excl)


def render_rays(grid: VoxelGrid, origins, dirs, step: float,
                skip: SkipMask | None = None, t_max=None,
                want_color: bool = True, n_threads: int = 1):
    """Batched march + accumulate. Returns (H (R,3), T (R,)), H raw."""
    backend = get_backend()
    sm = skip.mask if skip is not None else None
    sc = skip.cell_sizes if skip is not None else None
    return backend.render_rays(
        grid.density, grid.color, grid.bbox[0], grid.cell_sizes,
        np.ascontiguousarray(origins), np.ascontiguousarray(dirs), step,
        skip_mask=sm, skip_cell=sc, t_max=t_max, want_color=want_color,
        n_threads=n_threads)


def default_step(grid: VoxelGrid, factor: float = DEFAULT_STEP_FACTOR):
    return factor * grid.voxel_edge


def render_image(grid: VoxelGrid, view: scene_io.CameraView, step: float,
                 skip: SkipMask | None = None,
                 background=scene_io.DEFAULT_BACKGROUND, n_threads: int = 1):
    """Render every pixel of `view`.

    Returns (image, T_image); the image is composited over `background`
    weighted by the residual transmittance of each ray.
    """
    origins, dirs = scene_io.camera_rays(view)
    h_raw, t = render_rays(grid, origins, dirs, step, skip,
                           n_threads=n_threads)
    bg = np.asarray(background, dtype=np.float64)
    img = h_raw + t[:, None] * bg
    it = view.intrinsics
    return (img.reshape(it.height, it.width, 3),
            t.reshape(it.height, it.width))
