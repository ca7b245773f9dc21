"""Dense voxel grid of densities and view-independent colors.

The grid covers an axis-aligned world-space box; cell centers sit at
``bmin + (i + 0.5) * cell``. Sampling is trilinear with clamp-to-edge
behaviour inside the box and vacuum (sigma = 0, black) outside. Densities
are kept non-negative and colors inside [0, 1] by projection after each
optimizer step, not by reparameterization.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

from ._kernels import numpy_backend as nb

SNAPSHOT_MAGIC = b"VXGR"
SNAPSHOT_VERSION = 1


@dataclass
class VoxelGrid:
    resolution: tuple[int, int, int]
    bbox: np.ndarray                      # (2, 3) [min, max]
    density: np.ndarray                   # (nx, ny, nz)
    color: np.ndarray                     # (nx, ny, nz, 3)

    def __post_init__(self):
        self.resolution = tuple(int(n) for n in self.resolution)
        self.bbox = np.asarray(self.bbox, dtype=np.float64)
        self.density = np.ascontiguousarray(self.density, dtype=np.float64)
        self.color = np.ascontiguousarray(self.color, dtype=np.float64)
        if self.density.shape != self.resolution:
            raise ValueError("density shape does not match resolution")
        if self.color.shape != self.resolution + (3,):
            raise ValueError("color shape does not match resolution")
        if not (self.bbox[1] > self.bbox[0]).all():
            raise ValueError("bbox must have positive extent")

    @classmethod
    def initial(cls, resolution, bbox, density=0.1, color=0.5) -> "VoxelGrid":
        """Uniform starting grid: small nonzero density, mid-grey color."""
        res = tuple(int(n) for n in np.broadcast_to(resolution, 3))
        return cls(res, np.asarray(bbox, dtype=np.float64),
                   np.full(res, float(density)),
                   np.full(res + (3,), float(color)))

    @property
    def cell_sizes(self) -> np.ndarray:
        return (self.bbox[1] - self.bbox[0]) / np.array(self.resolution)

    @property
    def voxel_edge(self) -> float:
        return float(self.cell_sizes.min())

    def copy(self) -> "VoxelGrid":
        return VoxelGrid(self.resolution, self.bbox.copy(),
                         self.density.copy(), self.color.copy())

    def cell_centers(self) -> np.ndarray:
        """All cell centers as an (nx*ny*nz, 3) array in C order."""
        nx, ny, nz = self.resolution
        ix, iy, iz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                                 indexing="ij")
        idx = np.stack([ix, iy, iz], axis=-1).reshape(-1, 3)
        return self.bbox[0] + (idx + 0.5) * self.cell_sizes

    def contains(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(points)
        return ((p >= self.bbox[0]) & (p <= self.bbox[1])).all(axis=-1)


@dataclass
class SkipMask:
    """Empty-space mask at the previous hierarchy level's resolution."""

    mask: np.ndarray                      # uint8, 1 = treat as empty
    cell_sizes: np.ndarray

    @property
    def resolution(self):
        return self.mask.shape


def sample(grid: VoxelGrid, p):
    """Trilinear interpolation at world point(s) `p`.

    Returns (sigma, color, weights, indices); `weights` are the 8 corner
    weights (summing to 1) and `indices` the matching flat C-order cell
    indices, reusable for gradient scatter. Points outside the bbox return
    sigma = 0, black, and empty weights.
    """
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    pts = np.atleast_2d(p)
    inside = grid.contains(pts)
    idx, w = nb.trilinear_weights(pts, grid.bbox[0], grid.cell_sizes,
                                  grid.resolution)
    w = np.where(inside[:, None], w, 0.0)
    sig = nb.gather(grid.density, idx, w)
    col = nb.gather(grid.color, idx, w)
    if single:
        return float(sig[0]), col[0], w[0], idx[0]
    return sig, col, w, idx


def upsample(grid: VoxelGrid, new_resolution) -> VoxelGrid:
    """Resample the grid to a finer resolution over the same bbox.

    Child values are the trilinear interpolation of the parent field at the
    child cell centers, so parent cell centers are fixed points.
    """
    new_res = tuple(int(n) for n in np.broadcast_to(new_resolution, 3))
    if any(n < o for n, o in zip(new_res, grid.resolution)):
        raise ValueError("upsample cannot shrink the grid")
    if new_res == grid.resolution:
        return grid.copy()
    # Child center k maps to parent index coordinate (k+0.5)*old/new - 0.5.
    coords = [(np.arange(n) + 0.5) * (o / n) - 0.5
              for n, o in zip(new_res, grid.resolution)]
    mesh = np.meshgrid(*coords, indexing="ij")
    flat = np.stack([m.ravel() for m in mesh])
    density = map_coordinates(grid.density, flat, order=1,
                              mode="nearest").reshape(new_res)
    color = np.empty(new_res + (3,))
    for k in range(3):
        color[..., k] = map_coordinates(grid.color[..., k], flat, order=1,
                                        mode="nearest").reshape(new_res)
    return VoxelGrid(new_res, grid.bbox.copy(), density, color)


def build_skip_mask(parent: VoxelGrid, threshold: float = 1.0) -> SkipMask:
    """Mark cells of the previous level whose density is below `threshold`."""
    return SkipMask((parent.density < threshold).astype(np.uint8),
                    parent.cell_sizes.copy())


def save_snapshot(grid: VoxelGrid, path):
    """Write the external grid snapshot: header + raw little-endian float32
    arrays, density plane first, then the R, G and B planes."""
    nx, ny, nz = grid.resolution
    with open(path, "wb") as f:
        f.write(SNAPSHOT_MAGIC)
        f.write(struct.pack("<IIII", SNAPSHOT_VERSION, nx, ny, nz))
        f.write(struct.pack("<6d", *grid.bbox.ravel()))
        f.write(grid.density.astype("<f4").tobytes())
        for k in range(3):
            f.write(np.ascontiguousarray(grid.color[..., k])
                    .astype("<f4").tobytes())


def load_snapshot(path) -> VoxelGrid:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != SNAPSHOT_MAGIC:
            raise ValueError(f"not a grid snapshot: {path}")
        version, nx, ny, nz = struct.unpack("<IIII", f.read(16))
        if version != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported snapshot version {version}")
        bbox = np.array(struct.unpack("<6d", f.read(48))).reshape(2, 3)
        count = nx * ny * nz
        density = np.frombuffer(f.read(4 * count), dtype="<f4")
        density = density.reshape(nx, ny, nz).astype(np.float64)
        color = np.empty((nx, ny, nz, 3))
        for k in range(3):
            plane = np.frombuffer(f.read(4 * count), dtype="<f4")
            color[..., k] = plane.reshape(nx, ny, nz)
    return VoxelGrid((nx, ny, nz), bbox, density, color)
