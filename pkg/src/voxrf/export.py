"""Output artifacts: decomposition renders, meshes, and quantitative metrics."""

from __future__ import annotations

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree
from skimage import measure

from . import diffplane as dp
from . import renderer, scene_io
from .diffplane import DifferencePlane
from .scene_io import CameraView
from .volume import SkipMask, VoxelGrid, sample

PSNR_CAP_DB = 99.0


def render_decomposition(grid: VoxelGrid, view: CameraView,
                         plane: DifferencePlane | None, step: float,
                         skip: SkipMask | None = None,
                         background=scene_io.DEFAULT_BACKGROUND,
                         gain: float = 4.0) -> dict[str, np.ndarray]:
    """Render the four decomposition images for one view.

    Returns {"lambertian", "blended", "view_dependent", "view_dependent_gain"}.
    The view-dependent images show the signed blend residual in a mid-grey
    centered encoding (0.5 + x/2, clamped), the last one with `gain` applied
    before encoding. For a view without a plane (novel view) only the
    Lambertian image is meaningful; the others fall back to it.
    """
    img, t = renderer.render_image(grid, view, step, skip, background)
    out = {"lambertian": img}
    if plane is None:
        out["blended"] = img.copy()
        residual = np.zeros_like(img)
    else:
        ref = view.reference_image
        out["blended"] = dp.blend(img, ref, plane.alpha, plane.sigma_s)
        residual = out["blended"] - img
    out["view_dependent"] = np.clip(0.5 + residual / 2.0, 0.0, 1.0)
    out["view_dependent_gain"] = np.clip(0.5 + gain * residual / 2.0,
                                         0.0, 1.0)
    return out


def marching_cubes(grid: VoxelGrid, iso: float):
    """Extract the density isosurface as a triangle mesh.

    Returns (vertices, normals, faces) with vertices in world coordinates
    and outward normals (pointing from high to low density). An empty
    isosurface yields empty arrays.
    """
    if iso <= 0:
        raise ValueError("iso threshold must be positive")
    d = grid.density
    if d.max() <= iso:
        return (np.zeros((0, 3)), np.zeros((0, 3)),
                np.zeros((0, 3), dtype=np.int64))
    # Pad with vacuum so regions touching the bbox faces still close (a
    # uniformly dense grid becomes a box shell).
    padded = np.pad(d, 1, mode="constant", constant_values=0.0)
    verts, faces, _, _ = measure.marching_cubes(padded, level=iso)
    verts -= 1.0                         # undo padding offset
    cell = grid.cell_sizes
    world = grid.bbox[0] + (verts + 0.5) * cell
    normals = _density_gradient_normals(grid, world)
    return world, normals, faces.astype(np.int64)


def _density_gradient_normals(grid: VoxelGrid, points: np.ndarray):
    """Outward unit normals: the negated, normalized density gradient."""
    cell = grid.cell_sizes
    g = np.zeros_like(points)
    for ax in range(3):
        off = np.zeros(3)
        off[ax] = 0.5 * cell[ax]
        hi = sample(grid, points + off)[0]
        lo = sample(grid, points - off)[0]
        g[:, ax] = (hi - lo) / cell[ax]
    norm = np.linalg.norm(g, axis=1, keepdims=True)
    norm[norm < 1e-12] = 1.0
    return -g / norm


def save_ply(path, vertices, faces, normals=None):
    """ASCII PLY with positions, optional normals, and triangle faces."""
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(vertices)}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        if normals is not None:
            f.write("property float nx\nproperty float ny\n"
                    "property float nz\n")
        f.write(f"element face {len(faces)}\n")
        f.write("property list uchar int vertex_indices\nend_header\n")
        for i, v in enumerate(vertices):
            row = f"{v[0]:.7g} {v[1]:.7g} {v[2]:.7g}"
            if normals is not None:
                n = normals[i]
                row += f" {n[0]:.7g} {n[1]:.7g} {n[2]:.7g}"
            f.write(row + "\n")
        for face in faces:
            f.write(f"3 {face[0]} {face[1]} {face[2]}\n")


def load_ply(path):
    """Read the ASCII PLY subset written by save_ply. Returns (verts, faces)."""
    with open(path) as f:
        if f.readline().strip() != "ply":
            raise ValueError(f"not a PLY file: {path}")
        n_vert = n_face = 0
        n_props = 0
        in_vertex = False
        for line in f:
            tok = line.split()
            if tok[0] == "element":
                in_vertex = tok[1] == "vertex"
                if in_vertex:
                    n_vert = int(tok[2])
                else:
                    n_face = int(tok[2])
            elif tok[0] == "property" and in_vertex and tok[1] != "list":
                n_props += 1
            elif tok[0] == "end_header":
                break
        verts = np.empty((n_vert, 3))
        for i in range(n_vert):
            vals = f.readline().split()
            verts[i] = [float(x) for x in vals[:3]]
        faces = np.empty((n_face, 3), dtype=np.int64)
        for i in range(n_face):
            vals = f.readline().split()
            faces[i] = [int(x) for x in vals[1:4]]
    return verts, faces


def psnr(image_a: np.ndarray, image_b: np.ndarray) -> float:
    """Peak signal-to-noise ratio over linear [0, 1] channels, in dB.

    Identical images report the 99 dB cap instead of infinity.
    """
    a = np.asarray(image_a, dtype=np.float64)
    b = np.asarray(image_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image shapes differ")
    mse = float(((a - b) ** 2).mean())
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def sample_mesh_surface(vertices, faces, n_points: int = 20000,
                        seed: int = 0) -> np.ndarray:
    """Uniform area-weighted point sample of a triangle mesh surface."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    if len(faces) == 0 or len(vertices) == 0:
        return np.zeros((0, 3))
    a = vertices[faces[:, 0]]
    b = vertices[faces[:, 1]]
    c = vertices[faces[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    total = areas.sum()
    if total <= 0:
        return np.zeros((0, 3))
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(faces), size=n_points, p=areas / total)
    u = rng.random(n_points)
    v = rng.random(n_points)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    return a[tri] + u[:, None] * (b[tri] - a[tri]) \
        + v[:, None] * (c[tri] - a[tri])


def geometry_fscore(mesh, reference_mesh, tau: float,
                    n_points: int = 20000, seed: int = 0):
    """Precision/recall/F of `mesh` against `reference_mesh` at distance tau.

    Both meshes are point-sampled with a fixed count and seed; precision is
    the fraction of reconstructed points within tau of the reference and
    recall the converse. Meshes are (vertices, normals, faces) or
    (vertices, faces) tuples. An empty mesh scores F = 0.
    """
    def _unpack(m):
        if len(m) == 3:
            return m[0], m[2]
        return m[0], m[1]

    va, fa = _unpack(mesh)
    vb, fb = _unpack(reference_mesh)
    pa = sample_mesh_surface(va, fa, n_points, seed)
    pb = sample_mesh_surface(vb, fb, n_points, seed + 1)
    if len(pa) == 0 or len(pb) == 0:
        return 0.0, 0.0, 0.0
    da = cKDTree(pb).query(pa, workers=-1)[0]
    db = cKDTree(pa).query(pb, workers=-1)[0]
    precision = float((da <= tau).mean())
    recall = float((db <= tau).mean())
    if precision + recall == 0.0:
        return 0.0, 0.0, 0.0
    return precision, recall, 2 * precision * recall / (precision + recall)


def save_image(path, linear_image: np.ndarray, alpha: np.ndarray | None = None):
    """Write a linear [0,1] image as an sRGB-encoded 8-bit PNG."""
    srgb = scene_io.linear_to_srgb(linear_image)
    arr = (np.clip(srgb, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    if alpha is not None:
        a = (np.clip(alpha, 0.0, 1.0) * 255.0).round().astype(np.uint8)
        arr = np.concatenate([arr, a[..., None]], axis=-1)
        Image.fromarray(arr, mode="RGBA").save(path)
    else:
        Image.fromarray(arr, mode="RGB").save(path)


def load_image(path) -> np.ndarray:
    """Read a PNG back to linear color (alpha dropped)."""
    arr = np.asarray(Image.open(path), dtype=np.float64) / 255.0
    return scene_io.srgb_to_linear(arr[..., :3])
