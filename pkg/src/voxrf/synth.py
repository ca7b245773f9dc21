"""Analytic test scenes: ray-traced spheres and boxes with posed cameras.

These scenes are the ground-truth oracles for end-to-end tests: shading is
local Phong (Lambertian albedo * max(0, n.l) plus an optional white
highlight strength * max(0, r.v)^shininess), with no shadows or
interreflection. That is enough to create strongly view-dependent pixels --
a glossy sphere's highlight sweeps across the surface as the camera orbits
-- while keeping a closed-form renderer, depth maps and surface meshes.

generate() writes the same manifest layout scene_io loads (train/test
splits, RGBA PNGs) plus gt_depth/*.exr and gt_mesh.ply.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import exr_io, export, scene_io
from .scene_io import CameraIntrinsics, CameraPose, CameraView, Dataset
from .volume import VoxelGrid


@dataclass
class SpecularHighlight:
    light_dir: np.ndarray                 # direction toward the light
    shininess: float = 48.0
    strength: float = 0.9

    def __post_init__(self):
        d = np.asarray(self.light_dir, dtype=np.float64)
        self.light_dir = d / np.linalg.norm(d)


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    albedo: np.ndarray
    specular: SpecularHighlight | None = None

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.albedo = np.asarray(self.albedo, dtype=np.float64)


@dataclass
class Box:
    center: np.ndarray
    half_extent: np.ndarray
    albedo: np.ndarray
    specular: SpecularHighlight | None = None

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.half_extent = np.asarray(self.half_extent, dtype=np.float64)
        self.albedo = np.asarray(self.albedo, dtype=np.float64)


@dataclass
class SynthScene:
    primitives: list
    light_dir: np.ndarray = field(
        default_factory=lambda: np.array([0.35, 0.25, 0.9]))
    n_views: int = 24
    ring_radius: float = 3.8
    ring_elevation_deg: float = 18.0
    fov_deg: float = 50.0
    ambient: float = 0.0

    def __post_init__(self):
        d = np.asarray(self.light_dir, dtype=np.float64)
        self.light_dir = d / np.linalg.norm(d)


def _intersect_sphere(sphere: Sphere, origins, dirs):
    oc = origins - sphere.center
    b = (oc * dirs).sum(axis=1)
    c = (oc * oc).sum(axis=1) - sphere.radius ** 2
    disc = b * b - c
    hit = disc > 0.0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0 = -b - sq
    t1 = -b + sq
    t = np.where(t0 > 1e-9, t0, t1)
    t = np.where(hit & (t > 1e-9), t, np.inf)
    return t


def _intersect_box(box: Box, origins, dirs):
    lo = box.center - box.half_extent
    hi = box.center + box.half_extent
    with np.errstate(divide="ignore", invalid="ignore"):
        ta = (lo - origins) / dirs
        tb = (hi - origins) / dirs
    tmin = np.nanmax(np.minimum(ta, tb), axis=1)
    tmax = np.nanmin(np.maximum(ta, tb), axis=1)
    hit = tmax > np.maximum(tmin, 1e-9)
    t = np.where(tmin > 1e-9, tmin, tmax)
    return np.where(hit & (t > 1e-9), t, np.inf)


def _normal_at(prim, points):
    if isinstance(prim, Sphere):
        n = points - prim.center
        return n / np.linalg.norm(n, axis=1, keepdims=True)
    rel = (points - prim.center) / prim.half_extent
    n = np.zeros_like(points)
    ax = np.abs(rel).argmax(axis=1)
    n[np.arange(len(points)), ax] = np.sign(
        rel[np.arange(len(points)), ax])
    return n


def intersect_scene(scene: SynthScene, origins, dirs):
    """Closest-hit query. Returns (t, prim_index); misses have t = inf."""
    best_t = np.full(origins.shape[0], np.inf)
    best_i = np.full(origins.shape[0], -1, dtype=np.int64)
    for i, prim in enumerate(scene.primitives):
        t = _intersect_sphere(prim, origins, dirs) \
            if isinstance(prim, Sphere) else _intersect_box(prim, origins,
                                                            dirs)
        closer = t < best_t
        best_t[closer] = t[closer]
        best_i[closer] = i
    return best_t, best_i


def shade(scene: SynthScene, prim, points, normals, view_dirs,
          specular: bool = True):
    """Local Phong shading at surface points; `view_dirs` point to the eye."""
    l = scene.light_dir
    ndotl = np.maximum((normals * l).sum(axis=1), 0.0)
    lam = scene.ambient + (1.0 - scene.ambient) * ndotl
    color = prim.albedo * lam[:, None]
    if specular and prim.specular is not None:
        sp = prim.specular
        sl = sp.light_dir
        sn = np.maximum((normals * sl).sum(axis=1), 0.0)
        refl = 2.0 * sn[:, None] * normals - sl
        rv = np.maximum((refl * view_dirs).sum(axis=1), 0.0)
        term = sp.strength * np.where(sn > 0.0, rv ** sp.shininess, 0.0)
        color = color + term[:, None]
    return np.clip(color, 0.0, 1.0)


def render_analytic(scene: SynthScene, intrinsics: CameraIntrinsics,
                    pose: CameraPose, specular: bool = True):
    """Ray-trace one view. Returns (rgb, alpha, depth) as H x W arrays."""
    origins, dirs = scene_io.camera_rays_for(intrinsics, pose)
    t, pidx = intersect_scene(scene, origins, dirs)
    h, w = intrinsics.height, intrinsics.width
    rgb = np.zeros((origins.shape[0], 3))
    for i, prim in enumerate(scene.primitives):
        sel = pidx == i
        if not sel.any():
            continue
        pts = origins[sel] + t[sel, None] * dirs[sel]
        normals = _normal_at(prim, pts)
        rgb[sel] = shade(scene, prim, pts, normals, -dirs[sel], specular)
    alpha = (pidx >= 0).astype(np.float64)
    depth = np.where(pidx >= 0, t, 0.0)
    return (rgb.reshape(h, w, 3), alpha.reshape(h, w), depth.reshape(h, w))


def specular_image(scene: SynthScene, intrinsics: CameraIntrinsics,
                   pose: CameraPose):
    """The view-dependent shading term alone (full render minus diffuse)."""
    full, alpha, _ = render_analytic(scene, intrinsics, pose, specular=True)
    diffuse, _, _ = render_analytic(scene, intrinsics, pose, specular=False)
    return full - diffuse, alpha


def ring_cameras(n_views: int, radius: float, elevation_deg: float,
                 image_size: int, fov_deg: float, azimuth_offset: float = 0.0):
    """Evenly spaced cameras on a ring looking at the origin."""
    intr = scene_io.intrinsics_from_fov(image_size, image_size,
                                        np.deg2rad(fov_deg))
    el = np.deg2rad(elevation_deg)
    cams = []
    for i in range(n_views):
        phi = 2.0 * np.pi * i / n_views + azimuth_offset
        center = radius * np.array([np.cos(phi) * np.cos(el),
                                    np.sin(phi) * np.cos(el),
                                    np.sin(el)])
        cams.append((intr, scene_io.look_at_pose(center, np.zeros(3))))
    return cams


@dataclass
class GeneratedScene:
    train: Dataset
    test: Dataset
    depths: list[np.ndarray]
    mesh: tuple                           # (vertices, faces)


def scene_mesh(scene: SynthScene, sphere_res: int = 64):
    """Analytic surface mesh of all primitives (UV spheres, box quads)."""
    all_v = []
    all_f = []
    base = 0
    for prim in scene.primitives:
        if isinstance(prim, Sphere):
            v, f = sphere_mesh(prim.center, prim.radius, sphere_res)
        else:
            v, f = box_mesh(prim.center, prim.half_extent)
        all_v.append(v)
        all_f.append(f + base)
        base += len(v)
    return np.concatenate(all_v), np.concatenate(all_f)


def sphere_mesh(center, radius: float, n: int = 64):
    """UV-sphere triangulation with n latitude rings and 2n longitudes."""
    center = np.asarray(center, dtype=np.float64)
    n_lat, n_lon = n, 2 * n
    theta = np.linspace(0.0, np.pi, n_lat + 1)
    phi = np.linspace(0.0, 2.0 * np.pi, n_lon, endpoint=False)
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    pts = np.stack([np.sin(tt) * np.cos(pp), np.sin(tt) * np.sin(pp),
                    np.cos(tt)], axis=-1).reshape(-1, 3)
    verts = center + radius * pts
    faces = []
    for i in range(n_lat):
        for j in range(n_lon):
            a = i * n_lon + j
            b = i * n_lon + (j + 1) % n_lon
            c = (i + 1) * n_lon + j
            d = (i + 1) * n_lon + (j + 1) % n_lon
            if i > 0:
                faces.append([a, c, b])
            if i < n_lat - 1:
                faces.append([b, c, d])
    return verts, np.array(faces, dtype=np.int64)


def box_mesh(center, half_extent):
    center = np.asarray(center, dtype=np.float64)
    he = np.asarray(half_extent, dtype=np.float64)
    corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1)
                        for z in (-1, 1)], dtype=np.float64)
    verts = center + corners * he
    faces = np.array([[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5],
                      [0, 4, 5], [0, 5, 1], [2, 3, 7], [2, 7, 6],
                      [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]],
                     dtype=np.int64)
    return verts, faces


def _write_split(scene, cams, out_root: Path, split: str, scene_bbox,
                 write_depth: bool):
    frames = []
    (out_root / split).mkdir(parents=True, exist_ok=True)
    depths = []
    views = []
    for i, (intr, pose) in enumerate(cams):
        rgb, alpha, depth = render_analytic(scene, intr, pose)
        name = f"{split}/r_{i:03d}.png"
        export.save_image(out_root / name, rgb, alpha)
        frames.append({"file_path": name,
                       "transform_matrix": pose.world_from_camera.tolist()})
        if write_depth:
            (out_root / "gt_depth").mkdir(exist_ok=True)
            exr_io.write_exr(out_root / "gt_depth" / f"r_{i:03d}.exr",
                             {"Z": depth.astype(np.float32)})
            depths.append(depth)
        views.append((intr, pose, rgb, alpha))
    manifest = {
        "camera_angle_x": float(2.0 * np.arctan(
            0.5 * cams[0][0].width / cams[0][0].fx)),
        "scene_bbox": np.asarray(scene_bbox).tolist(),
        "scene_kind": "synthetic",
        "frames": frames,
    }
    with open(out_root / f"transforms_{split}.json", "w") as f:
        json.dump(manifest, f, indent=1)
    return depths


def generate(scene: SynthScene, resolution: int, n_views: int, out_dir,
             n_test: int = 4, scene_bbox=None,
             background=scene_io.DEFAULT_BACKGROUND) -> GeneratedScene:
    """Render and write a full dataset (train + test splits, depth, mesh).

    Test cameras sit on the same ring, offset by half the train spacing and
    raised by 8 degrees. Returns the datasets re-loaded through the standard
    loader so the round trip is exercised.
    """
    out_root = Path(out_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    if scene_bbox is None:
        scene_bbox = [[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]]
    train_cams = ring_cameras(n_views, scene.ring_radius,
                              scene.ring_elevation_deg, resolution,
                              scene.fov_deg)
    test_cams = ring_cameras(n_test, scene.ring_radius,
                             scene.ring_elevation_deg + 8.0, resolution,
                             scene.fov_deg,
                             azimuth_offset=np.pi / max(n_views, 1))
    depths = _write_split(scene, train_cams, out_root, "train", scene_bbox,
                          write_depth=True)
    _write_split(scene, test_cams, out_root, "test", scene_bbox,
                 write_depth=False)
    mesh = scene_mesh(scene)
    export.save_ply(out_root / "gt_mesh.ply", mesh[0], mesh[1])
    train = scene_io.load_dataset(out_root, split="train",
                                  background=background)
    test = scene_io.load_dataset(out_root, split="test",
                                 background=background)
    return GeneratedScene(train, test, depths, mesh)


def diffuse_case(n_views: int = 24) -> SynthScene:
    """Lambertian sphere: the easy control scene."""
    sphere = Sphere([0.0, 0.0, 0.0], 0.55, [0.75, 0.18, 0.12])
    return SynthScene([sphere], n_views=n_views)


def ambiguity_case(n_views: int = 24) -> SynthScene:
    """Glossy sphere whose highlight sweeps across the ring cameras.

    The canonical scene where a view-independent volume cannot explain the
    images: per-camera highlights must either move into the difference
    planes or corrupt the recovered geometry.
    """
    light = np.array([0.35, 0.25, 0.9])
    sphere = Sphere([0.0, 0.0, 0.0], 0.55, [0.75, 0.18, 0.12],
                    SpecularHighlight(light, shininess=48.0, strength=0.9))
    return SynthScene([sphere], light_dir=light, n_views=n_views)


def cube_case(n_views: int = 8) -> SynthScene:
    """Small diffuse cube, used by loader round-trip tests."""
    box = Box([0.0, 0.0, 0.0], [0.4, 0.4, 0.4], [0.2, 0.5, 0.8])
    return SynthScene([box], n_views=n_views)


def voxelize(scene: SynthScene, resolution: int, bbox,
             sigma_value: float = 300.0) -> VoxelGrid:
    """Ideal Lambertian grid for a sphere scene (renderer test oracle).

    Density is `sigma_value` inside any sphere and 0 outside; colors hold
    the Lambertian shading of the radially nearest surface point.
    """
    grid = VoxelGrid.initial((resolution,) * 3, bbox, 0.0, 0.0)
    centers = grid.cell_centers()
    density = np.zeros(len(centers))
    color = np.zeros((len(centers), 3))
    for prim in scene.primitives:
        if not isinstance(prim, Sphere):
            raise NotImplementedError("voxelize supports sphere scenes only")
        rel = centers - prim.center
        dist = np.linalg.norm(rel, axis=1)
        inside = dist < prim.radius
        density[inside] = sigma_value
        n = rel / np.maximum(dist, 1e-12)[:, None]
        shading = shade(scene, prim, centers, n,
                        np.zeros_like(centers), specular=False)
        color[inside] = shading[inside]
    res = grid.resolution
    return VoxelGrid(res, grid.bbox, density.reshape(res),
                     color.reshape(res + (3,)))
