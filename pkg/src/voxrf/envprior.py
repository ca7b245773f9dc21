"""Per-voxel environment-map prior on density.

For every voxel, a transient 8x4 directional color table is populated from
all cameras: each camera's reference color at the voxel's projection enters
the bin of the voxel-to-camera direction, weighted by the camera-to-voxel
transmittance. The table's failure to predict those same observed colors,

    E = (1 / sum_k T_k) * sum_k sum_ch T_k * (c_k,ch - p_k,ch)^2,

is a per-voxel measure of how unlikely the point is to lie on a surface:
surface points have colors a low-frequency directional function can explain,
free-space points do not. E feeds a robust density penalty

    L_c = lambda_c * sum_i log(1 + lambda_n * w_i * sigma_i^2)

as the weight w. The tables are never stored; the pass runs once per
hierarchy level and leaves only the scalar weight per voxel. Voxels no
camera can see get the largest valid weight of the pass so they are easy to
suppress.

The per-voxel functions here (project_voxel, trace_visibility, populate,
fit_error) are the plain reference path; compute_prior_weights runs the same
math batched through the kernel backend.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import renderer, scene_io
from ._kernels import get_backend
from ._kernels import numpy_backend as nb
from .scene_io import CameraView, Dataset
from .volume import SkipMask, VoxelGrid

N_THETA = 4
N_PHI = 8

DEFAULT_LAMBDA_C_SYNTHETIC = 0.05
DEFAULT_LAMBDA_C_REAL = 0.01
DEFAULT_LAMBDA_N = 10.0
BASELINE_WEIGHT = 0.0001

FLAG_VALID = 0
FLAG_INVISIBLE = 1
FLAG_MASKED = 2


@dataclass
class CauchyParams:
    loss_scale: float = DEFAULT_LAMBDA_C_SYNTHETIC    # lambda_c
    weight_scale: float = DEFAULT_LAMBDA_N            # lambda_n

    def __post_init__(self):
        if self.loss_scale < 0 or self.weight_scale < 0:
            raise ValueError("Cauchy parameters must be non-negative")


@dataclass
class VoxelObservation:
    """One camera's view of a voxel: observed color, visibility, bin."""

    color: np.ndarray
    transmittance: float
    theta_bin: int
    phi_bin: int


@dataclass
class MiniEnvMap:
    """8x4 directional color table for one voxel."""

    colors: np.ndarray = field(
        default_factory=lambda: np.zeros((N_THETA, N_PHI, 3)))
    bin_weights: np.ndarray = field(
        default_factory=lambda: np.zeros((N_THETA, N_PHI)))
    t_sum: float = 0.0

    @property
    def valid(self) -> bool:
        return self.t_sum > 0.0

    def touched(self) -> np.ndarray:
        return self.bin_weights > 0.0

    def prediction(self, theta_bin: int, phi_bin: int) -> np.ndarray:
        return self.colors[theta_bin, phi_bin]


@dataclass
class EnvPriorBuffer:
    """Frozen per-voxel weights for one hierarchy level."""

    weights: np.ndarray                   # (nx, ny, nz)
    flags: np.ndarray                     # uint8, FLAG_* per voxel


def project_voxel(voxel_center, view: CameraView):
    """Reference color seen by `view` at the voxel center's projection.

    Returns an RGB array, or None when the point is behind the camera or
    projects outside the image.
    """
    uv, vis = scene_io.project(view, voxel_center)
    if not vis[0]:
        return None
    u, v = uv[0]
    return nb._bilinear_fetch(view.reference_image, np.array([u]),
                              np.array([v]))[0]


def trace_visibility(voxel_center, view: CameraView, grid: VoxelGrid,
                     step: float, guard: float | None = None) -> float:
    """Transmittance from the camera to the voxel center.

    Marches the camera-to-voxel segment with the renderer's accumulation,
    stopping half a voxel edge short of the target so the voxel does not
    occlude itself.
    """
    if guard is None:
        guard = 0.5 * grid.voxel_edge
    center = np.asarray(voxel_center, dtype=np.float64)
    delta = center - view.pose.center
    dist = float(np.linalg.norm(delta))
    if dist < 1e-12:
        return 1.0
    direction = delta / dist
    samples = renderer.march(grid, view.pose.center, direction, step,
                             t_max=dist - guard)
    return renderer.accumulate(grid, samples).T_total


def map_spherical(voxel_center, view: CameraView):
    """(theta_bin, phi_bin) of the voxel-to-camera direction.

    theta = acos(d_z) in [0, pi] over 4 equal bins, phi = atan2(d_y, d_x) in
    [-pi, pi] over 8 equal bins with phi = pi wrapping to bin 0; at the poles
    the phi bin is 0 by convention. Returns None when the camera sits on the
    voxel center.
    """
    center = np.asarray(voxel_center, dtype=np.float64)
    d = view.pose.center - center
    norm = np.linalg.norm(d)
    if norm < 1e-12:
        return None
    tb, pb = nb.spherical_bins(d / norm)
    return int(tb[0]), int(pb[0])


def observe_voxel(voxel_center, dataset: Dataset, grid: VoxelGrid,
                  step: float, guard: float | None = None):
    """All per-camera observations of one voxel (off-screen cameras skipped)."""
    obs = []
    for view in dataset.views:
        color = project_voxel(voxel_center, view)
        if color is None:
            continue
        bins = map_spherical(voxel_center, view)
        if bins is None:
            continue
        t = trace_visibility(voxel_center, view, grid, step, guard)
        obs.append(VoxelObservation(color, t, bins[0], bins[1]))
    return obs


def populate(voxel_center, dataset: Dataset, grid: VoxelGrid, step: float,
             guard: float | None = None,
             mode: str = "global_tsum") -> MiniEnvMap:
    """Populate one voxel's environment map from all cameras.

    `mode` selects the normalization: "global_tsum" divides every bin by the
    summed transmittance over all contributing cameras; "per_bin" divides
    each bin by its own accumulated weight (making each touched bin a convex
    combination of its contributors).
    """
    return build_env_map(observe_voxel(voxel_center, dataset, grid, step,
                                       guard), mode)


def build_env_map(observations, mode: str = "global_tsum") -> MiniEnvMap:
    if mode not in ("global_tsum", "per_bin"):
        raise ValueError(f"unknown normalization mode {mode!r}")
    env = MiniEnvMap()
    for ob in observations:
        env.colors[ob.theta_bin, ob.phi_bin] += ob.transmittance * ob.color
        env.bin_weights[ob.theta_bin, ob.phi_bin] += ob.transmittance
        env.t_sum += ob.transmittance
    if env.t_sum > 0.0:
        if mode == "per_bin":
            touched = env.bin_weights > 0.0
            env.colors[touched] /= env.bin_weights[touched][:, None]
        else:
            env.colors /= env.t_sum
    return env


def fit_error(env: MiniEnvMap, observations) -> float | None:
    """Visibility-weighted mean squared prediction error of the map.

    Returns None when the summed visibility is zero (nothing observed the
    voxel), in which case the caller substitutes the pass's default weight.
    """
    t_sum = sum(ob.transmittance for ob in observations)
    if t_sum <= 0.0:
        return None
    err = 0.0
    for ob in observations:
        p = env.prediction(ob.theta_bin, ob.phi_bin)
        err += ob.transmittance * float(((ob.color - p) ** 2).sum())
    return err / t_sum


def weight_from_error(errors: np.ndarray, flags: np.ndarray) -> np.ndarray:
    """Map fit errors to Cauchy weights.

    Valid voxels keep E as their weight; voxels flagged invisible or skipped
    as empty get the maximum valid E of the pass (falling back to 1.0 if no
    voxel was valid).
    """
    errors = np.asarray(errors, dtype=np.float64)
    flags = np.asarray(flags)
    w = errors.copy()
    valid = flags == FLAG_VALID
    w_max = float(errors[valid].max()) if valid.any() else 1.0
    w[~valid] = w_max
    return w


def compute_prior_weights(grid: VoxelGrid, dataset: Dataset, step: float,
                          guard: float | None = None,
                          skip: SkipMask | None = None,
                          mode: str = "global_tsum",
                          n_threads: int = 1) -> EnvPriorBuffer:
    """Run the full per-voxel pass over the grid (batched kernel path)."""
    if guard is None:
        guard = 0.5 * grid.voxel_edge
    backend = get_backend()
    n_cam = len(dataset.views)
    centers = np.stack([v.pose.center for v in dataset.views])
    rots = np.stack([v.pose.rotation.T for v in dataset.views])
    intr = np.array([[v.intrinsics.fx, v.intrinsics.fy, v.intrinsics.cx,
                      v.intrinsics.cy] for v in dataset.views])
    h0, w0 = dataset.views[0].reference_image.shape[:2]
    images = np.empty((n_cam, h0, w0, 3))
    for i, v in enumerate(dataset.views):
        if v.reference_image.shape[:2] != (h0, w0):
            raise ValueError("prior pass expects uniform image sizes")
        images[i] = v.reference_image
    sm = skip.mask if skip is not None else None
    sc = skip.cell_sizes if skip is not None else None
    errors, flags = backend.env_prior(
        grid.density, grid.bbox[0], grid.cell_sizes, step, guard, centers,
        np.ascontiguousarray(rots), intr, images, skip_mask=sm, skip_cell=sc,
        per_bin=(mode == "per_bin"), n_threads=n_threads)
    return EnvPriorBuffer(weight_from_error(errors, flags), flags)


def constant_prior(grid: VoxelGrid,
                   weight: float = BASELINE_WEIGHT) -> EnvPriorBuffer:
    """Uniform weights, used at the coarsest level and by the baseline."""
    return EnvPriorBuffer(np.full(grid.resolution, float(weight)),
                          np.full(grid.resolution, FLAG_VALID,
                                  dtype=np.uint8))


def cauchy_loss(sigma: np.ndarray, w: np.ndarray, params: CauchyParams):
    """Robust density penalty and its gradient.

    loss = lambda_c * sum log(1 + lambda_n * w * sigma^2)
    dloss/dsigma = lambda_c * 2 * lambda_n * w * sigma / (1 + lambda_n * w * sigma^2)
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    w = np.broadcast_to(np.asarray(w, dtype=np.float64), sigma.shape)
    q = params.weight_scale * w * sigma * sigma
    loss = params.loss_scale * float(np.log1p(q).sum())
    grad = params.loss_scale * 2.0 * params.weight_scale * w * sigma \
        / (1.0 + q)
    return loss, grad
