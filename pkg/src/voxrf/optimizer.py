"""Objective assembly and first-order minimization.

The training objective is

    0.5 * sum_pixels |H_hat - r|^2            photometric residuals
  + lambda_c * sum log(1 + lambda_n w s^2)    robust density penalty
  + lambda_s * sum_rays (-4 (T - 0.5)^2 + 1)  visibility quadratic (real scenes)

with H_hat the difference-plane blend of the composited ray color. All
gradients are analytic: color gradients scatter T_j (1 - e^{-s_j d_j}) times
the trilinear weights, density gradients use the forward/suffix split of the
accumulation formula, and the plane gradient is the closed-form derivative
of the blend. Everything is validated against central finite differences by
check_gradients.

Updates are adaptive first-order steps (accumulated squared-gradient
normalization) with per-family learning rates, followed by projection:
density >= 0, colors in [0, 1], plane values >= 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffplane, renderer, scene_io
from ._kernels import get_backend
from .diffplane import DifferencePlane
from .envprior import CauchyParams, cauchy_loss
from .scene_io import CameraView
from .volume import SkipMask, VoxelGrid


@dataclass
class ObjectiveTerms:
    photometric: float = 0.0
    cauchy: float = 0.0
    sparsity: float = 0.0

    @property
    def total(self) -> float:
        return self.photometric + self.cauchy + self.sparsity


@dataclass
class GradientSet:
    dsigma: np.ndarray
    dcolor: np.ndarray
    dalpha: list[np.ndarray] | None


@dataclass
class GradBuffers:
    """Reusable per-thread scatter buffers for one grid resolution."""

    dsig: np.ndarray                      # (threads, nx, ny, nz)
    dcol: np.ndarray                      # (threads, nx, ny, nz, 3)

    @classmethod
    def for_grid(cls, grid: VoxelGrid, n_threads: int) -> "GradBuffers":
        nt = max(1, n_threads) if get_backend().BACKEND_NAME == "compiled" \
            else 1
        res = grid.resolution
        return cls(np.zeros((nt,) + res), np.zeros((nt,) + res + (3,)))

    def zero(self):
        self.dsig[:] = 0.0
        self.dcol[:] = 0.0

    def reduce(self):
        return self.dsig.sum(axis=0), self.dcol.sum(axis=0)


def _view_rays(view: CameraView):
    origins, dirs = scene_io.camera_rays(view)
    ref = view.reference_image.reshape(-1, 3)
    return origins, dirs, ref


def photometric_pass(grid: VoxelGrid, views: list[CameraView],
                     planes: list[DifferencePlane] | None, step: float,
                     skip: SkipMask | None = None,
                     background=scene_io.DEFAULT_BACKGROUND,
                     lambda_s: float = 0.0, n_threads: int = 1,
                     buffers: GradBuffers | None = None,
                     ray_subsets=None):
    """Residual objective and analytic gradients over all training pixels.

    Returns (photometric, sparsity, GradientSet). The sparsity term is only
    accumulated when `lambda_s` > 0 (real scenes). `ray_subsets`, when
    given, restricts each view to the listed flat pixel indices (ray-batch
    mode).
    """
    backend = get_backend()
    if buffers is None:
        buffers = GradBuffers.for_grid(grid, n_threads)
    buffers.zero()
    bg = np.asarray(background, dtype=np.float64)
    sm = skip.mask if skip is not None else None
    sc = skip.cell_sizes if skip is not None else None
    f_sum = 0.0
    ls_sum = 0.0
    dalpha = None if planes is None else \
        [np.zeros(p.alpha.size) for p in planes]
    for i, view in enumerate(views):
        origins, dirs, ref = _view_rays(view)
        alpha = None
        sigma_s = 0.0
        if planes is not None:
            alpha = planes[i].alpha.reshape(-1)
            sigma_s = planes[i].sigma_s
        da = dalpha[i] if dalpha is not None else np.zeros(0)
        if ray_subsets is not None:
            sel = ray_subsets[i]
            da_sub = np.zeros(sel.size)
            f, ls = backend.photometric_view(
                grid.density, grid.color, grid.bbox[0], grid.cell_sizes,
                np.ascontiguousarray(origins[sel]),
                np.ascontiguousarray(dirs[sel]),
                np.ascontiguousarray(ref[sel]),
                None if alpha is None else np.ascontiguousarray(alpha[sel]),
                sigma_s, bg, step, lambda_s, sm, sc, buffers.dsig,
                buffers.dcol, da_sub, n_threads)
            if dalpha is not None:
                np.add.at(da, sel, da_sub)
        else:
            f, ls = backend.photometric_view(
                grid.density, grid.color, grid.bbox[0], grid.cell_sizes,
                origins, dirs, ref, alpha, sigma_s, bg, step, lambda_s, sm,
                sc, buffers.dsig, buffers.dcol, da, n_threads)
        f_sum += f
        ls_sum += ls
    dsig, dcol = buffers.reduce()
    if dalpha is not None:
        dalpha = [d.reshape(p.alpha.shape) for d, p in zip(dalpha, planes)]
    return f_sum, ls_sum, GradientSet(dsig, dcol, dalpha)


def sparsity_pass(t_values, lambda_s: float):
    """Visibility quadratic on per-ray transmittance.

    Returns (loss, dloss/dT); zero at T = 0 and T = 1, maximal (lambda_s per
    ray) at T = 0.5, so rays are pushed to commit to either empty or opaque.
    """
    t = np.asarray(t_values, dtype=np.float64)
    d = t - 0.5
    loss = float((lambda_s * (-4.0 * d * d + 1.0)).sum())
    return loss, -8.0 * lambda_s * d


@dataclass
class Problem:
    """A self-contained objective instance (used by the gradient checker)."""

    grid: VoxelGrid
    views: list[CameraView]
    planes: list[DifferencePlane] | None
    prior_w: np.ndarray
    cauchy: CauchyParams
    step: float
    background: tuple = scene_io.DEFAULT_BACKGROUND
    lambda_s: float = 0.0
    skip: SkipMask | None = None
    alpha_l2: float = 0.0


def objective(problem: Problem, n_threads: int = 1):
    """Full objective and analytic gradients of a Problem."""
    f, ls, grads = photometric_pass(
        problem.grid, problem.views, problem.planes, problem.step,
        problem.skip, problem.background, problem.lambda_s, n_threads)
    lc, dlc = cauchy_loss(problem.grid.density, problem.prior_w,
                          problem.cauchy)
    grads.dsigma += dlc
    if problem.alpha_l2 > 0.0 and problem.planes is not None:
        for p, da in zip(problem.planes, grads.dalpha):
            f += problem.alpha_l2 * float((p.alpha ** 2).sum())
            da += 2.0 * problem.alpha_l2 * p.alpha
    return ObjectiveTerms(f, lc, ls), grads


def objective_value(problem: Problem) -> float:
    """Forward-only objective evaluation (finite-difference workhorse)."""
    bg = np.asarray(problem.background, dtype=np.float64)
    total = 0.0
    for i, view in enumerate(problem.views):
        origins, dirs, ref = _view_rays(view)
        h_raw, t = renderer.render_rays(problem.grid, origins, dirs,
                                        problem.step, problem.skip)
        h_comp = h_raw + t[:, None] * bg
        if problem.planes is not None:
            p = problem.planes[i]
            h_hat = diffplane.blend(h_comp, ref, p.alpha.reshape(-1),
                                    p.sigma_s)
            if problem.alpha_l2 > 0.0:
                total += problem.alpha_l2 * float((p.alpha ** 2).sum())
        else:
            h_hat = h_comp
        e = h_hat - ref
        total += 0.5 * float((e * e).sum())
        if problem.lambda_s > 0.0:
            total += sparsity_pass(t, problem.lambda_s)[0]
    lc, _ = cauchy_loss(problem.grid.density, problem.prior_w, problem.cauchy)
    return total + lc


@dataclass
class GradCheckReport:
    max_rel_error: float
    sigma_error: float
    color_error: float
    alpha_error: float

    def __str__(self):
        return (f"max rel error {self.max_rel_error:.3e} "
                f"(sigma {self.sigma_error:.3e}, color {self.color_error:.3e},"
                f" alpha {self.alpha_error:.3e})")


def _rel_err(a: float, fd: float) -> float:
    scale = max(abs(a), abs(fd))
    if scale < 1e-8:
        return 0.0
    return abs(a - fd) / scale


def _fd_block(problem: Problem, values: np.ndarray, analytic: np.ndarray,
              eps_scale: float) -> float:
    worst = 0.0
    flat_v = values.reshape(-1)
    flat_g = analytic.reshape(-1)
    for k in range(flat_v.size):
        eps = eps_scale * max(1.0, abs(flat_v[k]))
        orig = flat_v[k]
        flat_v[k] = orig + eps
        f_plus = objective_value(problem)
        flat_v[k] = orig - eps
        f_minus = objective_value(problem)
        flat_v[k] = orig
        fd = (f_plus - f_minus) / (2.0 * eps)
        worst = max(worst, _rel_err(flat_g[k], fd))
    return worst


def check_gradients(problem: Problem, eps_scale: float = 1e-5
                    ) -> GradCheckReport:
    """Compare every analytic gradient entry against central differences."""
    _, grads = objective(problem)
    s_err = _fd_block(problem, problem.grid.density, grads.dsigma, eps_scale)
    c_err = _fd_block(problem, problem.grid.color, grads.dcolor, eps_scale)
    a_err = 0.0
    if problem.planes is not None:
        for p, da in zip(problem.planes, grads.dalpha):
            a_err = max(a_err, _fd_block(problem, p.alpha, da, eps_scale))
    return GradCheckReport(max(s_err, c_err, a_err), s_err, c_err, a_err)


def make_random_problem(seed: int = 0, resolution: int = 4, n_views: int = 2,
                        image_size: int = 8, sigma_s: float = 0.002,
                        with_planes: bool = True, lambda_s: float = 0.0,
                        random_alpha: bool = True) -> Problem:
    """Small randomized instance for gradient validation."""
    rng = np.random.default_rng(seed)
    bbox = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])
    res = (resolution,) * 3
    grid = VoxelGrid(res, bbox, rng.uniform(0.05, 3.0, res),
                     rng.uniform(0.0, 1.0, res + (3,)))
    views = []
    planes = [] if with_planes else None
    radius = 3.0
    for i in range(n_views):
        phi = 2.0 * np.pi * i / n_views + rng.uniform(0.0, 0.3)
        center = np.array([radius * np.cos(phi), radius * np.sin(phi),
                           rng.uniform(-0.5, 0.5)])
        pose = scene_io.look_at_pose(center, np.zeros(3))
        intr = scene_io.intrinsics_from_fov(image_size, image_size,
                                            np.deg2rad(50.0))
        img = rng.uniform(0.0, 1.0, (image_size, image_size, 3))
        views.append(CameraView(intr, pose, img))
        if with_planes:
            alpha = rng.uniform(0.0, 400.0, (image_size, image_size)) \
                if random_alpha else np.zeros((image_size, image_size))
            planes.append(DifferencePlane(alpha, sigma_s))
    w = rng.uniform(0.0, 1.0, res)
    step = 0.5 * grid.voxel_edge
    return Problem(grid, views, planes, w, CauchyParams(), step,
                   lambda_s=lambda_s)


def adagrad_update(values: np.ndarray, grad: np.ndarray, acc: np.ndarray,
                   lr: float, eps: float = 1e-8):
    """In-place adaptive step: acc += g^2; v -= lr * g / (sqrt(acc) + eps)."""
    acc += grad * grad
    values -= lr * grad / (np.sqrt(acc) + eps)


@dataclass
class AdaptiveState:
    """Per-level optimizer state: squared-gradient accumulators."""

    acc_sigma: np.ndarray
    acc_color: np.ndarray
    acc_alpha: list[np.ndarray] | None
    lr_scale: float = 1.0
    worse_streak: int = 0
    prev_value: float | None = None

    @classmethod
    def for_problem(cls, grid: VoxelGrid,
                    planes: list[DifferencePlane] | None) -> "AdaptiveState":
        return cls(np.zeros(grid.resolution),
                   np.zeros(grid.resolution + (3,)),
                   None if planes is None else
                   [np.zeros(p.alpha.shape) for p in planes])


def step(grid: VoxelGrid, planes: list[DifferencePlane] | None,
         grads: GradientSet, state: AdaptiveState, lr_sigma: float,
         lr_color: float, lr_alpha: float):
    """One adaptive update of all variables followed by projection."""
    s = state.lr_scale
    adagrad_update(grid.density, grads.dsigma, state.acc_sigma, s * lr_sigma)
    adagrad_update(grid.color, grads.dcolor, state.acc_color, s * lr_color)
    np.maximum(grid.density, 0.0, out=grid.density)
    np.clip(grid.color, 0.0, 1.0, out=grid.color)
    if planes is not None and grads.dalpha is not None:
        for p, da, acc in zip(planes, grads.dalpha, state.acc_alpha):
            adagrad_update(p.alpha, da, acc, s * lr_alpha)
            np.maximum(p.alpha, 0.0, out=p.alpha)


def note_divergence(state: AdaptiveState, value: float,
                    patience: int = 10) -> bool:
    """Track consecutive objective increases; halve learning rates after
    `patience` of them. Returns True when a halving was triggered."""
    triggered = False
    if state.prev_value is not None and value > state.prev_value:
        state.worse_streak += 1
        if state.worse_streak >= patience:
            state.lr_scale *= 0.5
            state.worse_streak = 0
            triggered = True
    else:
        state.worse_streak = 0
    state.prev_value = value
    return triggered


@dataclass
class TrainParams:
    step: float
    epochs: int
    lr_sigma: float
    lr_color: float = 0.1
    lr_alpha: float = 10.0
    background: tuple = scene_io.DEFAULT_BACKGROUND
    lambda_s: float = 0.0
    cauchy: CauchyParams = field(default_factory=CauchyParams)
    skip: SkipMask | None = None
    n_threads: int = 1
    ray_batch: int = 0
    seed: int = 0
    divergence_patience: int = 10
    alpha_l2: float = 0.0
    eval_every: int = 16


def train_level(grid: VoxelGrid, planes: list[DifferencePlane] | None,
                views: list[CameraView], prior_w: np.ndarray,
                params: TrainParams, eval_fn=None, epoch_hook=None):
    """Optimize one hierarchy level for a fixed epoch budget.

    Returns a list of per-epoch records (objective terms and optional
    held-out PSNR from `eval_fn`). Deterministic for a fixed configuration:
    pixel order, reduction order and ray-batch shuffles are all seeded.
    """
    state = AdaptiveState.for_problem(grid, planes)
    buffers = GradBuffers.for_grid(grid, params.n_threads)
    n_pix = [v.intrinsics.width * v.intrinsics.height for v in views]
    records = []
    for epoch in range(params.epochs):
        subsets = None
        if params.ray_batch > 0:
            rng = np.random.default_rng((params.seed, epoch))
            subsets_all = [rng.permutation(n) for n in n_pix]
            n_batches = max(1, math.ceil(max(n_pix) / params.ray_batch))
        else:
            n_batches = 1
        f_epoch = 0.0
        ls_epoch = 0.0
        lc_epoch = 0.0
        for b in range(n_batches):
            if params.ray_batch > 0:
                subsets = [np.sort(s[b * params.ray_batch:
                                     (b + 1) * params.ray_batch])
                           for s in subsets_all]
            f, ls, grads = photometric_pass(
                grid, views, planes, params.step, params.skip,
                params.background, params.lambda_s, params.n_threads,
                buffers, subsets)
            lc, dlc = cauchy_loss(grid.density, prior_w, params.cauchy)
            # One full regularizer application per epoch, spread over batches.
            grads.dsigma += dlc / n_batches
            if params.alpha_l2 > 0.0 and planes is not None:
                for p, da in zip(planes, grads.dalpha):
                    da += 2.0 * params.alpha_l2 * p.alpha
            step(grid, planes, grads, state, params.lr_sigma,
                 params.lr_color, params.lr_alpha)
            f_epoch += f
            ls_epoch += ls
            lc_epoch = lc
        halved = note_divergence(state, f_epoch, params.divergence_patience)
        rec = {"epoch": epoch, "f_hat": f_epoch, "cauchy": lc_epoch,
               "sparsity": ls_epoch, "lr_scale": state.lr_scale}
        if halved:
            rec["lr_halved"] = True
        if eval_fn is not None and (
                epoch % params.eval_every == params.eval_every - 1
                or epoch == params.epochs - 1):
            rec["psnr"] = eval_fn(grid)
        else:
            rec["psnr"] = None
        records.append(rec)
        if epoch_hook is not None:
            epoch_hook(epoch, rec)
    return records
