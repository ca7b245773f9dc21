"""Coarse-to-fine reconstruction pipeline.

Level loop: optimize the grid (and difference planes) at the coarsest
resolution first, then repeatedly (a) linearly upsample grid and planes,
(b) build the empty-space skip mask from the previous level's converged
densities, (c) if enabled, run the environment-map prior pass once to freeze
the per-voxel Cauchy weights for the level, and (d) optimize for the level's
epoch budget. Plane resolution tracks the downsampled image resolution of
each level. The first level has no prior pass and uses the constant baseline
weight instead.

Every run writes one JSON log line per epoch and, on completion or abort, a
resumable float64 checkpoint (grid + planes + completed level index).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffplane, envprior, export, optimizer, renderer, scene_io, volume
from .config import RunConfig
from .diffplane import DifferencePlane
from .envprior import CauchyParams, EnvPriorBuffer
from .optimizer import TrainParams
from .scene_io import Dataset
from .volume import SkipMask, VoxelGrid

CHECKPOINT_NAME = "checkpoint.npz"


@dataclass
class ReconstructionResult:
    grid: VoxelGrid
    planes: list[DifferencePlane] | None
    logs: list[dict]


def _dataset_bbox(dataset: Dataset, config: RunConfig) -> np.ndarray:
    if config.scene_bbox is not None:
        return np.asarray(config.scene_bbox, dtype=np.float64)
    return dataset.scene_bbox


def _save_checkpoint(path: Path, grid: VoxelGrid,
                     planes: list[DifferencePlane] | None, level: int):
    data = {"density": grid.density, "color": grid.color, "bbox": grid.bbox,
            "level": np.array(level)}
    if planes is not None:
        data["n_planes"] = np.array(len(planes))
        data["sigma_s"] = np.array(planes[0].sigma_s if planes else 0.0)
        for i, p in enumerate(planes):
            data[f"alpha_{i}"] = p.alpha
    np.savez(path, **data)


def _load_checkpoint(path: Path):
    with np.load(path) as z:
        grid = VoxelGrid(z["density"].shape, z["bbox"], z["density"],
                         z["color"])
        level = int(z["level"])
        planes = None
        if "n_planes" in z:
            sigma_s = float(z["sigma_s"])
            planes = [DifferencePlane(z[f"alpha_{i}"], sigma_s)
                      for i in range(int(z["n_planes"]))]
    return grid, planes, level


def _heldout_eval(heldout: Dataset | None, step_for, config: RunConfig,
                  n_threads: int):
    if heldout is None:
        return None

    def eval_fn(grid: VoxelGrid) -> float:
        vals = []
        for view in heldout.views:
            img, _ = renderer.render_image(grid, view, step_for(grid),
                                           background=config.background,
                                           n_threads=n_threads)
            vals.append(export.psnr(img, view.reference_image))
        return float(np.mean(vals))

    return eval_fn


def run(dataset: Dataset, config: RunConfig, out_dir=None,
        heldout: Dataset | None = None, resume: bool = False,
        stop_after_level: int | None = None) -> ReconstructionResult:
    """Run the full hierarchical reconstruction.

    `heldout` views, when given, are rendered periodically for PSNR logging.
    With `resume` the run continues from the checkpoint in `out_dir`.
    `stop_after_level` ends the run early (still writing the checkpoint),
    which is how interruption is exercised in tests.
    """
    schedule = config.schedule()
    bbox = _dataset_bbox(dataset, config)
    n_threads = config.resolve_threads()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        config.save(out / "config.json")

    logs: list[dict] = []
    start_level = 0
    grid = None
    planes: list[DifferencePlane] | None = None
    parent: VoxelGrid | None = None
    if resume:
        if out is None or not (out / CHECKPOINT_NAME).exists():
            raise FileNotFoundError("no checkpoint to resume from")
        grid, planes, done = _load_checkpoint(out / CHECKPOINT_NAME)
        parent = grid
        start_level = done + 1

    log_file = None
    if out is not None:
        mode = "a" if resume else "w"
        log_file = open(out / "train_log.jsonl", mode)
    t_start = time.monotonic()

    try:
        for li in range(start_level, len(schedule.levels)):
            spec = schedule.levels[li]
            views = scene_io.downsample_views(dataset,
                                              spec.image_downsample).views
            res = (spec.grid_resolution,) * 3
            skip = None
            if li == 0:
                grid = VoxelGrid.initial(res, bbox, config.sigma_init,
                                         config.color_init)
            else:
                skip = volume.build_skip_mask(parent, config.lambda_v)
                grid = volume.upsample(grid, res)
            if schedule.planes_enabled:
                if planes is None:
                    planes = [DifferencePlane.zeros(v.intrinsics.height,
                                                    v.intrinsics.width,
                                                    config.sigma_s)
                              for v in views]
                else:
                    planes = [diffplane.upsample_plane(
                        p, (v.intrinsics.height, v.intrinsics.width))
                        for p, v in zip(planes, views)]

            step = config.step_factor * grid.voxel_edge
            if schedule.prior_enabled and li > 0:
                prior = envprior.compute_prior_weights(
                    grid, Dataset(views, dataset.scene_bbox,
                                  dataset.scene_kind),
                    step, config.guard_factor * grid.voxel_edge, skip,
                    config.prior_mode, n_threads)
            else:
                prior = envprior.constant_prior(grid, config.baseline_w)

            cauchy = CauchyParams(config.lambda_c(dataset.scene_kind),
                                  config.lambda_n)
            params = TrainParams(
                step=step, epochs=spec.epochs,
                lr_sigma=config.lr_sigma_scale / grid.voxel_edge,
                lr_color=config.lr_color, lr_alpha=config.lr_alpha,
                background=tuple(config.background),
                lambda_s=config.lambda_s if dataset.scene_kind == "real"
                else 0.0,
                cauchy=cauchy, skip=skip, n_threads=n_threads,
                ray_batch=config.ray_batch, seed=config.seed,
                divergence_patience=config.divergence_patience,
                alpha_l2=config.alpha_l2, eval_every=config.eval_every)
            eval_fn = _heldout_eval(
                heldout, lambda g: config.step_factor * g.voxel_edge,
                config, n_threads)

            def epoch_hook(epoch, rec, _li=li):
                entry = {"level": _li, **rec,
                         "elapsed_s": round(time.monotonic() - t_start, 3)}
                logs.append(entry)
                if log_file is not None:
                    log_file.write(json.dumps(entry) + "\n")
                    log_file.flush()

            optimizer.train_level(grid, planes, views, prior.weights, params,
                                  eval_fn, epoch_hook)
            parent = grid.copy()
            if out is not None:
                # The checkpoint always holds the last *completed* level, so
                # an abort mid-level stays resumable.
                _save_checkpoint(out / CHECKPOINT_NAME, grid, planes, li)
            if stop_after_level is not None and li >= stop_after_level:
                break
    finally:
        if log_file is not None:
            log_file.close()

    if out is not None:
        volume.save_snapshot(grid, out / "grid.vxgr")
        if planes is not None:
            pdir = out / "planes"
            pdir.mkdir(exist_ok=True)
            for i, p in enumerate(planes):
                diffplane.save_plane(p, pdir / f"plane_{i:03d}.vxpl")
    return ReconstructionResult(grid, planes, logs)


def run_baseline(dataset: Dataset, config: RunConfig, out_dir=None,
                 heldout: Dataset | None = None) -> ReconstructionResult:
    """Dedicated baseline path: plain volume fitting, no planes, no prior.

    The density penalty runs with the constant baseline weight. This is a
    separate assembly from run() so feature-flag regressions are caught by
    comparing the two.
    """
    import dataclasses

    cfg = dataclasses.replace(config, planes_enabled=False,
                              prior_enabled=False)
    schedule = cfg.schedule()
    bbox = _dataset_bbox(dataset, cfg)
    n_threads = cfg.resolve_threads()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    logs: list[dict] = []
    grid = None
    parent = None
    t_start = time.monotonic()
    log_lines = []
    for li, spec in enumerate(schedule.levels):
        views = scene_io.downsample_views(dataset,
                                          spec.image_downsample).views
        res = (spec.grid_resolution,) * 3
        skip = None
        if li == 0:
            grid = VoxelGrid.initial(res, bbox, cfg.sigma_init,
                                     cfg.color_init)
        else:
            skip = volume.build_skip_mask(parent, cfg.lambda_v)
            grid = volume.upsample(grid, res)
        step = cfg.step_factor * grid.voxel_edge
        prior = envprior.constant_prior(grid, cfg.baseline_w)
        params = TrainParams(
            step=step, epochs=spec.epochs,
            lr_sigma=cfg.lr_sigma_scale / grid.voxel_edge,
            lr_color=cfg.lr_color, lr_alpha=cfg.lr_alpha,
            background=tuple(cfg.background),
            lambda_s=cfg.lambda_s if dataset.scene_kind == "real" else 0.0,
            cauchy=CauchyParams(cfg.lambda_c(dataset.scene_kind),
                                cfg.lambda_n),
            skip=skip, n_threads=n_threads, ray_batch=cfg.ray_batch,
            seed=cfg.seed, divergence_patience=cfg.divergence_patience,
            eval_every=cfg.eval_every)
        eval_fn = _heldout_eval(heldout,
                                lambda g: cfg.step_factor * g.voxel_edge,
                                cfg, n_threads)

        def epoch_hook(epoch, rec, _li=li):
            entry = {"level": _li, **rec,
                     "elapsed_s": round(time.monotonic() - t_start, 3)}
            logs.append(entry)
            log_lines.append(json.dumps(entry))

        optimizer.train_level(grid, None, views, prior.weights, params,
                              eval_fn, epoch_hook)
        parent = grid.copy()
    if out is not None:
        volume.save_snapshot(grid, out / "grid.vxgr")
        (out / "train_log.jsonl").write_text("\n".join(log_lines) + "\n")
    return ReconstructionResult(grid, None, logs)


def _variant_configs(config: RunConfig) -> dict[str, RunConfig]:
    import dataclasses

    return {
        "full": dataclasses.replace(config, planes_enabled=True,
                                    prior_enabled=True),
        "no_planes": dataclasses.replace(config, planes_enabled=False,
                                         prior_enabled=True),
        "no_prior": dataclasses.replace(config, planes_enabled=True,
                                        prior_enabled=False),
        "baseline": dataclasses.replace(config, planes_enabled=False,
                                        prior_enabled=False),
    }


def ablation(dataset: Dataset, config: RunConfig, out_dir=None,
             heldout: Dataset | None = None, gt_mesh=None,
             fscore_tau: float | None = None) -> dict:
    """Run {full, no-planes, no-prior, baseline} with shared seeds.

    Returns a report of final objective, held-out PSNR, geometry metrics
    (when a reference mesh is given) and wall-clock per variant.
    """
    out = Path(out_dir) if out_dir is not None else None
    report = {}
    for name, cfg in _variant_configs(config).items():
        sub = None if out is None else out / name
        t0 = time.monotonic()
        result = run(dataset, cfg, sub, heldout)
        wall = time.monotonic() - t0
        entry = {"final_f_hat": result.logs[-1]["f_hat"],
                 "epochs": len(result.logs),
                 "wall_clock_s": round(wall, 3)}
        if heldout is not None:
            vals = []
            for view in heldout.views:
                img, _ = renderer.render_image(
                    result.grid, view,
                    config.step_factor * result.grid.voxel_edge,
                    background=config.background,
                    n_threads=cfg.resolve_threads())
                vals.append(export.psnr(img, view.reference_image))
            entry["heldout_psnr"] = float(np.mean(vals))
        if gt_mesh is not None:
            iso = config.iso_voxel_depth / result.grid.voxel_edge
            mesh = export.marching_cubes(result.grid, iso)
            tau = fscore_tau if fscore_tau is not None \
                else 2.0 * result.grid.voxel_edge
            p, r, f = export.geometry_fscore(mesh, gt_mesh, tau)
            entry["geometry"] = {"precision": p, "recall": r, "fscore": f,
                                 "tau": tau}
        report[name] = entry
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "ablation.json", "w") as f:
            json.dump(report, f, indent=2)
    return report
