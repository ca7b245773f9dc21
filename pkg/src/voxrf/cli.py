"""Command-line interface.

    voxrf reconstruct --data <dir> --out <dir> [--config cfg.json] ...
    voxrf ablate      --data <dir> --out <dir> [--config cfg.json]
    voxrf render      --grid grid.vxgr --data <dir> --out <dir> [--view N]
    voxrf mesh        --grid grid.vxgr --out mesh.ply [--iso X]
    voxrf check-grad  [--instances N]
    voxrf synth       --scene {diffuse,glossy,cube} --out <dir>
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np


def _load_config(args):
    from .config import RunConfig

    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    if getattr(args, "levels", None):
        n = args.levels
        cfg = dataclasses.replace(cfg, levels=cfg.levels[:n],
                                  epochs=tuple(cfg.schedule().levels[i].epochs
                                               for i in range(n)))
    if getattr(args, "no_planes", False):
        cfg = dataclasses.replace(cfg, planes_enabled=False)
    if getattr(args, "no_prior", False):
        cfg = dataclasses.replace(cfg, prior_enabled=False)
    if getattr(args, "deterministic", False):
        cfg = dataclasses.replace(cfg, deterministic=True)
    if getattr(args, "background", None):
        cfg = dataclasses.replace(cfg,
                                  background=tuple(args.background))
    return cfg


def _cmd_reconstruct(args):
    from . import pipeline, scene_io

    cfg = _load_config(args)
    dataset = scene_io.load_dataset(args.data, args.downsample,
                                    background=cfg.background)
    heldout = None
    if (Path(args.data) / "transforms_test.json").exists():
        heldout = scene_io.load_dataset(args.data, args.downsample,
                                        split="test",
                                        background=cfg.background)
    result = pipeline.run(dataset, cfg, args.out, heldout,
                          resume=args.resume)
    last = result.logs[-1]
    print(f"done: {len(result.logs)} epochs over "
          f"{last['level'] + 1} levels, final objective "
          f"{last['f_hat']:.4f}, outputs in {args.out}")


def _cmd_ablate(args):
    from . import export, pipeline, scene_io

    cfg = _load_config(args)
    dataset = scene_io.load_dataset(args.data, args.downsample,
                                    background=cfg.background)
    heldout = None
    if (Path(args.data) / "transforms_test.json").exists():
        heldout = scene_io.load_dataset(args.data, args.downsample,
                                        split="test",
                                        background=cfg.background)
    gt_mesh = None
    mesh_path = Path(args.data) / "gt_mesh.ply"
    if mesh_path.exists():
        gt_mesh = export.load_ply(mesh_path)
    report = pipeline.ablation(dataset, cfg, args.out, heldout, gt_mesh)
    print(json.dumps(report, indent=2))


def _cmd_render(args):
    from . import diffplane, export, scene_io, volume

    grid = volume.load_snapshot(args.grid)
    dataset = scene_io.load_dataset(args.data, args.downsample,
                                    split=args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    indices = [args.view] if args.view is not None \
        else range(len(dataset.views))
    step = args.step_factor * grid.voxel_edge
    for i in indices:
        view = dataset.views[i]
        plane = None
        plane_path = Path(args.planes) / f"plane_{i:03d}.vxpl" \
            if args.planes else None
        if plane_path is not None and plane_path.exists():
            plane = diffplane.load_plane(plane_path)
        elif args.planes:
            print(f"warning: no plane for view {i}; "
                  "rendering the Lambertian image only", file=sys.stderr)
        images = export.render_decomposition(grid, view, plane, step,
                                             gain=args.gain)
        for name, img in images.items():
            export.save_image(out / f"view{i:03d}_{name}.png", img)
    print(f"wrote renders to {out}")


def _cmd_mesh(args):
    from . import export, volume

    grid = volume.load_snapshot(args.grid)
    iso = args.iso if args.iso is not None \
        else args.iso_voxel_depth / grid.voxel_edge
    verts, normals, faces = export.marching_cubes(grid, iso)
    export.save_ply(args.out, verts, faces, normals)
    print(f"wrote {len(verts)} vertices / {len(faces)} faces to {args.out} "
          f"(iso = {iso:.3f})")


def _cmd_check_grad(args):
    from . import optimizer

    worst = 0.0
    for k in range(args.instances):
        problem = optimizer.make_random_problem(seed=args.seed + k)
        report = optimizer.check_gradients(problem)
        print(f"instance {k}: {report}")
        worst = max(worst, report.max_rel_error)
    print(f"worst relative error over {args.instances} instances: "
          f"{worst:.3e}")
    return 0 if worst < args.tolerance else 1


def _cmd_synth(args):
    from . import synth

    scenes = {"diffuse": synth.diffuse_case, "glossy": synth.ambiguity_case,
              "cube": synth.cube_case}
    scene = scenes[args.scene](args.views)
    synth.generate(scene, args.resolution, args.views, args.out,
                   n_test=args.test_views)
    print(f"wrote {args.scene} dataset ({args.views} train / "
          f"{args.test_views} test views at {args.resolution}^2) to "
          f"{args.out}")


def main(argv=None):
    parser = argparse.ArgumentParser(prog="voxrf", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common_run(p):
        p.add_argument("--data", required=True, help="dataset directory")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", help="JSON or TOML config file")
        p.add_argument("--downsample", type=int, default=1)
        p.add_argument("--levels", type=int,
                       help="use only the first N schedule levels")
        p.add_argument("--no-planes", action="store_true")
        p.add_argument("--no-prior", action="store_true")
        p.add_argument("--deterministic", action="store_true")
        p.add_argument("--background", type=float, nargs=3,
                       metavar=("R", "G", "B"))

    p = sub.add_parser("reconstruct", help="run the hierarchical fit")
    common_run(p)
    p.add_argument("--resume", action="store_true",
                   help="continue from the checkpoint in --out")
    p.set_defaults(fn=_cmd_reconstruct)

    p = sub.add_parser("ablate", help="run full/no-planes/no-prior/baseline")
    common_run(p)
    p.set_defaults(fn=_cmd_ablate)

    p = sub.add_parser("render", help="decomposition renders from a snapshot")
    p.add_argument("--grid", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--planes", help="directory of plane snapshots")
    p.add_argument("--view", type=int)
    p.add_argument("--split", default="train")
    p.add_argument("--downsample", type=int, default=1)
    p.add_argument("--gain", type=float, default=4.0)
    p.add_argument("--step-factor", type=float, default=0.5)
    p.set_defaults(fn=_cmd_render)

    p = sub.add_parser("mesh", help="marching-cubes surface from a snapshot")
    p.add_argument("--grid", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iso", type=float)
    p.add_argument("--iso-voxel-depth", type=float, default=2.0)
    p.set_defaults(fn=_cmd_mesh)

    p = sub.add_parser("check-grad", help="finite-difference gradient check")
    p.add_argument("--instances", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(fn=_cmd_check_grad)

    p = sub.add_parser("synth", help="generate an analytic test dataset")
    p.add_argument("--scene", choices=("diffuse", "glossy", "cube"),
                   default="diffuse")
    p.add_argument("--out", required=True)
    p.add_argument("--resolution", type=int, default=128)
    p.add_argument("--views", type=int, default=24)
    p.add_argument("--test-views", type=int, default=4)
    p.set_defaults(fn=_cmd_synth)

    args = parser.parse_args(argv)
    rc = args.fn(args)
    return 0 if rc is None else rc


if __name__ == "__main__":
    sys.exit(main())
