"""Run configuration: every constant of the method in one serializable place."""

from __future__ import annotations

import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass
class LevelSpec:
    grid_resolution: int
    image_downsample: int
    epochs: int


@dataclass
class HierarchySchedule:
    levels: list[LevelSpec]
    planes_enabled: bool = True
    prior_enabled: bool = True

    def __post_init__(self):
        if not self.levels:
            raise ValueError("schedule needs at least one level")
        res = [l.grid_resolution for l in self.levels]
        if any(b <= a for a, b in zip(res, res[1:])):
            raise ValueError("level resolutions must strictly increase")


@dataclass
class RunConfig:
    # difference planes
    sigma_s: float = 0.002
    planes_enabled: bool = True
    # env-map prior / Cauchy term
    prior_enabled: bool = True
    prior_mode: str = "global_tsum"       # or "per_bin"
    lambda_c_synthetic: float = 0.05
    lambda_c_real: float = 0.01
    lambda_n: float = 10.0
    baseline_w: float = 0.0001
    # auxiliary terms
    lambda_v: float = 1.0                 # skip-mask density threshold
    lambda_s: float = 0.1                 # visibility quadratic (real scenes)
    # hierarchy (desk-scale default; 256 is opt-in via `levels`)
    levels: tuple = (32, 64, 128)
    epochs: tuple | int = (128, 96, 64)
    image_downsamples: tuple | None = None  # default: 2^(n-1-i) per level
    # sampling
    step_factor: float = 0.5              # sample spacing / voxel edge
    guard_factor: float = 0.5             # visibility-trace guard / voxel edge
    # optimizer (lr_sigma = lr_sigma_scale / voxel_edge at each level)
    lr_sigma_scale: float = 0.3
    lr_color: float = 0.1
    lr_alpha: float = 10.0
    divergence_patience: int = 10
    ray_batch: int = 0                    # 0 = full-image epochs
    alpha_l2: float = 0.0                 # optional plane regularizer (off)
    # scene
    background: tuple = (1.0, 1.0, 1.0)
    scene_bbox: tuple | None = None       # ((min),(max)); None = dataset's
    sigma_init: float = 0.1
    color_init: float = 0.5
    # execution
    seed: int = 0
    deterministic: bool = True
    n_threads: int = 0                    # 0 = auto (capped at 8)
    eval_every: int = 16
    # export
    iso_voxel_depth: float = 2.0          # iso = depth / voxel_edge

    def lambda_c(self, scene_kind: str) -> float:
        return self.lambda_c_synthetic if scene_kind == "synthetic" \
            else self.lambda_c_real

    def schedule(self) -> HierarchySchedule:
        n = len(self.levels)
        epochs = (self.epochs,) * n if isinstance(self.epochs, int) \
            else tuple(self.epochs)
        if len(epochs) != n:
            raise ValueError("epochs must match the number of levels")
        downs = tuple(2 ** (n - 1 - i) for i in range(n)) \
            if self.image_downsamples is None else tuple(self.image_downsamples)
        if len(downs) != n:
            raise ValueError("image_downsamples must match levels")
        specs = [LevelSpec(int(r), int(d), int(e))
                 for r, d, e in zip(self.levels, downs, epochs)]
        return HierarchySchedule(specs, self.planes_enabled,
                                 self.prior_enabled)

    def resolve_threads(self) -> int:
        import os
        if self.n_threads > 0:
            return self.n_threads
        return min(os.cpu_count() or 1, 8)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, default=list)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        clean = {}
        for k, v in data.items():
            clean[k] = tuple(v) if isinstance(v, list) else v
        return cls(**clean)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        if path.suffix == ".toml":
            with open(path, "rb") as f:
                return cls.from_dict(tomllib.load(f))
        with open(path) as f:
            return cls.from_dict(json.load(f))
