"""voxrf: voxel radiance-field reconstruction from posed images.

Direct nonlinear least-squares fitting of a density + Lambertian-color voxel
grid, with two mechanisms that keep view-dependent light out of the
geometry: per-camera difference planes that absorb per-pixel view-dependent
residual, and a transient per-voxel environment-map prior that weights a
robust density penalty.
"""

from ._kernels import active_backend_name, available_backends
from .config import HierarchySchedule, LevelSpec, RunConfig
from .diffplane import DifferencePlane
from .envprior import CauchyParams, EnvPriorBuffer, MiniEnvMap
from .pipeline import ReconstructionResult, ablation, run, run_baseline
from .scene_io import (CameraIntrinsics, CameraPose, CameraView, Dataset,
                       load_dataset)
from .volume import SkipMask, VoxelGrid

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics", "CameraPose", "CameraView", "CauchyParams",
    "Dataset", "DifferencePlane", "EnvPriorBuffer", "HierarchySchedule",
    "LevelSpec", "MiniEnvMap", "ReconstructionResult", "RunConfig",
    "SkipMask", "VoxelGrid", "ablation", "active_backend_name",
    "available_backends", "load_dataset", "run", "run_baseline",
    "__version__",
]
