"""Hot-loop kernels with a compiled core and a NumPy fallback.

Both backends expose the same three entry points:

    render_rays(...)      batched ray march + emission/absorption accumulation
    photometric_view(...) fused forward + analytic gradient scatter for one view
    env_prior(...)        per-voxel environment-map fit error pass

The compiled Cython extension (``voxrf._kernels._core``) is selected when it
imported successfully; otherwise the pure-NumPy implementation is used. Set
``VOXRF_BACKEND=python`` or ``VOXRF_BACKEND=compiled`` to force a choice
(``compiled`` raises if the extension is missing). Both backends follow the
same sampling and interpolation conventions, so results agree to floating
point noise; see tests/test_backends.py and benchmarks/bench_backends.py.
"""

import os

from . import numpy_backend

try:
    from . import _core as _compiled
except ImportError:
    _compiled = None


def available_backends():
    names = ["python"]
    if _compiled is not None:
        names.insert(0, "compiled")
    return names


def get_backend(name=None):
    """Return the kernel module for `name` (default: env var or best available)."""
    if name is None:
        name = os.environ.get("VOXRF_BACKEND", "auto")
    if name in ("auto", ""):
        return _compiled if _compiled is not None else numpy_backend
    if name == "compiled":
        if _compiled is None:
            raise RuntimeError(
                "compiled kernel backend requested but voxrf._kernels._core "
                "is not built; run `python setup.py build_ext --inplace`"
            )
        return _compiled
    if name == "python":
        return numpy_backend
    raise ValueError(f"unknown backend {name!r}")


def active_backend_name():
    return get_backend().BACKEND_NAME
