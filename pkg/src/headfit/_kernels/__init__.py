"""Kernel backend selection.

The compiled Cython core is used when available; otherwise the pure
numpy fallback takes over. Set HEADFIT_KERNEL=python to force the
fallback (the benchmark and the equivalence tests import both modules
directly, regardless of this switch).
"""

import os

from . import pure

BACKEND = "python"
_impl = pure

if os.environ.get("HEADFIT_KERNEL", "").lower() not in ("python", "pure"):
    try:
        from . import _core as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        pass

raster_forward = _impl.raster_forward
raster_backward = _impl.raster_backward
surface_closest = _impl.surface_closest
surface_closest_brute = _impl.surface_closest_brute
