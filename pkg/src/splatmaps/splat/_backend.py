"""Kernel backend selection.

The compiled extension is preferred; ``SPLATMAPS_BACKEND=numpy`` forces the
pure numpy kernels, ``SPLATMAPS_BACKEND=cython`` makes a missing extension
an import error instead of a silent fallback.
"""

import logging
import os

from . import _raster_np

log = logging.getLogger(__name__)

try:
    from . import _raster_ext
except ImportError:  # extension not built
    _raster_ext = None

_choice = os.environ.get("SPLATMAPS_BACKEND", "auto").lower()
if _choice == "cython" and _raster_ext is None:
    raise ImportError("SPLATMAPS_BACKEND=cython but the compiled kernels are not built")

kernels = _raster_np if _choice == "numpy" or _raster_ext is None else _raster_ext
if kernels is _raster_np and _choice != "numpy":
    log.warning("compiled splat kernels unavailable; using the numpy fallback")


def available() -> list[str]:
    return ["numpy"] + (["cython"] if _raster_ext is not None else [])


def current() -> str:
    return "cython" if kernels is _raster_ext and _raster_ext is not None else "numpy"


def use(name: str) -> None:
    """Switch kernels at runtime (tests and benchmarks)."""
    global kernels
    if name == "numpy":
        kernels = _raster_np
    elif name == "cython":
        if _raster_ext is None:
            raise RuntimeError("compiled splat kernels are not built")
        kernels = _raster_ext
    else:
        raise ValueError(f"unknown backend {name!r}")
