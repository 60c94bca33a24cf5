"""Kernel backend selection.

The compiled extension is preferred when it built successfully.  Set
``DEEPSIM_KERNELS=numpy`` to force the portable fallback, or
``DEEPSIM_KERNELS=native`` to require the extension (import fails loudly if
it is unavailable).  ``benchmarks/bench_kernels.py`` compares the two.
"""

import os

from . import numpy_backend

_requested = os.environ.get("DEEPSIM_KERNELS", "").strip().lower()
if _requested not in ("", "native", "numpy"):
    raise ImportError(
        f"DEEPSIM_KERNELS must be 'native' or 'numpy', got {_requested!r}")

_impl = None
if _requested in ("", "native"):
    try:
        from . import _native as _impl
    except ImportError:
        if _requested == "native":
            raise
if _impl is None:
    _impl = numpy_backend

conv2d = _impl.conv2d
maxpool2d = _impl.maxpool2d
conv_output_dim = numpy_backend.conv_output_dim
pool_output_dim = numpy_backend.pool_output_dim
BACKEND = "numpy" if _impl is numpy_backend else "native"

__all__ = ["conv2d", "maxpool2d", "conv_output_dim", "pool_output_dim",
           "BACKEND", "numpy_backend"]
