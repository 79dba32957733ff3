"""Convolution kernel backend selection.

Two interchangeable backends: the numpy implementation in pyref, whose
per-tap tensordot reduction runs on BLAS, and a compiled Cython extension
with direct scalar loops. benchmarks/bench_kernels.py shows the BLAS path
is ~3x faster at this model's shapes, so "auto" picks python; the compiled
extension remains available as a cross-check and for environments with a
poor BLAS. Set SIMPROP_KERNELS=python or SIMPROP_KERNELS=compiled to force
a backend (forcing "compiled" raises if the extension is missing). Both
backends share the same contracts; within one backend results are
bit-reproducible at any thread count.
"""

import os

from . import pyref

_choice = os.environ.get("SIMPROP_KERNELS", "auto").strip().lower()

if _choice in ("auto", ""):
    _impl = pyref
elif _choice in ("python", "py"):
    _impl = pyref
elif _choice in ("compiled", "c", "cython"):
    from . import _convkern as _impl
else:
    raise ValueError(f"unknown SIMPROP_KERNELS value: {_choice!r}")

BACKEND = _impl.BACKEND_NAME
conv2d_forward = _impl.conv2d_forward
conv2d_backward_input = _impl.conv2d_backward_input
conv2d_backward_weight = _impl.conv2d_backward_weight


def get_backend() -> str:
    """Name of the active kernel backend ("compiled" or "python")."""
    return BACKEND
