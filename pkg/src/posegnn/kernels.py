"""Kernel backend selection.

The compiled extension is used when it imports cleanly; otherwise the numpy
fallback is used. Set ``POSEGNN_PURE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("POSEGNN_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        pass

normalized_aggregate = _impl.normalized_aggregate
neighbor_sum = _impl.neighbor_sum
knn_query = _impl.knn_query


def get_backend(name: str):
    """Return the kernel module for ``"python"`` or ``"cython"``."""
    if name == "python":
        return _kernels_py
    if name == "cython":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown backend {name!r}")
