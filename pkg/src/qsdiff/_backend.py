"""Kernel backend selection: compiled extension if importable, numpy otherwise.

Set ``QSDIFF_BACKEND=python`` to force the fallback.
"""
from __future__ import annotations

import os

from . import _kernels_py

if os.environ.get("QSDIFF_BACKEND", "").lower() == "python":
    kernels = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as kernels  # type: ignore[no-redef]
        BACKEND = "cython"
    except ImportError:
        kernels = _kernels_py
        BACKEND = "python"


def get_kernels(name: str | None = None):
    """Kernels module for ``name`` ("cython" or "python"), or the active one."""
    if name is None:
        return kernels
    if name == "python":
        return _kernels_py
    if name == "cython":
        from . import _kernels
        return _kernels
    raise ValueError(f"unknown backend {name!r}")
