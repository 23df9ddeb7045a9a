"""Kernel backend selection.

The compiled extension is used when it imports cleanly; set
``IFBENCH_PURE_PYTHON=1`` to force the numpy fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if not os.environ.get("IFBENCH_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py

ssim_mean = _impl.ssim_mean
glcm = _impl.glcm

__all__ = ["BACKEND", "ssim_mean", "glcm"]
