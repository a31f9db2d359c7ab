"""Kernel backend selection.

The depthwise-convolution and bilinear-resize kernels come from the
compiled extension (pixelsail.kernels._core) when it imported cleanly, and
from the NumPy reference module otherwise. The non-overlapping transposed
convolution is a single BLAS matrix product in disguise, so the reference
implementation is the fast path for it under either backend.

Set PIXELSAIL_KERNELS=python or =compiled to force a backend (forcing the
compiled one raises if the extension is missing).
"""

import os

from . import reference

_requested = os.environ.get("PIXELSAIL_KERNELS", "").strip().lower()

_impl = None
if _requested not in ("", "python", "compiled"):
    raise RuntimeError(f"PIXELSAIL_KERNELS must be 'python' or 'compiled', got {_requested!r}")
if _requested != "python":
    try:
        from . import _core as _impl
    except ImportError:
        if _requested == "compiled":
            raise RuntimeError("PIXELSAIL_KERNELS=compiled but the extension is not built")
        _impl = None
if _impl is None:
    _impl = reference

BACKEND = "compiled" if _impl is not reference else "python"

conv_transpose2d_fwd = reference.conv_transpose2d_fwd
conv_transpose2d_bwd = reference.conv_transpose2d_bwd
depthwise_conv2d_fwd = _impl.depthwise_conv2d_fwd
depthwise_conv2d_bwd = _impl.depthwise_conv2d_bwd
bilinear_resize_fwd = _impl.bilinear_resize_fwd
bilinear_resize_bwd = _impl.bilinear_resize_bwd
