"""NMS kernels: the compiled extension when built, else the numpy fallback.

Set ``DAEDALUS_PURE=1`` to force the fallback.
"""
import os

from . import _pure

BACKEND = "pure"
if os.environ.get("DAEDALUS_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _nms as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pure
else:
    _impl = _pure

iou_matrix = _impl.iou_matrix
nms_sorted = _impl.nms_sorted
soft_nms = _impl.soft_nms

__all__ = ["BACKEND", "iou_matrix", "nms_sorted", "soft_nms"]
