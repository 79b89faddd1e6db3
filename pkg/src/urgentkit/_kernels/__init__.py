"""Hot kernels with a compiled backend and a numpy fallback.

The compiled module is used when it was built; set ``URGENTKIT_PURE=1`` to
force the fallback. ``BACKEND`` names the active implementation.
"""
import os

from . import _fallback

if os.environ.get("URGENTKIT_PURE", "") not in ("", "0"):
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from . import _ext as _impl  # type: ignore[no-redef]
        BACKEND = "cython"
    except ImportError:
        _impl = _fallback
        BACKEND = "python"

rvq_assign = _impl.rvq_assign
polyphase_resample = _impl.polyphase_resample
overlap_add = _impl.overlap_add

__all__ = ["BACKEND", "rvq_assign", "polyphase_resample", "overlap_add"]
