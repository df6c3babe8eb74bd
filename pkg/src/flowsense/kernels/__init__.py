"""Kernel backend selection.

The compiled extension is preferred; set FLOWSENSE_NO_EXT=1 to force the
numpy fallback. Both backends expose the same two functions and agree to
floating-point accumulation order.
"""

import os

from . import fallback as _fallback

if os.environ.get("FLOWSENSE_NO_EXT", "0") not in ("0", ""):
    _impl = _fallback
    BACKEND = "fallback"
else:
    try:
        from . import _core as _impl

        BACKEND = "compiled"
    except ImportError:
        _impl = _fallback
        BACKEND = "fallback"

segment_sum = _impl.segment_sum
log_count_table = _impl.log_count_table

__all__ = ["segment_sum", "log_count_table", "BACKEND"]
