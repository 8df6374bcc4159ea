"""Hot pixel kernels with a compiled core and a pure-numpy fallback.

The compiled extension is preferred when importable; set
``RESDISTILL_PURE_PYTHON=1`` to force the fallback (used by the parity tests
and the kernel benchmark).
"""

import os

from . import fallback

if os.environ.get("RESDISTILL_PURE_PYTHON", "") == "1":
    _impl = fallback
    COMPILED = False
else:
    try:
        from . import _core as _impl  # type: ignore[no-redef]

        COMPILED = True
    except ImportError:
        _impl = fallback
        COMPILED = False

resize_bilinear = _impl.resize_bilinear
luminance_hist = _impl.luminance_hist
add_line_segments = _impl.add_line_segments

__all__ = ["COMPILED", "resize_bilinear", "luminance_hist", "add_line_segments", "fallback"]
