"""Kernel backend selection.

The compiled Cython extension is preferred when importable; otherwise the
NumPy fallback is used. Set SQUAREOPS_PURE=1 to force the fallback (the
kernel benchmark and the backend-equivalence tests rely on this).
"""

import os

from . import fallback as _fallback

if os.environ.get("SQUAREOPS_PURE") == "1":
    im2col, col2im = _fallback.im2col, _fallback.col2im
    BACKEND = "fallback"
else:
    try:
        from ._core import col2im, im2col
        BACKEND = "compiled"
    except ImportError:
        im2col, col2im = _fallback.im2col, _fallback.col2im
        BACKEND = "fallback"

__all__ = ["im2col", "col2im", "BACKEND"]
