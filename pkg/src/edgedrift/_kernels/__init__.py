"""Kernel dispatch: compiled extension when importable, numpy fallback otherwise.

Set EDGEDRIFT_FORCE_FALLBACK=1 to force the fallback (used by the
equivalence tests and the benchmark).
"""

import os

from . import fallback

if os.environ.get("EDGEDRIFT_FORCE_FALLBACK", "0") == "1":
    _impl = fallback
    BACKEND = "fallback"
else:
    try:
        from . import _native as _impl

        BACKEND = "native"
    except ImportError:
        _impl = fallback
        BACKEND = "fallback"

bilinear_forward = _impl.bilinear_forward
bilinear_vjp = _impl.bilinear_vjp
footprint_accumulate = _impl.footprint_accumulate
greedy_match = _impl.greedy_match
augment_match = _impl.augment_match

__all__ = [
    "BACKEND",
    "augment_match",
    "bilinear_forward",
    "bilinear_vjp",
    "fallback",
    "footprint_accumulate",
    "greedy_match",
]
