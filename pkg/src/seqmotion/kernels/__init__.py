"""Sampling kernels with a compiled core and a pure-numpy fallback.

The compiled extension (``seqmotion.kernels._core``) is preferred when it
imports; set ``SEQMOTION_KERNELS=fallback`` or ``=compiled`` to force one
side (the benchmark and the equivalence tests do this).
"""

import os

from . import fallback as _fallback

_choice = os.environ.get("SEQMOTION_KERNELS", "auto").lower()

if _choice == "fallback":
    _impl = _fallback
elif _choice == "compiled":
    from . import _core as _impl
else:
    try:
        from . import _core as _impl
    except ImportError:
        _impl = _fallback

COMPILED = _impl.COMPILED
gather_bilinear = _impl.gather_bilinear
gather_bilinear_bwd = _impl.gather_bilinear_bwd
gather_nearest = _impl.gather_nearest


def implementation_name():
    return "compiled" if COMPILED else "fallback"
