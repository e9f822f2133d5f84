"""Hot rendering kernels with backend selection at import time.

The compiled Cython extension is preferred; the pure-numpy fallback is used
when it is unavailable. Override with SLENDERFIT_BACKEND=numpy|compiled
(``compiled`` raises if the extension is missing). Both backends implement
the same contracts and agree to float rounding; ``benchmarks/bench_kernels.py``
compares their throughput.
"""

from __future__ import annotations

import os

from . import _fallback

BLOB_RADIUS = _fallback.BLOB_RADIUS

_requested = os.environ.get("SLENDERFIT_BACKEND", "auto")
if _requested not in ("auto", "compiled", "numpy"):
    raise RuntimeError(
        f"SLENDERFIT_BACKEND must be auto, compiled, or numpy (got {_requested!r})"
    )

if _requested == "numpy":
    _impl = _fallback
    BACKEND = "numpy"
else:
    try:
        from . import _core as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        if _requested == "compiled":
            raise
        _impl = _fallback
        BACKEND = "numpy"

splat_fwd = _impl.splat_fwd
splat_bwd = _impl.splat_bwd
conv3x3_fwd = _impl.conv3x3_fwd
conv3x3_bwd = _impl.conv3x3_bwd


def get_backend() -> str:
    """Name of the active kernel backend ('compiled' or 'numpy')."""
    return BACKEND
