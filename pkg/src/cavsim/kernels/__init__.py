"""Hot-kernel backend selection.

``CAVSIM_BACKEND=numpy`` forces the pure-numpy fallback; anything else uses
the numba kernels when numba imports cleanly. ``benchmarks/`` compares the
two paths.
"""
from __future__ import annotations

import os

from .scalar import NUMBA_AVAILABLE

_requested = os.environ.get("CAVSIM_BACKEND", "numba").strip().lower()

if _requested not in ("numba", "numpy"):
    raise ValueError(
        f"CAVSIM_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

if _requested == "numba" and NUMBA_AVAILABLE:
    from .numba_backend import (BACKEND_NAME, cacc_control, eidm_batch,
                                follower_required_decel, hv_classify_only,
                                hv_control)
else:
    from .numpy_backend import (BACKEND_NAME, cacc_control, eidm_batch,
                                follower_required_decel, hv_classify_only,
                                hv_control)

__all__ = [
    "BACKEND_NAME",
    "NUMBA_AVAILABLE",
    "hv_control",
    "hv_classify_only",
    "cacc_control",
    "eidm_batch",
    "follower_required_decel",
]
