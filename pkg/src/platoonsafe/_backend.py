"""Kernel backend selection: compiled extension if built, numpy fallback.

Set PLATOONSAFE_PURE=1 to force the pure backend (used by the parity tests
and the backend benchmark).
"""

from __future__ import annotations

import os

from . import _kernels_pure

if os.environ.get("PLATOONSAFE_PURE", "") == "1":
    kernels = _kernels_pure
    BACKEND = "pure"
else:
    try:
        from . import _speedups as kernels  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        kernels = _kernels_pure
        BACKEND = "pure"


def backend_name() -> str:
    return BACKEND
