"""Backend selection for the nearest-point kernels.

The compiled extension is used when importable; setting ``MORPHFIT_PURE_PYTHON=1``
forces the numpy fallback.
"""
from __future__ import annotations

import os

from . import _kernels_py

if os.environ.get("MORPHFIT_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]
    except ImportError:  # extension not built
        _impl = _kernels_py

BACKEND: str = _impl.BACKEND
query = _impl.query
closest_point_triangle = _impl.closest_point_triangle


def available_backends() -> dict:
    out = {"python": _kernels_py}
    try:
        from . import _kernels
        out["cython"] = _kernels
    except ImportError:
        pass
    return out
