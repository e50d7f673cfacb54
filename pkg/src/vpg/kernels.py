"""Backend selection for the hot kernels.

The compiled extension is preferred; set ``VPG_PURE_PYTHON=1`` to force the
fallback (useful for debugging and for the backend comparison benchmark).
"""

from __future__ import annotations

import os

from . import _kernels_py

BACKEND = "python"

if os.environ.get("VPG_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
else:
    _compiled = None

_impl = _compiled if _compiled is not None else _kernels_py
if _compiled is not None:
    BACKEND = "cython"

hnsw_build = _impl.hnsw_build
hnsw_search = _impl.hnsw_search
hamming_many = _impl.hamming_many


def backends() -> dict:
    """Every importable backend, keyed by name."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels

        out["cython"] = _kernels
    except ImportError:
        pass
    return out
