"""Hot numeric kernels with a compiled core and a numpy fallback.

The compiled extension is used when it was built; otherwise, or when the
environment variable ``VARPROTO_KERNELS=python`` is set, the numpy
implementation is used. Both expose the same functions with the same
argument contracts (C-contiguous float64 inputs, results as new arrays).
"""

from __future__ import annotations

import os
from types import ModuleType

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def available() -> dict[str, ModuleType]:
    out = {"python": _pykernels}
    if _ckernels is not None:
        out["cython"] = _ckernels
    return out


def _select_backend() -> ModuleType:
    wanted = os.environ.get("VARPROTO_KERNELS", "").strip().lower()
    if wanted == "python" or _ckernels is None:
        return _pykernels
    return _ckernels


_backend = _select_backend()
BACKEND: str = _backend.NAME


def _f64(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


def dirac_sq(queries, means, variances) -> np.ndarray:
    """Squared distance ||q - m_c||^2 + sum(variances_c) for every (query, class) pair."""
    return _backend.dirac_sq(_f64(queries), _f64(means), _f64(variances))


def bures_sq_rows(m1, v1, m2, v2) -> np.ndarray:
    """Diagonal Wasserstein-Bures squared distance, row by row."""
    return _backend.bures_sq_rows(_f64(m1), _f64(v1), _f64(m2), _f64(v2))


def topk_indices(values, k: int) -> np.ndarray:
    return np.asarray(_backend.topk_indices(_f64(values), int(k)))


def topk_union(queries, means, k: int) -> np.ndarray:
    """(n, d) uint8 mask: union over classes of the top-k |query - mean| indices."""
    return np.asarray(_backend.topk_union(_f64(queries), _f64(means), int(k)))
