"""Pure-numpy reference kernels. Always importable."""

from __future__ import annotations

import numpy as np

NAME = "python"


def dirac_sq(queries: np.ndarray, means: np.ndarray, variances: np.ndarray) -> np.ndarray:
    diff = queries[:, None, :] - means[None, :, :]
    return (diff * diff).sum(axis=-1) + variances.sum(axis=-1)[None, :]


def bures_sq_rows(m1: np.ndarray, v1: np.ndarray, m2: np.ndarray, v2: np.ndarray) -> np.ndarray:
    diff = m1 - m2
    # (sqrt a - sqrt b)^2 written as ((a - b) / (sqrt a + sqrt b))^2: no
    # cancellation, exactly zero iff a == b, exactly a when b == 0
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = (v1 - v2) / (np.sqrt(v1) + np.sqrt(v2))
    cov = np.where((v1 == 0.0) | (v2 == 0.0), v1 + v2, ratio * ratio)
    return (diff * diff).sum(axis=-1) + cov.sum(axis=-1)


def topk_indices(values: np.ndarray, k: int) -> np.ndarray:
    """Row-wise indices of the k largest entries, ties to the lowest index."""
    return np.argsort(-values, axis=-1, kind="stable")[..., :k]


def topk_union(queries: np.ndarray, means: np.ndarray, k: int) -> np.ndarray:
    """(n, d) mask of the union over classes j of the top-k indices of |q - mean_j|."""
    n, d = queries.shape
    union = np.zeros((n, d), dtype=np.uint8)
    if n == 0:
        return union
    gaps = np.abs(queries[:, None, :] - means[None, :, :])
    idx = topk_indices(gaps, k)
    union[np.arange(n)[:, None, None], idx] = 1
    return union
