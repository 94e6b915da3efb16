"""Out-of-distribution scoring with Average Variance Indices (AVI_k).

A task's *dataset indices* are the union over its classes of the k
dimensions with the largest variance. A query is scored by taking, for each
class, the k dimensions where it is farthest from that class mean, unioning
those over classes, and measuring how much of the dataset indices the union
covers::

    AVI_k = |union_j topk(|q - mean_j|)  &  dataset_indices| / |dataset_indices|

Low scores mean the query differs from the classes along directions the
classes do not vary in, which is the OOD signal. ``reading="union"`` gives
the literal ``|union| / |dataset_indices|`` ratio instead (can exceed 1).
All top-k selections break ties toward the lowest dimension index.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .errors import UsageError
from .proto import ClassGaussian, stack

READINGS = ("intersection", "union")


@dataclass(frozen=True)
class OodConfig:
    k: int = 10
    threshold: float = 0.5
    reading: str = "intersection"

    def __post_init__(self):
        if self.k < 1:
            raise UsageError(f"k must be positive, got {self.k}")
        if not 0.0 <= self.threshold <= 1.0:
            raise UsageError(f"threshold must be in [0, 1], got {self.threshold}")
        if self.reading not in READINGS:
            raise UsageError(f"reading must be one of {READINGS}")


@dataclass(frozen=True)
class OodScore:
    value: float
    flagged: bool
    contributing_indices: frozenset[int]

    def to_record(self, query_id, cfg: OodConfig) -> dict:
        return {"query_id": query_id, "avi": self.value, "flagged": self.flagged, "k": cfg.k, "threshold": cfg.threshold}


def dataset_indices(classes: Sequence[ClassGaussian], k: int) -> tuple[int, ...]:
    """Sorted union over classes of each class's top-k variance dimensions."""
    _, var = stack(classes)
    if not 1 <= k <= var.shape[1]:
        raise UsageError(f"k={k} must be between 1 and the embedding dim {var.shape[1]}")
    return tuple(int(i) for i in np.unique(kernels.topk_indices(var, k)))


def _ds_mask(ds_idx: Sequence[int], dim: int) -> np.ndarray:
    idx = np.asarray(sorted(ds_idx), dtype=np.int64)
    if idx.size == 0:
        raise UsageError("dataset indices must be non-empty")
    if idx[0] < 0 or idx[-1] >= dim:
        raise UsageError(f"dataset indices out of range for dim {dim}")
    mask = np.zeros(dim, dtype=bool)
    mask[idx] = True
    return mask


def avi_batch(queries, classes: Sequence[ClassGaussian], ds_idx: Sequence[int], k: int, reading: str = "intersection") -> tuple[np.ndarray, np.ndarray]:
    """AVI_k for every query row; returns (scores, union masks)."""
    means, _ = stack(classes)
    q = np.asarray(queries, dtype=np.float64).reshape(-1, means.shape[1]) if np.size(queries) else np.zeros((0, means.shape[1]))
    dim = means.shape[1]
    if not 1 <= k <= dim:
        raise UsageError(f"k={k} must be between 1 and the embedding dim {dim}")
    mask = _ds_mask(ds_idx, dim)
    union = kernels.topk_union(q, means, k).astype(bool)
    denom = mask.sum()
    if reading == "union":
        return union.sum(axis=1) / denom, union
    if reading != "intersection":
        raise UsageError(f"reading must be one of {READINGS}")
    return (union & mask).sum(axis=1) / denom, union & mask


def avi_score(
    query,
    classes: Sequence[ClassGaussian],
    ds_idx: Sequence[int],
    k: int,
    threshold: float = 0.5,
    reading: str = "intersection",
) -> OodScore:
    q = np.asarray(query, dtype=np.float64)
    if q.ndim != 1:
        raise UsageError("avi_score takes a single query vector")
    if len(classes) and q.shape[0] != classes[0].dim:
        raise UsageError(f"query dim {q.shape[0]} does not match class dim {classes[0].dim}")
    scores, sets = avi_batch(q[None, :], classes, ds_idx, k, reading)
    value = float(scores[0])
    return OodScore(value, value < threshold, frozenset(int(i) for i in np.flatnonzero(sets[0])))


def batch_monitor(queries, entry, cfg: OodConfig = OodConfig()) -> tuple[list[OodScore], dict]:
    """Score embedded queries against a fitted task entry."""
    q = np.asarray(queries, dtype=np.float64)
    if q.size == 0:
        return [], {"flagged": 0, "total": 0, "flagged_fraction": 0.0}
    if q.ndim != 2 or q.shape[1] != entry.dim:
        raise UsageError(f"queries shape {q.shape} does not match task dim {entry.dim}")
    ds_idx = entry.dataset_indices if cfg.k == entry.top_k else dataset_indices(entry.classes, cfg.k)
    values, sets = avi_batch(q, entry.classes, ds_idx, cfg.k, cfg.reading)
    scores = [
        OodScore(float(v), bool(v < cfg.threshold), frozenset(int(i) for i in np.flatnonzero(s)))
        for v, s in zip(values, sets)
    ]
    flagged = sum(s.flagged for s in scores)
    return scores, {"flagged": flagged, "total": len(scores), "flagged_fraction": flagged / len(scores)}
