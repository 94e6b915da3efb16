"""Gaussian class prototypes and Wasserstein-Bures scoring.

A class is summarized by the mean and diagonal covariance of its embedded
support rows. A query is scored against a class as a point mass, for which
the squared 2-Wasserstein distance reduces to::

    d^2(q, c) = ||m_c - q||^2 + tr(Sigma_c)

and class probabilities are the softmax of ``-d^2`` over classes. With all
covariances zero this is exactly the classic nearest-mean prototype rule.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .errors import UsageError
from .numcore import softmax

KINDS = ("diagonal", "isotropic")


@dataclass(frozen=True, eq=False)
class ClassGaussian:
    """Mean plus diagonal covariance.

    ``scale`` holds the per-dimension variances for ``kind="diagonal"`` and a
    single 0-d variance for ``kind="isotropic"``; :attr:`var` always returns
    the full diagonal.
    """

    mean: np.ndarray
    scale: np.ndarray
    kind: str = "diagonal"
    support_count: int = 0

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64)
        scale = np.array(self.scale, dtype=np.float64)
        if mean.ndim != 1 or mean.size == 0:
            raise UsageError("mean must be a non-empty vector")
        if self.kind not in KINDS:
            raise UsageError(f"kind must be one of {KINDS}")
        if self.kind == "isotropic" and scale.ndim != 0:
            raise UsageError("isotropic scale must be a scalar")
        if self.kind == "diagonal" and scale.shape != mean.shape:
            raise UsageError(f"variance shape {scale.shape} != mean shape {mean.shape}")
        if np.any(scale < 0) or not np.all(np.isfinite(scale)) or not np.all(np.isfinite(mean)):
            raise UsageError("variances must be finite and non-negative, mean finite")
        mean.setflags(write=False)
        scale.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "scale", scale)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def var(self) -> np.ndarray:
        if self.kind == "isotropic":
            return np.full(self.dim, float(self.scale))
        return self.scale

    @property
    def trace(self) -> float:
        return float(self.var.sum())

    @property
    def frobenius(self) -> float:
        """||Sigma||_F of the diagonal covariance."""
        v = self.var
        return float(np.sqrt((v * v).sum()))

    @classmethod
    def dirac(cls, q) -> "ClassGaussian":
        q = np.asarray(q, dtype=np.float64)
        return cls(q, np.zeros_like(q), "diagonal", 1)

    def isotropic(self) -> "ClassGaussian":
        return ClassGaussian(self.mean, np.float64(self.var.mean()), "isotropic", self.support_count)

    def same_as(self, other: "ClassGaussian") -> bool:
        """Bitwise equality of every stored number."""
        return (
            self.kind == other.kind
            and self.support_count == other.support_count
            and self.mean.shape == other.mean.shape
            and self.mean.tobytes() == other.mean.tobytes()
            and self.scale.tobytes() == other.scale.tobytes()
        )


def class_stats(support, kind: str = "diagonal") -> ClassGaussian:
    """Mean and unbiased per-dimension variance of the support rows.

    A single support row gives zero variance. The isotropic kind keeps only
    the average of the diagonal.
    """
    x = np.asarray(support, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :] if x.size else x.reshape(0, 0)
    if x.ndim != 2 or x.shape[0] == 0 or x.shape[1] == 0:
        raise UsageError("support must hold at least one non-empty vector")
    m = x.shape[0]
    mean = x.mean(axis=0)
    var = x.var(axis=0, ddof=1) if m >= 2 else np.zeros(x.shape[1])
    g = ClassGaussian(mean, var, "diagonal", m)
    if kind == "isotropic":
        return g.isotropic()
    if kind != "diagonal":
        raise UsageError(f"kind must be one of {KINDS}")
    return g


def stack(classes: Sequence[ClassGaussian]) -> tuple[np.ndarray, np.ndarray]:
    """(means, variances) as (c, d) arrays."""
    if len(classes) == 0:
        raise UsageError("at least one class is required")
    dims = {g.dim for g in classes}
    if len(dims) != 1:
        raise UsageError(f"classes have mismatched dims {sorted(dims)}")
    return np.stack([g.mean for g in classes]), np.stack([g.var for g in classes])


def _check_dim(g: ClassGaussian, q: np.ndarray) -> None:
    if q.shape != (g.dim,):
        raise UsageError(f"query shape {q.shape} does not match class dim {g.dim}")


def wasserstein_dirac_sq(g: ClassGaussian, q) -> float:
    """Squared Wasserstein distance between N(mean, var) and a point mass at q."""
    q = np.asarray(q, dtype=np.float64)
    _check_dim(g, q)
    return float(kernels.dirac_sq(q[None, :], g.mean[None, :], g.var[None, :])[0, 0])


def bures_sq(g1: ClassGaussian, g2: ClassGaussian) -> float:
    """Squared Wasserstein-Bures distance between two diagonal Gaussians."""
    if g1.dim != g2.dim:
        raise UsageError(f"dim mismatch {g1.dim} vs {g2.dim}")
    return float(kernels.bures_sq_rows(g1.mean[None], g1.var[None], g2.mean[None], g2.var[None])[0])


def distance_matrix(queries, classes: Sequence[ClassGaussian]) -> np.ndarray:
    """(n_queries, n_classes) matrix of squared query-to-class distances."""
    means, var = stack(classes)
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim == 1:
        q = q[None, :]
    if q.ndim != 2 or (q.size and q.shape[1] != means.shape[1]):
        raise UsageError(f"queries shape {q.shape} does not match class dim {means.shape[1]}")
    return kernels.dirac_sq(q.reshape(-1, means.shape[1]), means, var)


def class_logits(queries, classes: Sequence[ClassGaussian]) -> np.ndarray:
    return -distance_matrix(queries, classes)


def class_probabilities(queries, classes: Sequence[ClassGaussian]) -> np.ndarray:
    """Row-wise softmax of negative squared distances."""
    logits = class_logits(queries, classes)
    if logits.shape[0] == 0:
        return logits
    return softmax(logits, axis=1)


def predict(queries, classes: Sequence[ClassGaussian]) -> np.ndarray:
    """Most probable class index per query; ties go to the lowest index."""
    return np.argmax(class_logits(queries, classes), axis=1)
