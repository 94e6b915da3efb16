"""Dense float64 arithmetic and a minimal reverse-mode gradient engine.

Vectors and matrices are plain numpy arrays (1-D and 2-D, float64). The
differentiable ops in :mod:`.autodiff` accept either arrays or tape
:class:`Tensor` objects and record themselves only in the latter case.
"""

from __future__ import annotations

import numpy as np

from ..errors import NumericError, UsageError
from .autodiff import (
    LOG_CLAMP,
    Tape,
    Tensor,
    add,
    cross_entropy,
    dirac_sq,
    l2norm,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    softmax,
    square,
    sub,
)
from .autodiff import sum as tsum
from .gradcheck import finite_diff_check, numeric_gradient, relative_error

__all__ = [
    "LOG_CLAMP",
    "Tape",
    "Tensor",
    "add",
    "as_matrix",
    "as_vector",
    "backward",
    "check_finite",
    "cross_entropy",
    "dirac_sq",
    "finite_diff_check",
    "l2norm",
    "matmul",
    "matvec",
    "mean",
    "mul",
    "numeric_gradient",
    "relative_error",
    "relu",
    "reshape",
    "softmax",
    "square",
    "sub",
    "tsum",
]


def as_vector(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise UsageError(f"expected a non-empty 1-D vector, got shape {v.shape}")
    return check_finite(v)


def as_matrix(x) -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2 or 0 in m.shape:
        raise UsageError(f"expected a non-empty 2-D matrix, got shape {m.shape}")
    return check_finite(m)


def check_finite(a, what: str = "value"):
    if not np.all(np.isfinite(a.value if isinstance(a, Tensor) else a)):
        raise NumericError(f"{what} contains NaN or Inf")
    return a


def matvec(m, v):
    """Matrix-vector product; records on the tape when either side is a Tensor."""
    mv = m.value if isinstance(m, Tensor) else np.asarray(m, dtype=np.float64)
    vv = v.value if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)
    if mv.ndim != 2 or vv.ndim != 1 or mv.shape[1] != vv.shape[0]:
        raise UsageError(f"matvec dimension mismatch: {mv.shape} x {vv.shape}")
    return matmul(m, v)


def backward(tape: Tape, output: Tensor) -> list:
    return tape.backward(output)
