"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from ..errors import NumericError, UsageError

LossFn = Callable[[Mapping[str, np.ndarray]], tuple[float, Mapping[str, np.ndarray]]]


def relative_error(g_ad, g_fd) -> np.ndarray:
    g_ad, g_fd = np.asarray(g_ad, dtype=float), np.asarray(g_fd, dtype=float)
    return np.abs(g_ad - g_fd) / np.maximum(1e-8, np.abs(g_ad) + np.abs(g_fd))


def numeric_gradient(loss_fn: LossFn, params: Mapping[str, np.ndarray], step: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences of ``loss_fn(params)[0]`` for every parameter entry."""
    if not step > 0:
        raise UsageError(f"step must be positive, got {step}")
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def f() -> float:
        val = float(loss_fn(work)[0])
        if not np.isfinite(val):
            raise NumericError(f"loss is not finite ({val}) during finite differencing")
        return val

    out = {}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = f()
            flat[i] = orig - step
            down = f()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * step)
        out[name] = g
    return out


def finite_diff_check(loss_fn: LossFn, params: Mapping[str, np.ndarray], step: float = 1e-5) -> float:
    """Max relative error between autodiff and central-difference gradients.

    ``loss_fn(params)`` must return ``(loss, grads)`` with ``grads`` keyed like
    ``params``. An empty parameter set gives 0.
    """
    if not step > 0:
        raise UsageError(f"step must be positive, got {step}")
    if not params:
        return 0.0
    loss, grads = loss_fn({k: np.array(v, dtype=np.float64) for k, v in params.items()})
    if not np.isfinite(loss):
        raise NumericError(f"loss is not finite ({loss})")
    fd = numeric_gradient(loss_fn, params, step)
    worst = 0.0
    for name, g in fd.items():
        if g.size:
            worst = max(worst, float(relative_error(grads[name], g).max()))
    return worst
