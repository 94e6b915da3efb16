"""Variance-regularized episodic loss.

For one episode the objective is the mean query negative log-likelihood
under the Gaussian-prototype class probabilities, plus::

    (lam / ways) * sum_c ||Sigma_c||_F

which penalizes the average Frobenius norm of the class covariances.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoder import EncoderParams, dropout_mask, encode_on_tape, param_leaves
from .episodes import Episode
from .errors import NumericError, UsageError
from .numcore import Tape, Tensor, cross_entropy, dirac_sq, l2norm, mean, mul, reshape, softmax, square, sub, tsum


@dataclass
class LossResult:
    value: float
    nll: float
    reg: float
    tape: Tape
    output: Tensor
    leaves: dict[str, Tensor]
    means: np.ndarray
    variances: np.ndarray
    probs: np.ndarray
    _grads: dict[str, np.ndarray] | None = field(default=None, repr=False)

    def gradients(self) -> dict[str, np.ndarray]:
        """d(loss)/d(param) for every encoder parameter (computed once)."""
        if self._grads is None:
            self.tape.backward(self.output)
            self._grads = {k: self.tape.grad(t) for k, t in self.leaves.items()}
        return self._grads


def regularizer(variances: np.ndarray, lam: float) -> float:
    """(lam / ways) * sum of per-class ||diag(var)||_F for a (ways, d) array."""
    v = np.asarray(variances, dtype=np.float64)
    return float(lam / v.shape[0] * np.sqrt((v * v).sum(axis=1)).sum())


def class_moments(emb, ways: int, supports: int, kind: str = "diagonal"):
    """Per-class mean and unbiased variance of support embeddings, on or off tape.

    ``emb`` holds class-major support rows, ``supports`` per class.
    """
    blocks = reshape(emb, (ways, supports, -1))
    mu = mean(blocks, axis=1)
    if supports >= 2:
        centered = sub(blocks, reshape(mu, (ways, 1, -1)))
        var = mul(tsum(square(centered), axis=1), 1.0 / (supports - 1))
    else:
        var = np.zeros((ways, (emb.value if isinstance(emb, Tensor) else np.asarray(emb)).shape[1]))
    if kind == "isotropic":
        var = mul(mean(var, axis=1, keepdims=True), np.ones(var.shape if not isinstance(var, Tensor) else var.value.shape))
    elif kind != "diagonal":
        raise UsageError(f"unknown covariance kind {kind!r}")
    return mu, var


def episode_loss(
    params: EncoderParams,
    ep: Episode,
    lam: float,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    kind: str = "diagonal",
) -> LossResult:
    """Build the loss for one episode on a fresh tape.

    In ``mode="train"`` dropout is applied to the encoder output with masks
    drawn from ``rng``; in ``mode="eval"`` the encoder is deterministic.
    """
    if lam < 0:
        raise UsageError(f"lambda must be non-negative, got {lam}")
    if mode not in ("train", "eval"):
        raise UsageError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train" and params.dropout_rate > 0.0
    if train and rng is None:
        raise UsageError("train mode needs an rng for dropout")
    tape = Tape()
    leaves = param_leaves(tape, params)
    e = params.embed_dim
    s_mask = dropout_mask((ep.support_x.shape[0], e), params.dropout_rate, rng) if train else None
    q_mask = dropout_mask((ep.query_x.shape[0], e), params.dropout_rate, rng) if train else None
    support = encode_on_tape(leaves, ep.support_x, s_mask)
    query = encode_on_tape(leaves, ep.query_x, q_mask)

    mu, var = class_moments(support, ep.ways, ep.supports, kind)
    d2 = dirac_sq(query, mu, var)
    probs = softmax(mul(d2, -1.0), axis=1)
    nll = cross_entropy(probs, ep.query_y)
    reg = mul(tsum(l2norm(var, axis=1)), lam / ep.ways)
    total = nll + reg

    value = float(total.value)
    if not np.isfinite(value):
        raise NumericError(f"non-finite episode loss ({value}) for episode {ep.origin or '<unnamed>'}")
    var_v = var.value if isinstance(var, Tensor) else var
    return LossResult(
        value=value,
        nll=float(nll.value),
        reg=float(reg.value if isinstance(reg, Tensor) else reg),
        tape=tape,
        output=total,
        leaves=leaves,
        means=mu.value.copy(),
        variances=np.array(var_v, copy=True),
        probs=probs.value.copy(),
    )
