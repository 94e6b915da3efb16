"""Episodic meta-training, meta-validation evaluation and regularization reports."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .encoder import EncoderParams, encode
from .episodes import Dataset, Episode, SamplerConfig, check_disjoint, sample_episode
from .errors import ConfigurationError, NumericError, UsageError
from .loss import class_moments, episode_loss
from .proto import KINDS
from .streams import substream
from . import kernels

log = logging.getLogger(__name__)

SCHEDULES = ("linear-decay", "constant")


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.1
    epochs: int = 30
    episodes_per_epoch: int = 100
    learning_rate: float = 3e-5
    weight_decay: float = 1e-4
    grad_clip_norm: float = 3.0
    lr_schedule: str = "linear-decay"
    early_stop_patience: int = 5
    seed: int = 0
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    eval_tasks: int = 1000
    eval_seeds: tuple[int, ...] = tuple(range(10))
    val_tasks: int = 200
    hidden_dim: int = 64
    embed_dim: int = 64
    dropout: float = 0.1
    kind: str = "diagonal"
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigurationError(f"lambda must be >= 0, got {self.lam}")
        if self.learning_rate < 0:
            raise ConfigurationError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.epochs < 1 or self.episodes_per_epoch < 1:
            raise ConfigurationError("epochs and episodes_per_epoch must be positive")
        if self.grad_clip_norm <= 0:
            raise ConfigurationError("grad_clip_norm must be positive")
        if self.lr_schedule not in SCHEDULES:
            raise ConfigurationError(f"lr_schedule must be one of {SCHEDULES}")
        if self.kind not in KINDS:
            raise ConfigurationError(f"kind must be one of {KINDS}")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.episodes_per_epoch

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eval_seeds"] = list(self.eval_seeds)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        if "sampler" in d and not isinstance(d["sampler"], SamplerConfig):
            d["sampler"] = SamplerConfig(**d["sampler"])
        for key in ("eval_seeds", "betas"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class EvalConfig:
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    tasks: int = 1000
    seeds: tuple[int, ...] = tuple(range(10))
    kind: str = "diagonal"
    workers: int = 1

    @classmethod
    def from_train(cls, cfg: TrainConfig, **overrides) -> "EvalConfig":
        base = dict(sampler=cfg.sampler, tasks=cfg.eval_tasks, seeds=cfg.eval_seeds, kind=cfg.kind)
        base.update(overrides)
        return cls(**base)


@dataclass
class EvalReport:
    mean_accuracy: float
    std_accuracy: float
    per_seed: dict[int, float]
    tasks_evaluated: int

    def to_dict(self) -> dict:
        return {
            "mean_accuracy": self.mean_accuracy,
            "std_accuracy": self.std_accuracy,
            "per_seed": {str(k): v for k, v in self.per_seed.items()},
            "tasks_evaluated": self.tasks_evaluated,
        }

    def __str__(self) -> str:
        return f"{self.mean_accuracy:.4f} ± {self.std_accuracy:.4f} ({self.tasks_evaluated} tasks, {len(self.per_seed)} seeds)"


# ---------------------------------------------------------------------------
# optimizer pieces


class AdamW:
    """Adam with decoupled weight decay, applied as ``p *= 1 - lr * wd`` before the step."""

    def __init__(self, params: Mapping[str, np.ndarray], weight_decay: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        out = {}
        for k, p in params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            p = p * (1.0 - lr * self.weight_decay)
            step = (lr / c1) * self.m[k] / (np.sqrt(self.v[k] / c2) + self.eps)
            out[k] = p - step
        return out


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Rescale so the global L2 norm is at most ``max_norm``; returns (grads, norm before)."""
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        return {k: g * scale for k, g in grads.items()}, norm
    return dict(grads), norm


def lr_at(step: int, cfg: TrainConfig) -> float:
    if cfg.lr_schedule == "constant":
        return cfg.learning_rate
    return cfg.learning_rate * max(0.0, 1.0 - step / cfg.total_steps)


# ---------------------------------------------------------------------------
# inference helpers


def episode_predictions(params: EncoderParams, ep: Episode, kind: str = "diagonal") -> np.ndarray:
    """Predicted local class per query row, dropout off."""
    sup = encode(params, ep.support_x)
    qry = encode(params, ep.query_x)
    mu, var = class_moments(sup, ep.ways, ep.supports, kind)
    return np.argmin(kernels.dirac_sq(qry, mu, var), axis=1)


def episode_accuracy(params: EncoderParams, ep: Episode, kind: str = "diagonal") -> float:
    return float(np.mean(episode_predictions(params, ep, kind) == ep.query_y))


def _seed_accuracy(args) -> tuple[int, float]:
    params, dataset, cfg, seed = args
    rng = substream(seed, "eval")
    accs = [episode_accuracy(params, sample_episode(dataset, cfg.sampler, rng), cfg.kind) for _ in range(cfg.tasks)]
    return seed, float(np.mean(accs))


def evaluate(params: EncoderParams, dataset: Dataset | Sequence[Dataset], cfg: EvalConfig) -> EvalReport:
    """Mean query accuracy over ``cfg.tasks`` episodes for each seed; mean and std across seeds."""
    if not cfg.seeds:
        raise UsageError("evaluate needs at least one seed")
    jobs = [(params, dataset, cfg, int(s)) for s in cfg.seeds]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_seed_accuracy, jobs))
    else:
        results = [_seed_accuracy(j) for j in jobs]
    per_seed = dict(sorted(results))
    accs = np.array(list(per_seed.values()))
    return EvalReport(float(accs.mean()), float(accs.std()), per_seed, cfg.tasks * len(per_seed))


def _val_pass(params: EncoderParams, val_set: Dataset, cfg: TrainConfig) -> tuple[float, float]:
    """(accuracy, mean loss) over a fixed set of meta-val episodes."""
    rng = substream(cfg.seed, "metaval")
    accs, losses = [], []
    for _ in range(cfg.val_tasks):
        ep = sample_episode(val_set, cfg.sampler, rng)
        res = episode_loss(params, ep, cfg.lam, mode="eval", kind=cfg.kind)
        accs.append(float(np.mean(np.argmax(res.probs, axis=1) == ep.query_y)))
        losses.append(res.value)
    return float(np.mean(accs)), float(np.mean(losses))


# ---------------------------------------------------------------------------
# training


class TrainingDiverged(NumericError):
    """Raised when a step produces non-finite values; carries the last good parameters."""

    def __init__(self, msg: str, last_good: EncoderParams, best: EncoderParams, log_records: list[dict]):
        super().__init__(msg)
        self.last_good = last_good
        self.best = best
        self.log_records = log_records


@dataclass
class TrainResult:
    params: EncoderParams
    log: list[dict]
    best_epoch: int
    best_accuracy: float
    baseline_accuracy: float
    steps: int
    applied_grad_norms: list[float]
    stopped_early: bool


def train(
    train_sets: Dataset | Sequence[Dataset],
    val_set: Dataset,
    cfg: TrainConfig,
    init: EncoderParams | None = None,
    log_path: str | Path | None = None,
    on_step: Callable[[int, float, float], None] | None = None,
) -> TrainResult:
    """Meta-train the encoder and return the parameters with the best meta-val score.

    Models are ranked by meta-val accuracy, ties broken by lower meta-val loss.
    Training stops after ``early_stop_patience`` epochs without improvement.
    """
    if isinstance(train_sets, Dataset):
        train_sets = [train_sets]
    for ds in train_sets:
        check_disjoint(ds, val_set)
    dims = {ds.dim for ds in train_sets} | {val_set.dim}
    if len(dims) != 1:
        raise ConfigurationError(f"datasets disagree on feature dim: {sorted(dims)}")
    params = init.copy() if init is not None else EncoderParams.init(
        val_set.dim, cfg.hidden_dim, cfg.embed_dim, cfg.seed, cfg.dropout
    )
    opt = AdamW(params, cfg.weight_decay, cfg.betas, cfg.adam_eps)
    ep_rng = substream(cfg.seed, "episodes")
    drop_rng = substream(cfg.seed, "dropout")

    base_acc, base_loss = _val_pass(params, val_set, cfg)
    best, best_key, best_epoch = params.copy(), (base_acc, -base_loss), 0
    records: list[dict] = []
    norms: list[float] = []
    stale = 0
    step = 0
    stopped = False
    log_fh = open(log_path, "w", encoding="utf-8", newline="\n") if log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            losses = []
            lr = cfg.learning_rate
            for _ in range(cfg.episodes_per_epoch):
                ep = sample_episode(train_sets, cfg.sampler, ep_rng)
                ep = replace(ep, origin=f"seed={cfg.seed} step={step}")
                try:
                    res = episode_loss(params, ep, cfg.lam, mode="train", rng=drop_rng, kind=cfg.kind)
                except NumericError as exc:
                    raise TrainingDiverged(str(exc), params, best, records) from None
                grads, _ = clip_grad_norm(res.gradients(), cfg.grad_clip_norm)
                norms.append(global_norm(grads))
                lr = lr_at(step, cfg)
                new = opt.step(params, grads, lr)
                if not all(np.all(np.isfinite(v)) for v in new.values()):
                    raise TrainingDiverged(f"non-finite parameters after step {step}", params, best, records)
                params = params.replace(new)
                params.grads = grads
                losses.append(res.value)
                if on_step is not None:
                    on_step(step, res.value, norms[-1])
                step += 1
            acc, vloss = _val_pass(params, val_set, cfg)
            rec = {
                "epoch": epoch,
                "mean_train_loss": float(np.mean(losses)),
                "metaval_accuracy": acc,
                "metaval_loss": vloss,
                "lr": lr,
            }
            records.append(rec)
            if log_fh:
                log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                log_fh.flush()
            log.info("epoch %d loss %.5f metaval acc %.4f", epoch, rec["mean_train_loss"], acc)
            if (acc, -vloss) > best_key:
                best, best_key, best_epoch, stale = params.copy(), (acc, -vloss), epoch, 0
            else:
                stale += 1
                if stale >= cfg.early_stop_patience:
                    stopped = epoch < cfg.epochs
                    break
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(best, records, best_epoch, best_key[0], base_acc, step, norms, stopped)


# ---------------------------------------------------------------------------
# effect of the variance regularizer on class statistics


def class_statistics(params: EncoderParams, ep: Episode, kind: str = "diagonal") -> tuple[float, np.ndarray]:
    """(mean pairwise centroid distance, per-class ||Sigma_c||_F) for one episode."""
    mu, var = class_moments(encode(params, ep.support_x), ep.ways, ep.supports, kind)
    iu = np.triu_indices(ep.ways, 1)
    gaps = np.sqrt(((mu[:, None, :] - mu[None, :, :]) ** 2).sum(-1))[iu]
    return float(gaps.mean()), np.sqrt((var * var).sum(axis=1))


def reg_effect_report(
    params_unreg: EncoderParams,
    params_reg: EncoderParams,
    dataset: Dataset,
    tasks: int = 200,
    seed: int = 0,
    shots: int = 8,
    supports: int = 16,
    kind: str = "diagonal",
) -> dict:
    """Centroid separation and covariance norms over shared binary episodes for two models."""
    cfg = SamplerConfig(ways=2, shots=shots, supports=supports)
    rng = substream(seed, "reg-effect")
    episodes = [sample_episode(dataset, cfg, rng) for _ in range(tasks)]
    out = {"tasks": tasks, "seed": seed}
    for name, params in (("unregularized", params_unreg), ("regularized", params_reg)):
        dists, norms = zip(*(class_statistics(params, ep, kind) for ep in episodes))
        norms = np.stack(norms)
        out[name] = {
            "centroid_distance": float(np.mean(dists)),
            "class0_var_norm": float(norms[:, 0].mean()),
            "class1_var_norm": float(norms[:, 1].mean()),
            "mean_var_norm": float(norms.mean()),
        }
    return out
