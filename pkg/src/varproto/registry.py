"""Persistent per-task class statistics for deployment-style inference.

A registry maps task ids to fitted class Gaussians (one per label) plus the
task's dataset indices for the OOD monitor. Files are versioned JSON whose
floats are stored as IEEE-754 bit patterns, so a save/load round trip is
bit-exact. Schema (format_version 1)::

    {
      "format_version": 1,
      "encoder_fingerprint": "sha256:..." | null,
      "tasks": {
        "<task id>": {
          "dim": int, "kind": "diagonal" | "isotropic", "top_k": int,
          "dataset_indices": [int, ...],            # strictly increasing
          "classes": [
            {"label": str, "support_count": int,
             "mean": {"shape": [d], "hex": str, "decimal": [...]},
             "var":  {"shape": [d], "hex": str, "decimal": [...]}   # diagonal
             "alpha": {"hex": str, "decimal": float}                # isotropic
            }, ...
          ]
        }
      }
    }
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import codec
from .encoder import EncoderParams, encode
from .episodes import Dataset
from .errors import ConfigurationError, FormatError, IncompatibleVersionError, RegistryLookupError, UsageError
from .monitor import dataset_indices
from .proto import ClassGaussian, class_probabilities, class_stats
from .streams import substream

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass(frozen=True)
class TaskEntry:
    labels: tuple[str, ...]
    classes: tuple[ClassGaussian, ...]
    dataset_indices: tuple[int, ...]
    top_k: int
    kind: str = "diagonal"

    def __post_init__(self):
        if len(self.labels) != len(self.classes) or not self.classes:
            raise UsageError("a task needs one class Gaussian per label, at least one")
        dims = {g.dim for g in self.classes}
        if len(dims) != 1:
            raise UsageError(f"task classes disagree on dim: {sorted(dims)}")
        idx = self.dataset_indices
        if any(b <= a for a, b in zip(idx, idx[1:])) or (idx and (idx[0] < 0 or idx[-1] >= self.dim)):
            raise UsageError("dataset_indices must be strictly increasing and within the embedding dim")

    @property
    def dim(self) -> int:
        return self.classes[0].dim

    def same_as(self, other: "TaskEntry") -> bool:
        return (
            self.labels == other.labels
            and self.dataset_indices == other.dataset_indices
            and self.top_k == other.top_k
            and self.kind == other.kind
            and all(a.same_as(b) for a, b in zip(self.classes, other.classes))
        )


@dataclass
class StatsRegistry:
    tasks: dict[str, TaskEntry] = field(default_factory=dict)
    encoder_fingerprint: str | None = None
    format_version: int = FORMAT_VERSION

    def add(self, task_id: str, entry: TaskEntry, fingerprint: str | None = None) -> None:
        if self.tasks and fingerprint and self.encoder_fingerprint not in (None, fingerprint):
            log.warning("task %r fitted with a different encoder than the registry's", task_id)
        if fingerprint:
            self.encoder_fingerprint = fingerprint
        self.tasks[task_id] = entry

    def entry(self, task_id: str) -> TaskEntry:
        try:
            return self.tasks[task_id]
        except KeyError:
            raise RegistryLookupError(f"unknown task id {task_id!r}; known: {sorted(self.tasks)}") from None

    def same_as(self, other: "StatsRegistry") -> bool:
        return (
            self.format_version == other.format_version
            and self.encoder_fingerprint == other.encoder_fingerprint
            and self.tasks.keys() == other.tasks.keys()
            and all(self.tasks[k].same_as(other.tasks[k]) for k in self.tasks)
        )


def fit_embeddings(emb: np.ndarray, labels: np.ndarray, label_names: Sequence[str], kind: str = "diagonal", top_k: int = 10) -> TaskEntry:
    """One class Gaussian per label from already-embedded rows."""
    if emb.shape[0] == 0:
        raise UsageError("cannot fit a task on an empty dataset")
    classes = tuple(class_stats(emb[labels == i], kind) for i in range(len(label_names)))
    k = min(top_k, emb.shape[1])
    return TaskEntry(tuple(label_names), classes, dataset_indices(classes, k), k, kind)


def fit_task(params: EncoderParams, labeled: Dataset, kind: str = "diagonal", top_k: int = 10) -> TaskEntry:
    """Embed every example (dropout off) and fit per-label statistics."""
    if len(labeled) == 0:
        raise UsageError("cannot fit a task on an empty dataset")
    return fit_embeddings(encode(params, labeled.features), labeled.labels, labeled.label_names, kind, top_k)


def classify(
    registry: StatsRegistry,
    task_id: str,
    queries,
    params: EncoderParams | None = None,
) -> tuple[list[str], np.ndarray]:
    """Labels and class probabilities for queries under a stored task.

    ``queries`` are embeddings, or raw features when ``params`` is given.
    """
    entry = registry.entry(task_id)
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim == 1:
        q = q[None, :]
    if params is not None:
        if registry.encoder_fingerprint and params.fingerprint() != registry.encoder_fingerprint:
            log.warning("encoder fingerprint differs from the one recorded in the registry")
        q = encode(params, q)
    if q.ndim != 2 or q.shape[1] != entry.dim:
        raise UsageError(f"query dim {q.shape[-1]} does not match task dim {entry.dim}")
    probs = class_probabilities(q, entry.classes)
    idx = np.argmax(probs, axis=1) if probs.size else np.zeros(0, dtype=int)
    return [entry.labels[i] for i in idx], probs


# ---------------------------------------------------------------------------
# persistence


def _class_record(label: str, g: ClassGaussian) -> dict:
    rec = {"label": label, "support_count": int(g.support_count), "mean": codec.encode_array(g.mean)}
    if g.kind == "isotropic":
        rec["alpha"] = codec.encode_scalar(float(g.scale))
    else:
        rec["var"] = codec.encode_array(g.scale)
    return rec


def to_dict(registry: StatsRegistry) -> dict:
    tasks = {}
    for tid, e in registry.tasks.items():
        tasks[tid] = {
            "dim": e.dim,
            "kind": e.kind,
            "top_k": e.top_k,
            "dataset_indices": list(e.dataset_indices),
            "classes": [_class_record(lab, g) for lab, g in zip(e.labels, e.classes)],
        }
    return {"format_version": registry.format_version, "encoder_fingerprint": registry.encoder_fingerprint, "tasks": tasks}


def save(registry: StatsRegistry, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(codec.dumps(to_dict(registry)), encoding="utf-8")
    os.replace(tmp, path)


def _offset_of(text: str, needle: str) -> int:
    pos = text.find(needle) if needle else -1
    return len(text[:pos].encode("utf-8")) if pos >= 0 else -1


def _decode_located(decode, rec, where: str, text: str):
    """Decode one stored number record, citing its byte offset in ``text`` on failure."""
    try:
        return decode(rec, where)
    except FormatError as exc:
        hexstr = rec.get("hex") if isinstance(rec, dict) else None
        off = _offset_of(text, hexstr) if isinstance(hexstr, str) else -1
        raise FormatError(f"{exc} (at byte {off})" if off >= 0 else str(exc)) from None


def from_dict(obj, text: str = "", source: str = "<registry>") -> StatsRegistry:
    if not isinstance(obj, dict):
        raise FormatError(f"{source}: top level must be an object")
    version = obj.get("format_version")
    if version != FORMAT_VERSION:
        raise IncompatibleVersionError(f"{source}: registry format_version {version!r} is not supported (expected {FORMAT_VERSION})")
    if "encoder_fingerprint" not in obj:
        raise FormatError(f"{source}: missing encoder_fingerprint")
    tasks_obj = obj.get("tasks")
    if not isinstance(tasks_obj, dict):
        raise FormatError(f"{source}: 'tasks' must be an object")
    tasks = {}
    for tid, t in tasks_obj.items():
        where = f"{source}: task {tid!r}"
        try:
            kind = t["kind"]
            classes, labels = [], []
            for i, rec in enumerate(t["classes"]):
                cw = f"{where} class {i}"
                mean = _decode_located(codec.decode_array, rec["mean"], cw + " mean", text)
                if kind == "isotropic":
                    scale = np.float64(_decode_located(codec.decode_scalar, rec["alpha"], cw + " alpha", text))
                else:
                    scale = _decode_located(codec.decode_array, rec["var"], cw + " var", text)
                classes.append(ClassGaussian(mean, scale, kind, int(rec["support_count"])))
                labels.append(str(rec["label"]))
            entry = TaskEntry(tuple(labels), tuple(classes), tuple(int(i) for i in t["dataset_indices"]), int(t["top_k"]), kind)
        except (KeyError, TypeError, AttributeError) as exc:
            raise FormatError(f"{where}: missing or malformed field {exc} (task record near byte {_offset_of(text, json.dumps(tid))})") from None
        except UsageError as exc:
            raise FormatError(f"{where}: invariant violated: {exc}") from None
        if entry.dim != t.get("dim", entry.dim):
            raise FormatError(f"{where}: recorded dim {t.get('dim')} != stored vectors' dim {entry.dim}")
        tasks[tid] = entry
    return StatsRegistry(tasks, obj["encoder_fingerprint"], version)


def load(path: str | Path) -> StatsRegistry:
    """Read and validate a registry file; nothing is returned on any error."""
    path = Path(path)
    if not path.exists():
        raise FormatError(f"{path}: file not found")
    text = path.read_text(encoding="utf-8")
    return from_dict(codec.loads(text, str(path)), text, str(path))


# ---------------------------------------------------------------------------
# prototype stability


@dataclass
class StabilityReport:
    scores: dict[int, list[float]]
    mean: dict[int, float]
    std: dict[int, float]
    metric: str = "accuracy"
    resamples: int = 50

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "resamples": self.resamples,
            "per_k": {str(k): {"mean": self.mean[k], "std": self.std[k], "scores": self.scores[k]} for k in self.scores},
        }


def macro_f1(y_true: np.ndarray, y_pred: np.ndarray, n_classes: int) -> float:
    f1s = []
    for c in range(n_classes):
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(f1s))


def stability_experiment(
    params: EncoderParams | None,
    dataset: Dataset,
    k_values: Sequence[int],
    resamples: int,
    eval_set: Dataset,
    seed: int = 0,
    kind: str = "diagonal",
    metric: str = "accuracy",
) -> StabilityReport:
    """Score ``eval_set`` with prototypes fitted from k random examples per class, ``resamples`` times per k.

    ``params=None`` uses the raw features as embeddings.
    """
    if metric not in ("accuracy", "f1"):
        raise UsageError("metric must be 'accuracy' or 'f1'")
    if resamples < 1 or not k_values:
        raise UsageError("need at least one k and one resample")
    counts = dataset.label_counts()
    if min(k_values) < 1 or max(k_values) > counts.min():
        raise ConfigurationError(
            f"k up to {max(k_values)} requested but the smallest class has {counts.min()} examples"
        )
    lookup = {n: i for i, n in enumerate(dataset.label_names)}
    missing = [n for n in eval_set.label_names if n not in lookup]
    if missing:
        raise ConfigurationError(f"eval labels not present in the prototype pool: {missing}")
    pool = encode(params, dataset.features) if params is not None else np.asarray(dataset.features)
    ev = encode(params, eval_set.features) if params is not None else np.asarray(eval_set.features)
    y = np.array([lookup[eval_set.label_names[i]] for i in eval_set.labels])
    scores: dict[int, list[float]] = {}
    for k in k_values:
        vals = []
        for r in range(resamples):
            rng = substream(seed, "stability", int(k), r)
            classes = []
            for lab in range(dataset.n_labels):
                rows = np.sort(rng.choice(dataset.label_index[lab], size=k, replace=False))
                classes.append(class_stats(pool[rows], kind))
            pred = np.argmax(class_probabilities(ev, classes), axis=1)
            vals.append(float(np.mean(pred == y)) if metric == "accuracy" else macro_f1(y, pred, dataset.n_labels))
        scores[int(k)] = vals
    return StabilityReport(
        scores,
        {k: float(np.mean(v)) for k, v in scores.items()},
        {k: float(np.std(v)) for k, v in scores.items()},
        metric,
        resamples,
    )
