"""Labeled datasets, the N-way episodic sampler, synthetic data and file I/O.

Episode convention: ``supports`` examples per class build the prototypes and
``shots`` examples per class are queried against them, so the default
4-way / 8-shot / 16-support episode holds 64 support and 32 query rows.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigurationError, FormatError, UsageError
from .streams import substream

log = logging.getLogger(__name__)

SPLITS = ("meta-train", "meta-val", "downstream")
WEIGHTINGS = ("uniform", "sqrt-size")


@dataclass(frozen=True)
class LabeledExample:
    features: np.ndarray
    label: int
    source_dataset: str


@dataclass(eq=False)
class Dataset:
    """Immutable table of feature rows with integer labels.

    Label ids index into ``label_names``; names are what identify a class
    across files and splits.
    """

    features: np.ndarray
    labels: np.ndarray
    label_names: tuple[str, ...]
    split: str = "meta-train"
    name: str = "dataset"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.array(self.features, dtype=np.float64)
        self.labels = np.array(self.labels, dtype=np.int64)
        self.label_names = tuple(str(n) for n in self.label_names)
        if self.features.ndim != 2 or self.features.shape[1] == 0:
            raise UsageError(f"features must be a 2-D array with dim >= 1, got {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise UsageError("labels must have one entry per feature row")
        if self.split not in SPLITS:
            raise UsageError(f"split must be one of {SPLITS}, got {self.split!r}")
        if len(set(self.label_names)) != len(self.label_names):
            raise UsageError("label names must be unique")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.label_names)):
            raise UsageError("label id outside label_names")
        if not np.all(np.isfinite(self.features)):
            raise UsageError("features contain NaN or Inf")
        counts = np.bincount(self.labels, minlength=len(self.label_names))
        if np.any(counts == 0):
            empty = [self.label_names[i] for i in np.flatnonzero(counts == 0)]
            raise UsageError(f"labels without examples: {empty}")
        self.features.setflags(write=False)
        self.labels.setflags(write=False)
        order = np.argsort(self.labels, kind="stable")
        bounds = np.cumsum(counts)[:-1]
        self.label_index = {i: idx for i, idx in enumerate(np.split(order, bounds))}
        self._eligible: dict[int, np.ndarray] = {}

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_labels(self) -> int:
        return len(self.label_names)

    def __len__(self) -> int:
        return self.features.shape[0]

    def __iter__(self) -> Iterator[LabeledExample]:
        for i in range(len(self)):
            yield self.example(i)

    def example(self, i: int) -> LabeledExample:
        return LabeledExample(self.features[i], int(self.labels[i]), self.name)

    def label_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_labels)

    def eligible_labels(self, need: int) -> np.ndarray:
        """Label ids with at least ``need`` examples."""
        if need not in self._eligible:
            counts = self.label_counts()
            ok = np.flatnonzero(counts >= need)
            if ok.size < self.n_labels:
                dropped = [self.label_names[i] for i in np.flatnonzero(counts < need)]
                log.info("%s: excluding %d label(s) with fewer than %d examples: %s", self.name, len(dropped), need, dropped)
            self._eligible[need] = ok
        return self._eligible[need]

    def select_labels(self, names: Sequence[str], split: str | None = None, name: str | None = None) -> "Dataset":
        """New dataset restricted to ``names``, re-interned in the given order."""
        lookup = {n: i for i, n in enumerate(self.label_names)}
        missing = [n for n in names if n not in lookup]
        if missing:
            raise UsageError(f"unknown labels: {missing}")
        rows = np.concatenate([self.label_index[lookup[n]] for n in names])
        rows.sort()
        remap = np.full(self.n_labels, -1, dtype=np.int64)
        remap[[lookup[n] for n in names]] = np.arange(len(names))
        return Dataset(
            self.features[rows],
            remap[self.labels[rows]],
            tuple(names),
            split=split or self.split,
            name=name or self.name,
            metadata=dict(self.metadata),
        )

    def equals(self, other: "Dataset") -> bool:
        return (
            self.label_names == other.label_names
            and self.split == other.split
            and np.array_equal(self.labels, other.labels)
            and self.features.shape == other.features.shape
            and bool(np.all(self.features == other.features))
        )


def check_disjoint(train: Dataset, val: Dataset) -> None:
    """Raise ConfigurationError if two splits share any label name."""
    shared = sorted(set(train.label_names) & set(val.label_names))
    if shared:
        head = ", ".join(shared[:10]) + (" ..." if len(shared) > 10 else "")
        raise ConfigurationError(f"{len(shared)} label(s) appear in both {train.name!r} and {val.name!r}: {head}")


@dataclass(frozen=True)
class SamplerConfig:
    ways: int = 4
    shots: int = 8
    supports: int = 16
    seed: int = 0
    task_weighting: str = "uniform"

    def __post_init__(self):
        if self.ways < 2:
            raise ConfigurationError(f"ways must be >= 2, got {self.ways}")
        if self.shots < 1 or self.supports < 1:
            raise ConfigurationError("shots and supports must be positive")
        if self.task_weighting not in WEIGHTINGS:
            raise ConfigurationError(f"task_weighting must be one of {WEIGHTINGS}")

    @property
    def per_class(self) -> int:
        return self.shots + self.supports


@dataclass(frozen=True)
class Episode:
    ways: int
    shots: int
    supports: int
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    label_map: tuple[int, ...]
    dataset: str = ""
    support_idx: np.ndarray | None = None
    query_idx: np.ndarray | None = None
    origin: str = ""

    @property
    def dim(self) -> int:
        return self.support_x.shape[1]

    def support_by_class(self) -> np.ndarray:
        """Support rows as a (ways, supports, dim) block."""
        return self.support_x.reshape(self.ways, self.supports, -1)

    def permuted(self, perm: Sequence[int]) -> "Episode":
        """Same episode with local class c renamed to position of c in ``perm``."""
        perm = np.asarray(perm)
        inv = np.argsort(perm)
        sx = self.support_by_class()[perm].reshape(self.support_x.shape)
        return Episode(
            self.ways, self.shots, self.supports, sx, np.repeat(np.arange(self.ways), self.supports),
            self.query_x, inv[self.query_y], tuple(self.label_map[p] for p in perm), self.dataset,
            origin=self.origin,
        )


def episode_from_arrays(support: np.ndarray, query: np.ndarray, query_y: np.ndarray | None = None) -> Episode:
    """Build an episode from (ways, supports, dim) and (ways, shots, dim) blocks."""
    support = np.asarray(support, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64)
    ways, supports, dim = support.shape
    if query.ndim == 3:
        shots = query.shape[1]
        qx = query.reshape(-1, dim)
        qy = np.repeat(np.arange(ways), shots)
    else:
        qx = query
        qy = np.asarray(query_y, dtype=np.int64)
        shots = max(1, qx.shape[0] // ways)
    return Episode(
        ways, shots, supports, support.reshape(-1, dim), np.repeat(np.arange(ways), supports),
        qx, qy, tuple(range(ways)),
    )


def sample_episode(datasets: Dataset | Sequence[Dataset], cfg: SamplerConfig, rng: np.random.Generator) -> Episode:
    """Draw one task: a dataset, then ``ways`` labels, then examples per label."""
    if isinstance(datasets, Dataset):
        datasets = [datasets]
    need = cfg.per_class
    pools = [(ds, ds.eligible_labels(need)) for ds in datasets]
    pools = [(ds, el) for ds, el in pools if el.size >= cfg.ways]
    if not pools:
        best = max((ds.eligible_labels(need).size for ds in datasets), default=0)
        raise ConfigurationError(
            f"no dataset has {cfg.ways} labels with >= {need} examples "
            f"(shots={cfg.shots} + supports={cfg.supports}); best has {best}"
        )
    if len(pools) == 1:
        ds, eligible = pools[0]
    else:
        if cfg.task_weighting == "sqrt-size":
            w = np.array([math.sqrt(len(ds)) for ds, _ in pools])
        else:
            w = np.ones(len(pools))
        ds, eligible = pools[int(rng.choice(len(pools), p=w / w.sum()))]
    labels = rng.choice(eligible, size=cfg.ways, replace=False)
    sup_idx, qry_idx = [], []
    for lab in labels:
        picked = rng.choice(ds.label_index[int(lab)], size=need, replace=False)
        sup_idx.append(picked[: cfg.supports])
        qry_idx.append(picked[cfg.supports:])
    sup_idx = np.concatenate(sup_idx)
    qry_idx = np.concatenate(qry_idx)
    return Episode(
        ways=cfg.ways,
        shots=cfg.shots,
        supports=cfg.supports,
        support_x=ds.features[sup_idx],
        support_y=np.repeat(np.arange(cfg.ways), cfg.supports),
        query_x=ds.features[qry_idx],
        query_y=np.repeat(np.arange(cfg.ways), cfg.shots),
        label_map=tuple(int(x) for x in labels),
        dataset=ds.name,
        support_idx=sup_idx,
        query_idx=qry_idx,
    )


def generate_synthetic(
    n_labels: int,
    examples_per_label: int,
    dim: int,
    class_separation: float,
    noise_sigma: float,
    seed: int,
    split: str = "meta-train",
    name: str = "synthetic",
    label_prefix: str = "L",
) -> Dataset:
    """Gaussian blobs with centers drawn uniformly on a sphere of radius ``class_separation``."""
    if min(n_labels, examples_per_label, dim) < 1:
        raise UsageError("n_labels, examples_per_label and dim must be positive")
    if class_separation <= 0 or noise_sigma < 0:
        raise UsageError("class_separation must be positive and noise_sigma non-negative")
    centers = substream(seed, "centers").standard_normal((n_labels, dim))
    centers *= class_separation / np.linalg.norm(centers, axis=1, keepdims=True)
    noise = substream(seed, "noise").standard_normal((n_labels, examples_per_label, dim))
    feats = centers[:, None, :] + noise_sigma * noise
    labels = np.repeat(np.arange(n_labels), examples_per_label)
    meta = {
        "generator": {
            "n_labels": n_labels,
            "examples_per_label": examples_per_label,
            "dim": dim,
            "class_separation": class_separation,
            "noise_sigma": noise_sigma,
            "seed": seed,
        }
    }
    names = tuple(f"{label_prefix}{i}" for i in range(n_labels))
    return Dataset(feats.reshape(-1, dim), labels, names, split=split, name=name, metadata=meta)


def split_labels(ds: Dataset, n_val: int) -> tuple[Dataset, Dataset]:
    """Label-disjoint (meta-train, meta-val) split; the last ``n_val`` labels go to meta-val."""
    if not 0 < n_val < ds.n_labels:
        raise UsageError(f"n_val must be in (0, {ds.n_labels})")
    names = ds.label_names
    train = ds.select_labels(names[:-n_val], split="meta-train", name=f"{ds.name}-train")
    val = ds.select_labels(names[-n_val:], split="meta-val", name=f"{ds.name}-val")
    check_disjoint(train, val)
    return train, val


def standard_benchmark(seed: int = 7, examples_per_label: int = 300) -> tuple[Dataset, Dataset]:
    """28 meta-train and 8 meta-val labels, dim 64, separation 8, noise 1."""
    full = generate_synthetic(36, examples_per_label, 64, 8.0, 1.0, seed, name="benchmark")
    return split_labels(full, 8)


# ---------------------------------------------------------------------------
# file formats


def _header_for(ds: Dataset) -> dict:
    return {"dim": ds.dim, "split": ds.split, "name": ds.name, "metadata": ds.metadata}


def write_dataset(ds: Dataset, path: str | Path, format: str = "jsonl") -> None:
    path = Path(path)
    names = ds.label_names
    if format == "jsonl":
        with path.open("w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps(_header_for(ds), sort_keys=True) + "\n")
            for x, y in zip(ds.features, ds.labels):
                fh.write(json.dumps({"label": names[y], "features": x.tolist()}) + "\n")
    elif format == "csv":
        with path.open("w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["label"] + [f"f{i + 1}" for i in range(ds.dim)])
            for x, y in zip(ds.features, ds.labels):
                w.writerow([names[y]] + [repr(float(v)) for v in x])
    else:
        raise UsageError(f"unknown dataset format {format!r}")


def _build(records: list[tuple[int, str, list]], source: str, split: str, name: str, meta: dict, dim: int | None) -> Dataset:
    if not records:
        raise FormatError(f"{source}: no records")
    interned: dict[str, int] = {}
    labels = []
    for index, (line_no, lab, feats) in enumerate(records):
        if dim is None:
            dim = len(feats)
        if len(feats) != dim:
            raise FormatError(f"{source}: record {index} (line {line_no}) has dim {len(feats)}, expected {dim}")
        labels.append(interned.setdefault(lab, len(interned)))
    try:
        x = np.array([r[2] for r in records], dtype=np.float64)
        ds = Dataset(x, labels, tuple(interned), split=split, name=name, metadata=meta)
    except (UsageError, ValueError, TypeError) as exc:
        raise FormatError(f"{source}: {exc}") from None
    return ds


def load_dataset(path: str | Path, format: str = "jsonl", split: str | None = None, name: str | None = None) -> Dataset:
    """Read a dataset file; see the README for the record layout."""
    path = Path(path)
    src = str(path)
    if not path.exists():
        raise FormatError(f"{src}: file not found")
    header: dict = {}
    records: list[tuple[int, str, list]] = []
    if format == "jsonl":
        with path.open(encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise FormatError(f"{src}: line {line_no}: invalid JSON ({exc.msg})") from None
                if not isinstance(obj, dict):
                    raise FormatError(f"{src}: line {line_no}: expected a JSON object")
                if "label" not in obj:
                    if records or header:
                        raise FormatError(f"{src}: line {line_no}: metadata record must be the first line")
                    header = obj
                    continue
                feats = obj.get("features")
                if not isinstance(feats, list):
                    raise FormatError(f"{src}: line {line_no}: 'features' must be a list of numbers")
                records.append((line_no, str(obj["label"]), feats))
    elif format == "csv":
        with path.open(encoding="utf-8", newline="") as fh:
            rows = csv.reader(fh)
            head = next(rows, None)
            if head is None:
                raise FormatError(f"{src}: empty file")
            if not head or head[0].strip() != "label":
                raise FormatError(f"{src}: line 1: header row 'label,f1,...,fn' required")
            for line_no, row in enumerate(rows, start=2):
                if not row:
                    continue
                try:
                    feats = [float(v) for v in row[1:]]
                except ValueError:
                    raise FormatError(f"{src}: line {line_no}: non-numeric feature") from None
                records.append((line_no, row[0], feats))
            header = {"dim": len(head) - 1}
    else:
        raise UsageError(f"unknown dataset format {format!r}")
    dim = header.get("dim")
    return _build(
        records,
        src,
        split or header.get("split", "meta-train"),
        name or header.get("name", path.stem),
        header.get("metadata", {}),
        int(dim) if dim is not None else None,
    )


def load_splits(train_path, val_path, format: str = "jsonl") -> tuple[Dataset, Dataset]:
    """Load meta-train and meta-val files and verify their labels are disjoint."""
    train = load_dataset(train_path, format, split="meta-train")
    val = load_dataset(val_path, format, split="meta-val")
    if train.dim != val.dim:
        raise ConfigurationError(f"meta-train dim {train.dim} != meta-val dim {val.dim}")
    check_disjoint(train, val)
    return train, val
