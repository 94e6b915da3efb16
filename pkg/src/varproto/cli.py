"""``varproto`` command line: data generation, meta-training, evaluation, deployment tools.

Every command writes its artifacts under ``--out-dir`` with fixed file names
plus a ``manifest.json`` describing the run. ``varproto replay manifest.json``
re-executes the recorded configuration and checks that every artifact comes
out byte-identical.

Options can also come from a JSON object passed with ``--config``; its keys
are the option names with dashes replaced by underscores. Explicit flags win.

Exit codes: 0 success, 1 replay mismatch, 2 usage/configuration error,
3 data/format error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__, codec, monitor, registry
from .encoder import encode, load_checkpoint, save_checkpoint
from .episodes import SamplerConfig, generate_synthetic, load_dataset, load_splits, sample_episode, split_labels, write_dataset
from .errors import FormatError, UsageError, VarProtoError
from .streams import substream
from .train import EvalConfig, TrainConfig, class_statistics, evaluate, reg_effect_report, train

log = logging.getLogger("varproto")

LAMBDA_GRID = (0.0, 1e-4, 1e-3, 0.01, 0.1, 0.5)

CHECKPOINT = "checkpoint.bin"
TRAIN_LOG = "train_log.jsonl"
REGISTRY = "registry.json"
OOD = "ood.jsonl"
SWEEP = "sweep.csv"
MANIFEST = "manifest.json"


def _floats(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).split(",") if v.strip()]


def _ints(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    return [int(v) for v in str(text).split(",") if v.strip()]


@dataclass(frozen=True)
class Opt:
    flag: str
    type: Callable
    default: Any
    help: str
    path: bool = False
    choices: tuple | None = None

    @property
    def dest(self) -> str:
        return self.flag.lstrip("-").replace("-", "_")


SAMPLER_OPTS = [
    Opt("--ways", int, 4, "classes per episode"),
    Opt("--shots", int, 8, "query examples per class"),
    Opt("--supports", int, 16, "support examples per class"),
    Opt("--kind", str, "diagonal", "covariance kind", choices=("diagonal", "isotropic")),
]

TRAIN_OPTS = [
    Opt("--train", str, None, "meta-train dataset file", path=True),
    Opt("--val", str, None, "meta-val dataset file", path=True),
    Opt("--format", str, "jsonl", "dataset file format", choices=("jsonl", "csv")),
    Opt("--lambda", float, 0.1, "variance regularization weight"),
    Opt("--epochs", int, 30, "training epochs"),
    Opt("--episodes-per-epoch", int, 100, "episodes per epoch"),
    Opt("--lr", float, 3e-5, "peak learning rate"),
    Opt("--weight-decay", float, 1e-4, "AdamW weight decay"),
    Opt("--grad-clip", float, 3.0, "global gradient-norm clip"),
    Opt("--schedule", str, "linear-decay", "learning-rate schedule", choices=("linear-decay", "constant")),
    Opt("--patience", int, 5, "early-stopping patience in epochs"),
    Opt("--dropout", float, 0.1, "dropout on the embedding"),
    Opt("--hidden-dim", int, 64, "encoder hidden width"),
    Opt("--embed-dim", int, 64, "embedding width"),
    Opt("--val-tasks", int, 200, "meta-val episodes per epoch"),
    Opt("--seed", int, 0, "master seed"),
    *SAMPLER_OPTS,
]

EVAL_OPTS = [
    Opt("--tasks", int, 1000, "episodes per evaluation seed"),
    Opt("--seeds", int, 10, "number of evaluation seeds (0..n-1)"),
    Opt("--workers", int, 1, "worker processes for evaluation"),
]

COMMANDS: dict[str, dict] = {
    "gen-data": {
        "help": "generate a synthetic Gaussian-blob dataset",
        "opts": [
            Opt("--labels", int, 36, "number of labels"),
            Opt("--per-label", int, 300, "examples per label"),
            Opt("--dim", int, 64, "feature dimension"),
            Opt("--sep", float, 8.0, "radius of the sphere the label centers lie on"),
            Opt("--noise", float, 1.0, "isotropic noise scale"),
            Opt("--seed", int, 7, "generator seed"),
            Opt("--val-labels", int, 0, "if > 0, split the last N labels into meta_val"),
            Opt("--label-prefix", str, "L", "label name prefix"),
            Opt("--format", str, "jsonl", "output format", choices=("jsonl", "csv")),
        ],
    },
    "meta-train": {"help": "episodically train the encoder", "opts": TRAIN_OPTS},
    "eval": {
        "help": "meta-val accuracy over many random episodes",
        "opts": [
            Opt("--checkpoint", str, None, "encoder checkpoint", path=True),
            Opt("--data", str, None, "dataset to sample episodes from", path=True),
            Opt("--format", str, "jsonl", "dataset file format", choices=("jsonl", "csv")),
            *SAMPLER_OPTS,
            *EVAL_OPTS,
        ],
    },
    "fit": {
        "help": "fit per-label class statistics into a registry",
        "opts": [
            Opt("--checkpoint", str, None, "encoder checkpoint", path=True),
            Opt("--data", str, None, "labeled dataset for the task", path=True),
            Opt("--format", str, "jsonl", "dataset file format", choices=("jsonl", "csv")),
            Opt("--task-id", str, "task", "registry key for this task"),
            Opt("--kind", str, "diagonal", "covariance kind", choices=("diagonal", "isotropic")),
            Opt("--top-k", int, 10, "top-variance dimensions per class for OOD"),
            Opt("--registry", str, None, "existing registry to extend", path=True),
        ],
    },
    "classify": {
        "help": "label queries with a stored task",
        "opts": [
            Opt("--registry", str, None, "registry file", path=True),
            Opt("--checkpoint", str, None, "encoder checkpoint", path=True),
            Opt("--data", str, None, "query dataset", path=True),
            Opt("--format", str, "jsonl", "dataset file format", choices=("jsonl", "csv")),
            Opt("--task-id", str, "task", "task to classify against"),
        ],
    },
    "ood": {
        "help": "AVI_k out-of-distribution scores for queries",
        "opts": [
            Opt("--registry", str, None, "registry file", path=True),
            Opt("--checkpoint", str, None, "encoder checkpoint", path=True),
            Opt("--data", str, None, "query dataset", path=True),
            Opt("--format", str, "jsonl", "dataset file format", choices=("jsonl", "csv")),
            Opt("--task-id", str, "task", "task to score against"),
            Opt("--k", int, 10, "top-k dimensions"),
            Opt("--threshold", float, 0.5, "flag queries scoring below this"),
            Opt("--reading", str, "intersection", "score definition", choices=monitor.READINGS),
        ],
    },
    "stability": {
        "help": "prototype stability across k-shot resamples",
        "opts": [
            Opt("--checkpoint", str, None, "encoder checkpoint", path=True),
            Opt("--data", str, None, "pool the prototypes are drawn from", path=True),
            Opt("--eval-data", str, None, "scored set (defaults to --data)", path=True),
            Opt("--format", str, "jsonl", "dataset file format", choices=("jsonl", "csv")),
            Opt("--k-values", _ints, [2, 4, 8, 16, 32], "comma-separated shot counts"),
            Opt("--resamples", int, 50, "draws per k"),
            Opt("--metric", str, "accuracy", "score", choices=("accuracy", "f1")),
            Opt("--kind", str, "diagonal", "covariance kind", choices=("diagonal", "isotropic")),
            Opt("--seed", int, 0, "resampling seed"),
        ],
    },
    "lambda-sweep": {
        "help": "train across a lambda grid; write accuracy and covariance size per lambda",
        "opts": [*TRAIN_OPTS, *EVAL_OPTS, Opt("--lambdas", _floats, list(LAMBDA_GRID), "comma-separated lambda grid")],
    },
    "reg-effect": {
        "help": "compare centroid distance and covariance norms with and without regularization",
        "opts": [*TRAIN_OPTS, Opt("--report-tasks", int, 200, "held-out binary episodes")],
    },
}


# ---------------------------------------------------------------------------
# argument handling


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="varproto", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"varproto {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    for name, spec in COMMANDS.items():
        p = sub.add_parser(name, help=spec["help"], description=spec["help"])
        p.add_argument("--out-dir", default=".", help="directory for all outputs (default: .)")
        p.add_argument("--config", default=None, help="JSON file of option values; flags override it")
        for o in spec["opts"]:
            p.add_argument(
                o.flag, dest=o.dest, type=o.type, choices=o.choices, default=argparse.SUPPRESS,
                help=f"{o.help} (default: {o.default})",
            )
    rp = sub.add_parser("replay", help="re-run a command from its manifest and compare artifacts")
    rp.add_argument("manifest", help="manifest.json written by an earlier run")
    rp.add_argument("--out-dir", required=True, help="directory for the re-run's outputs")
    return parser


def resolve_options(command: str, explicit: dict, config_path: str | None) -> dict:
    """Defaults, then config-file values, then explicit flags; paths made absolute."""
    opts = {o.dest: o for o in COMMANDS[command]["opts"]}
    values = {k: o.default for k, o in opts.items()}
    if config_path:
        cfg_text = Path(config_path).read_text(encoding="utf-8") if Path(config_path).exists() else None
        if cfg_text is None:
            raise UsageError(f"config file not found: {config_path}")
        cfg = codec.loads(cfg_text, config_path)
        if not isinstance(cfg, dict):
            raise UsageError(f"{config_path}: config must be a JSON object")
        unknown = sorted(set(cfg) - set(opts))
        if unknown:
            raise UsageError(f"{config_path}: unknown options for {command}: {unknown}")
        for k, v in cfg.items():
            values[k] = opts[k].type(v) if v is not None else None
    values.update({k: v for k, v in explicit.items() if k in opts})
    for k, o in opts.items():
        if o.path and values[k] is not None:
            values[k] = str(Path(values[k]).resolve())
        if o.choices and values[k] not in o.choices:
            raise UsageError(f"--{k.replace('_', '-')}: {values[k]!r} not in {o.choices}")
    return values


def _require(values: dict, *names: str) -> None:
    missing = [n for n in names if values.get(n) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# commands; each returns (output file names, printable summary)


def _train_config(v: dict, lam: float | None = None) -> TrainConfig:
    return TrainConfig(
        lam=v["lambda"] if lam is None else lam,
        epochs=v["epochs"],
        episodes_per_epoch=v["episodes_per_epoch"],
        learning_rate=v["lr"],
        weight_decay=v["weight_decay"],
        grad_clip_norm=v["grad_clip"],
        lr_schedule=v["schedule"],
        early_stop_patience=v["patience"],
        seed=v["seed"],
        sampler=SamplerConfig(ways=v["ways"], shots=v["shots"], supports=v["supports"], seed=v["seed"]),
        val_tasks=v["val_tasks"],
        hidden_dim=v["hidden_dim"],
        embed_dim=v["embed_dim"],
        dropout=v["dropout"],
        kind=v["kind"],
    )


def cmd_gen_data(v: dict, out: Path):
    ds = generate_synthetic(
        v["labels"], v["per_label"], v["dim"], v["sep"], v["noise"], v["seed"], label_prefix=v["label_prefix"]
    )
    ext = v["format"]
    if v["val_labels"] > 0:
        tr, va = split_labels(ds, v["val_labels"])
        write_dataset(tr, out / f"meta_train.{ext}", ext)
        write_dataset(va, out / f"meta_val.{ext}", ext)
        return [f"meta_train.{ext}", f"meta_val.{ext}"], f"{len(tr)} meta-train and {len(va)} meta-val records"
    write_dataset(ds, out / f"dataset.{ext}", ext)
    return [f"dataset.{ext}"], f"{len(ds)} records"


def cmd_meta_train(v: dict, out: Path):
    _require(v, "train", "val")
    tr, va = load_splits(v["train"], v["val"], v["format"])
    res = train([tr], va, _train_config(v), log_path=out / TRAIN_LOG)
    save_checkpoint(res.params, out / CHECKPOINT)
    msg = (
        f"best meta-val accuracy {res.best_accuracy:.4f} at epoch {res.best_epoch} "
        f"(untrained {res.baseline_accuracy:.4f}; {res.steps} steps{', stopped early' if res.stopped_early else ''})"
    )
    return [CHECKPOINT, TRAIN_LOG], msg


def cmd_eval(v: dict, out: Path):
    _require(v, "checkpoint", "data")
    params = load_checkpoint(v["checkpoint"])
    ds = load_dataset(v["data"], v["format"])
    cfg = EvalConfig(
        sampler=SamplerConfig(ways=v["ways"], shots=v["shots"], supports=v["supports"]),
        tasks=v["tasks"], seeds=tuple(range(v["seeds"])), kind=v["kind"], workers=v["workers"],
    )
    report = evaluate(params, ds, cfg)
    (out / "eval.json").write_text(codec.dumps(report.to_dict()), encoding="utf-8")
    return ["eval.json"], str(report)


def cmd_fit(v: dict, out: Path):
    _require(v, "checkpoint", "data")
    params = load_checkpoint(v["checkpoint"])
    ds = load_dataset(v["data"], v["format"])
    reg = registry.load(v["registry"]) if v["registry"] else registry.StatsRegistry()
    entry = registry.fit_task(params, ds, v["kind"], v["top_k"])
    reg.add(v["task_id"], entry, params.fingerprint())
    registry.save(reg, out / REGISTRY)
    return [REGISTRY], f"task {v['task_id']!r}: {len(entry.labels)} labels, {len(entry.dataset_indices)} dataset indices"


def cmd_classify(v: dict, out: Path):
    _require(v, "registry", "checkpoint", "data")
    reg = registry.load(v["registry"])
    params = load_checkpoint(v["checkpoint"])
    ds = load_dataset(v["data"], v["format"])
    labels, probs = registry.classify(reg, v["task_id"], ds.features, params)
    names = reg.entry(v["task_id"]).labels
    with (out / "predictions.jsonl").open("w", encoding="utf-8", newline="\n") as fh:
        for i, (lab, p) in enumerate(zip(labels, probs)):
            fh.write(json.dumps({"query_id": i, "label": lab, "probabilities": dict(zip(names, p.tolist()))}) + "\n")
    truth = [ds.label_names[y] for y in ds.labels]
    acc = float(np.mean([a == b for a, b in zip(labels, truth)]))
    return ["predictions.jsonl"], f"{len(labels)} queries classified; agreement with file labels {acc:.4f}"


def cmd_ood(v: dict, out: Path):
    _require(v, "registry", "checkpoint", "data")
    reg = registry.load(v["registry"])
    params = load_checkpoint(v["checkpoint"])
    ds = load_dataset(v["data"], v["format"])
    cfg = monitor.OodConfig(v["k"], v["threshold"], v["reading"])
    scores, summary = monitor.batch_monitor(encode(params, ds.features), reg.entry(v["task_id"]), cfg)
    with (out / OOD).open("w", encoding="utf-8", newline="\n") as fh:
        for i, s in enumerate(scores):
            fh.write(json.dumps(s.to_record(i, cfg), sort_keys=True) + "\n")
    return [OOD], f"{summary['flagged']}/{summary['total']} flagged ({summary['flagged_fraction']:.3f})"


def cmd_stability(v: dict, out: Path):
    _require(v, "checkpoint", "data")
    params = load_checkpoint(v["checkpoint"])
    pool = load_dataset(v["data"], v["format"])
    ev = load_dataset(v["eval_data"], v["format"]) if v["eval_data"] else pool
    rep = registry.stability_experiment(
        params, pool, v["k_values"], v["resamples"], ev, seed=v["seed"], kind=v["kind"], metric=v["metric"]
    )
    (out / "stability.json").write_text(codec.dumps(rep.to_dict()), encoding="utf-8")
    lines = [f"k={k}: {rep.mean[k]:.4f} ± {rep.std[k]:.4f}" for k in rep.scores]
    return ["stability.json"], "\n".join(lines)


def mean_var_norm(params, dataset, sampler: SamplerConfig, tasks: int, seed: int, kind: str) -> float:
    rng = substream(seed, "sweep")
    norms = [class_statistics(params, sample_episode(dataset, sampler, rng), kind)[1].mean() for _ in range(tasks)]
    return float(np.mean(norms))


def cmd_lambda_sweep(v: dict, out: Path):
    _require(v, "train", "val")
    tr, va = load_splits(v["train"], v["val"], v["format"])
    rows = []
    for lam in v["lambdas"]:
        cfg = _train_config(v, lam)
        res = train([tr], va, cfg)
        ecfg = EvalConfig(cfg.sampler, v["tasks"], tuple(range(v["seeds"])), cfg.kind, v["workers"])
        acc = evaluate(res.params, va, ecfg).mean_accuracy
        rows.append((lam, acc, mean_var_norm(res.params, va, cfg.sampler, v["val_tasks"], cfg.seed, cfg.kind)))
        log.info("lambda %g: accuracy %.4f", lam, acc)
    with (out / SWEEP).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lambda", "accuracy", "mean_var_frobenius"])
        for lam, acc, nv in rows:
            w.writerow([repr(lam), repr(acc), repr(nv)])
    return [SWEEP], "\n".join(f"lambda={lam:g}: accuracy {acc:.4f}, mean ||Sigma||_F {nv:.4f}" for lam, acc, nv in rows)


def cmd_reg_effect(v: dict, out: Path):
    _require(v, "train", "val")
    tr, va = load_splits(v["train"], v["val"], v["format"])
    unreg = train([tr], va, _train_config(v, 0.0)).params
    reg = train([tr], va, _train_config(v)).params
    rep = reg_effect_report(unreg, reg, va, v["report_tasks"], v["seed"], v["shots"], v["supports"], v["kind"])
    (out / "reg_effect.json").write_text(codec.dumps(rep), encoding="utf-8")
    u, r = rep["unregularized"], rep["regularized"]
    return ["reg_effect.json"], (
        f"mean ||Sigma||_F {u['mean_var_norm']:.4f} -> {r['mean_var_norm']:.4f}; "
        f"centroid distance {u['centroid_distance']:.4f} -> {r['centroid_distance']:.4f}"
    )


HANDLERS = {
    "gen-data": cmd_gen_data,
    "meta-train": cmd_meta_train,
    "eval": cmd_eval,
    "fit": cmd_fit,
    "classify": cmd_classify,
    "ood": cmd_ood,
    "stability": cmd_stability,
    "lambda-sweep": cmd_lambda_sweep,
    "reg-effect": cmd_reg_effect,
}


def _input_hashes(command: str, values: dict) -> dict:
    return {
        o.dest: sha256_file(values[o.dest])
        for o in COMMANDS[command]["opts"]
        if o.path and values.get(o.dest) and Path(values[o.dest]).is_file()
    }


def run_command(command: str, values: dict, out_dir: str | Path, argv: list[str] | None = None) -> tuple[dict, str]:
    """Execute one command with fully resolved options; writes the manifest and returns it."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    inputs = _input_hashes(command, values)
    start = time.perf_counter()
    outputs, summary = HANDLERS[command](values, out)
    manifest = {
        "command": command,
        "argv": argv if argv is not None else [],
        "config": values,
        "seed": values.get("seed"),
        "inputs": {k: {"path": values[k], "sha256": h} for k, h in inputs.items()},
        "outputs": {name: sha256_file(out / name) for name in outputs},
        "wall_clock_seconds": round(time.perf_counter() - start, 3),
        "version": __version__,
    }
    (out / MANIFEST).write_text(codec.dumps(manifest), encoding="utf-8")
    return manifest, summary


def replay(manifest_path: str | Path, out_dir: str | Path) -> tuple[bool, list[str]]:
    """Re-run a recorded command; returns (all artifacts identical, report lines)."""
    path = Path(manifest_path)
    if not path.exists():
        raise FormatError(f"{path}: file not found")
    m = codec.loads(path.read_text(encoding="utf-8"), str(path))
    if not isinstance(m, dict) or m.get("command") not in HANDLERS or not isinstance(m.get("config"), dict):
        raise FormatError(f"{path}: not a varproto manifest")
    for key, rec in m.get("inputs", {}).items():
        if not Path(rec["path"]).is_file() or sha256_file(rec["path"]) != rec["sha256"]:
            raise FormatError(f"{path}: input {key} ({rec['path']}) is missing or has changed since the recorded run")
    new, _ = run_command(m["command"], m["config"], out_dir, m.get("argv"))
    lines, ok = [], True
    for name, digest in m["outputs"].items():
        same = new["outputs"].get(name) == digest
        ok &= same
        lines.append(f"{'identical' if same else 'DIFFERS'}  {name}")
    return ok, lines


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        if args.command == "replay":
            ok, lines = replay(args.manifest, args.out_dir)
            print("\n".join(lines))
            return 0 if ok else 1
        explicit = {k: v for k, v in vars(args).items() if k not in ("command", "verbose", "out_dir", "config")}
        values = resolve_options(args.command, explicit, args.config)
        _, summary = run_command(args.command, values, args.out_dir, argv)
        print(summary)
        return 0
    except VarProtoError as exc:
        print(f"varproto: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"varproto: error: {exc}", file=sys.stderr)
        return 3
