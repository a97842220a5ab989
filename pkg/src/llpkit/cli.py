"""Command-line pipeline: preprocess, bag, pretrain, finetune, evaluate, report.

Configuration is a flat ``key = value`` text file; ``--set key=value`` flags
override file entries, unknown keys are rejected, and all paths are checked
before any compute starts. Every output artifact embeds the sha256
fingerprint of the resolved configuration, so identical inputs and seeds
reproduce identical artifacts byte for byte.

Multi-seed repetitions (``--seeds 0,1,2``) write per-seed subdirectories;
``--jobs N`` runs the repetitions in parallel processes (each repetition is
fully independent).
"""

from __future__ import annotations

import argparse
import concurrent.futures
import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import trainer as trainer_mod
from .bagops import AggregatorConfig
from .data import SplitIndices, TabularDataset
from .encoder import EncoderConfig, load_arrays, save_arrays
from .losses import LossConfig
from .metrics import MetricsReport
from .trainer import Checkpoint, Model, TrainConfig

# key -> (parser, default); the single source of accepted config keys
_BOOL = {"true": True, "false": False}
CONFIG_KEYS = {
    "csv": (str, None),
    "label_column": (str, "label"),
    "columns": (str, None),  # "name:kind,name:kind,..."
    "output_dir": (str, "out"),
    "seed": (int, 0),
    "bag_size": (int, 64),
    "bag_strategy": (str, "ordered"),
    "method": (str, "bdc"),
    "pretrain": (str, "auto"),  # auto | none
    "pretrain_epochs": (int, 50),
    "finetune_epochs": (int, 300),
    "early_stop_patience": (int, 20),
    "validation_mode": (str, "fine"),
    "coarse_metric": (str, "mpiou"),
    "learning_rate": (float, 1e-3),
    "augmentation": (str, "mixup-cutmix"),
    "p_keep_cell": (float, 0.7),
    "mixup_weight": (float, 0.7),
    "temperature": (float, 0.5),
    "margin": (float, 0.0),
    "kappa": (float, 1.0),
    "alpha": (float, 1.0),
    "beta": (float, 1.0),
    "aggregator": (str, "weighted-sum-cosine"),
    "use_projection": (lambda s: _BOOL[s.lower()], False),
    "d_embed": (int, 8),
    "d_hidden": (int, 128),
    "d_rep": (int, 64),
    "d_cls": (int, 16),
    "d_proj": (int, 32),
}


class CliError(Exception):
    """User-facing configuration or input failure (exit code 1)."""


def parse_config_text(text, source="<config>"):
    """Flat ``key = value`` lines; '#' comments and blank lines ignored."""
    values = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{source}:{line_no}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise CliError(f"{source}:{line_no}: unknown config key {key!r}")
        values[key] = value
    return values


@dataclass
class ExperimentConfig:
    """Resolved, typed configuration for one experiment."""

    values: dict

    def __getattr__(self, key):
        try:
            return self.values[key]
        except KeyError:
            raise AttributeError(key) from None

    def fingerprint(self):
        flat = "\n".join(f"{k} = {self.values[k]}" for k in sorted(self.values))
        return hashlib.sha256(flat.encode("utf-8")).hexdigest()[:16]

    def train_config(self):
        v = self.values
        return TrainConfig(
            bag_size=v["bag_size"],
            pretrain_epochs=v["pretrain_epochs"],
            finetune_epochs=v["finetune_epochs"],
            early_stop_patience=v["early_stop_patience"],
            validation_mode=v["validation_mode"],
            coarse_metric=v["coarse_metric"],
            learning_rate=v["learning_rate"],
            seed=v["seed"],
            method=v["method"],
            augmentation=v["augmentation"],
            bag_strategy=v["bag_strategy"],
            p_keep_cell=v["p_keep_cell"],
            mixup_weight=v["mixup_weight"],
            loss=LossConfig(
                temperature=v["temperature"],
                margin=v["margin"],
                kappa=v["kappa"],
                alpha=v["alpha"],
                beta=v["beta"],
                total_epochs=v["finetune_epochs"],
            ),
            aggregator=AggregatorConfig(
                variant=v["aggregator"], use_projection=v["use_projection"]
            ),
            encoder=EncoderConfig(
                d_embed=v["d_embed"],
                d_hidden=v["d_hidden"],
                d_rep=v["d_rep"],
                d_cls=v["d_cls"],
                d_proj=v["d_proj"],
            ),
        )


def resolve_config(config_path, overrides):
    """Merge file keys and overrides onto defaults; parse and validate."""
    raw = {}
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise CliError(f"config file not found: {path}")
        raw.update(parse_config_text(path.read_text(encoding="utf-8"), str(path)))
    for item in overrides or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        if key not in CONFIG_KEYS:
            raise CliError(f"--set: unknown config key {key!r}")
        raw[key] = value

    resolved = {}
    for key, (parse, default) in CONFIG_KEYS.items():
        if key in raw:
            try:
                resolved[key] = parse(raw[key])
            except (ValueError, KeyError):
                raise CliError(f"config key {key!r}: cannot parse {raw[key]!r}") from None
        else:
            resolved[key] = default
    return ExperimentConfig(values=resolved)


def _parse_columns(spec):
    if not spec:
        raise CliError("config key 'columns' is required (name:kind,...)")
    declaration = {}
    for item in spec.split(","):
        if ":" not in item:
            raise CliError(f"columns entry {item!r} is not name:kind")
        name, kind = (part.strip() for part in item.split(":", 1))
        if kind not in ("numeric", "categorical"):
            raise CliError(f"column {name!r}: unknown kind {kind!r}")
        declaration[name] = kind
    return declaration


# ---------------------------------------------------------------------------
# Dataset file round trip (deterministic binary container)
# ---------------------------------------------------------------------------

def save_dataset(path, dataset, split):
    schema_meta = [
        {
            "name": c.name,
            "kind": c.kind,
            "cardinality": c.cardinality,
            "mean": c.mean,
            "std": c.std,
            "levels": c.levels,
        }
        for c in dataset.schema
    ]
    save_arrays(
        path,
        {
            "rows": dataset.rows,
            "missing": dataset.missing.astype(np.float64),
            "labels": dataset.read_labels().astype(np.float64),
            "split_train": split.train.astype(np.float64),
            "split_test": split.test.astype(np.float64),
            "split_val": split.val.astype(np.float64),
        },
        meta={
            "schema": schema_meta,
            "n_classes": dataset.n_classes,
            "label_levels": dataset.label_levels,
        },
    )


def load_dataset(path):
    arrays, meta = load_arrays(path)
    schema = [
        data_mod.ColumnSchema(
            name=c["name"],
            kind=c["kind"],
            cardinality=c["cardinality"],
            mean=c["mean"],
            std=c["std"],
            levels=c["levels"],
        )
        for c in meta["schema"]
    ]
    dataset = TabularDataset(
        schema=schema,
        rows=arrays["rows"],
        missing=arrays["missing"].astype(bool),
        labels=arrays["labels"].astype(np.int64),
        n_classes=meta["n_classes"],
        label_levels=meta["label_levels"],
    )
    split = SplitIndices(
        train=arrays["split_train"].astype(np.int64),
        test=arrays["split_test"].astype(np.int64),
        val=arrays["split_val"].astype(np.int64),
    )
    return dataset, split


def _write_log(path, records, fingerprint):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"config_fingerprint": fingerprint}) + "\n")
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_preprocess(config):
    if config.csv is None:
        raise CliError("config key 'csv' is required")
    csv_path = Path(config.csv)
    if not csv_path.exists():
        raise CliError(f"input file not found: {csv_path}")
    declaration = _parse_columns(config.columns)
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    raw = data_mod.ingest_csv(csv_path, declaration, config.label_column)
    split = data_mod.split(raw, seed=config.seed)
    dataset = data_mod.preprocess(raw, split.train)
    save_dataset(out_dir / "dataset.bin", dataset, split)

    lines = [f"config_fingerprint: {config.fingerprint()}", f"rows: {dataset.n_rows}"]
    lines.append(f"classes: {dataset.n_classes}")
    for k, col in enumerate(dataset.schema):
        n_missing = int(dataset.missing[:, k].sum())
        if col.kind == "numeric":
            detail = f"mean={col.mean:.6g} std={col.std:.6g}"
        else:
            detail = f"levels={col.cardinality}"
        lines.append(f"column {col.name}: {col.kind} {detail} missing={n_missing}")
    report = "\n".join(lines) + "\n"
    (out_dir / "schema_report.txt").write_text(report, encoding="utf-8")
    print(report, end="")
    return 0


def cmd_bag(config):
    out_dir = Path(config.output_dir)
    dataset_path = out_dir / "dataset.bin"
    if not dataset_path.exists():
        raise CliError(f"run preprocess first: {dataset_path} not found")
    dataset, split = load_dataset(dataset_path)
    fingerprint = config.fingerprint()
    for name, indices in (("train", split.train), ("test", split.test), ("val", split.val)):
        size = config.bag_size
        if name != "train" and size > len(indices):
            # holdout splits are a fraction of the data; shrink rather than fail
            size = len(indices)
            print(f"note: {name} split has {len(indices)} rows; using one bag of {size}")
        bags = data_mod.make_bags(
            dataset, indices, size, strategy=config.bag_strategy, seed=config.seed
        )
        data_mod.write_bags(out_dir / f"bags_{name}.jsonl", bags, fingerprint)
        print(f"{name}: {len(bags)} bags of {size}")
    return 0


def _load_world(config):
    out_dir = Path(config.output_dir)
    dataset_path = out_dir / "dataset.bin"
    if not dataset_path.exists():
        raise CliError(f"run preprocess first: {dataset_path} not found")
    dataset, split = load_dataset(dataset_path)
    bags = {}
    for name in ("train", "test", "val"):
        path = out_dir / f"bags_{name}.jsonl"
        if not path.exists():
            raise CliError(f"run bag first: {path} not found")
        bags[name] = data_mod.read_bags(path)
    return out_dir, dataset, split, bags


def cmd_pretrain(config):
    out_dir, dataset, _, bags = _load_world(config)
    if config.pretrain == "none":
        print("pretrain = none: skipping")
        return 0
    checkpoint, logs = trainer_mod.pretrain(dataset, bags["train"], config.train_config())
    checkpoint.save(out_dir / "pretrain.ckpt")
    _write_log(out_dir / "pretrain_log.jsonl", logs, config.fingerprint())
    print(f"pretrained {config.pretrain_epochs} epochs -> {out_dir / 'pretrain.ckpt'}")
    return 0


def cmd_finetune(config):
    out_dir, dataset, split, bags = _load_world(config)
    init = None
    pre_path = out_dir / "pretrain.ckpt"
    if config.pretrain != "none" and pre_path.exists():
        init = Checkpoint.load(pre_path)
    checkpoint, logs = trainer_mod.finetune(
        dataset,
        bags["train"],
        config.train_config(),
        init_checkpoint=init,
        val_indices=split.val,
        val_bags=bags["val"],
    )
    checkpoint.save(out_dir / "model.ckpt")
    _write_log(out_dir / "finetune_log.jsonl", logs, config.fingerprint())
    print(f"best epoch {checkpoint.epoch}, validation score {checkpoint.best_score:.6f}")
    return 0


def cmd_evaluate(config):
    out_dir, dataset, split, bags = _load_world(config)
    model_path = out_dir / "model.ckpt"
    if not model_path.exists():
        raise CliError(f"run finetune first: {model_path} not found")
    checkpoint = Checkpoint.load(model_path)
    train_config = config.train_config()
    model = Model(dataset.schema, dataset.n_classes, train_config)
    model.load_state(checkpoint.arrays)
    mode = "fine" if config.validation_mode == "fine" else "coarse"
    report = trainer_mod.evaluate(
        model,
        dataset,
        split.test,
        mode,
        test_bags=bags["test"],
        val_bags=bags["val"],
        config=train_config,
    )
    report.write_records(
        out_dir / "report.jsonl", header={"config_fingerprint": config.fingerprint()}
    )
    text = f"config_fingerprint: {config.fingerprint()}\n" + report.to_text_table()
    (out_dir / "report.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_report(config, seed_dirs=None):
    """Aggregate per-seed reports into one summary table."""
    base = Path(config.output_dir)
    dirs = [Path(d) for d in seed_dirs] if seed_dirs else sorted(base.glob("seed_*"))
    if not dirs:
        dirs = [base]
    rows = []
    for directory in dirs:
        path = directory / "report.jsonl"
        if not path.exists():
            raise CliError(f"no report found in {directory}")
        report = MetricsReport.read_records(path)
        rows.append((directory.name, report.scalars))
    metrics = sorted({k for _, scalars in rows for k in scalars})
    header = "run".ljust(16) + "  " + "  ".join(m.ljust(12) for m in metrics)
    lines = [header, "-" * len(header)]
    for name, scalars in rows:
        cells = [
            (f"{scalars[m]:.6f}" if m in scalars else "-").ljust(12) for m in metrics
        ]
        lines.append(name.ljust(16) + "  " + "  ".join(cells))
    if len(rows) > 1:
        medians = []
        for m in metrics:
            values = [s[m] for _, s in rows if m in s]
            medians.append(f"{np.median(values):.6f}".ljust(12) if values else "-".ljust(12))
        lines.append("median".ljust(16) + "  " + "  ".join(medians))
    text = "\n".join(lines) + "\n"
    print(text, end="")
    (base / "summary.txt").write_text(text, encoding="utf-8")
    return 0


# ---------------------------------------------------------------------------
# Multi-seed driver
# ---------------------------------------------------------------------------

_SEED_STEPS = {
    "preprocess": cmd_preprocess,
    "bag": cmd_bag,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
}


def _run_one_seed(args):
    command, values = args
    config = ExperimentConfig(values=values)
    return _SEED_STEPS[command](config)


def _expand_seeds(config, command, seeds, jobs):
    """Run one command per seed in seed_<k>/ subdirectories."""
    base = Path(config.output_dir)
    tasks = []
    for seed in seeds:
        values = dict(config.values)
        values["seed"] = seed
        values["output_dir"] = str(base / f"seed_{seed}")
        tasks.append((command, values))
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            for code in pool.map(_run_one_seed, tasks):
                if code != 0:
                    return code
        return 0
    for task in tasks:
        code = _run_one_seed(task)
        if code != 0:
            return code
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="llpkit",
        description="Learning from label proportions on tabular data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("preprocess", "bag", "pretrain", "finetune", "evaluate", "report"):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="flat key = value config file")
        p.add_argument(
            "--set",
            action="append",
            dest="overrides",
            metavar="KEY=VALUE",
            help="override a config key (repeatable)",
        )
        if name != "report":
            p.add_argument("--seeds", default=None,
                           help="comma-separated seeds for independent repetitions")
            p.add_argument("--jobs", type=int, default=1,
                           help="parallel processes for seed repetitions")
        else:
            p.add_argument("--runs", nargs="*", default=None,
                           help="explicit run directories to aggregate")

    args = parser.parse_args(argv)
    try:
        config = resolve_config(args.config, args.overrides)
        if args.command == "report":
            return cmd_report(config, seed_dirs=args.runs)
        if args.seeds:
            seeds = [int(s) for s in args.seeds.split(",")]
            return _expand_seeds(config, args.command, seeds, args.jobs)
        return _SEED_STEPS[args.command](config)
    except (CliError, ValueError, RuntimeError, OSError) as exc:
        print(f"llpkit {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
