"""Command-line entry points: train, eval, ablate, dump-prototypes.

Exit codes: 0 success, 2 configuration error, 3 data or checkpoint error,
4 numeric failure (non-finite loss).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import checkpoint
from .config import ConfigError, DataConfig, load_config, load_datasets, parse_grid
from .data import DataError
from .trainer import NumericError, ablation_suite, evaluate, prototype_rows, train

logger = logging.getLogger("vsm")

METRICS_SCHEMA = 1
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _metrics_line(row, kind: str) -> str:
    record = {"schema": METRICS_SCHEMA, "kind": kind}
    record.update(row.to_dict())
    return json.dumps(record, sort_keys=True)


def cmd_train(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config.train = dataclasses.replace(config.train, seed=args.seed)
    datasets = load_datasets(config.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"
    with metrics_path.open("w", encoding="utf-8") as fh:
        def log_row(row):
            fh.write(_metrics_line(row, "eval") + "\n")
            fh.flush()

        learner, _ = train(config.train, datasets, config.network_config(), on_metrics=log_row)
        test = datasets.get("test")
        if test is not None and len(test) >= config.train.way:
            row = evaluate(learner, test)
            fh.write(_metrics_line(row, "test") + "\n")
            print(f"test accuracy {row.accuracy:.4f} +- {row.ci95:.4f} ({row.n_episodes} episodes)")
    arrays, meta = checkpoint.learner_state(learner)
    meta["data"] = dataclasses.asdict(config.data)
    checkpoint.save(out / "checkpoint.vsmc", arrays, meta)
    print(f"wrote {out / 'checkpoint.vsmc'} and {metrics_path}")
    return EXIT_OK


def _load_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise checkpoint.CheckpointError(f"checkpoint not found: {path}")
    arrays, meta = checkpoint.load(path)
    learner = checkpoint.restore_learner(arrays, meta)
    data = meta.get("data") if meta else None
    return learner, data


def _datasets_for(args, data_meta):
    if getattr(args, "config", None):
        return load_datasets(load_config(args.config).data)
    if data_meta is None:
        raise ConfigError("checkpoint carries no data settings; pass --config")
    try:
        return load_datasets(DataConfig(**data_meta))
    except TypeError as exc:
        raise checkpoint.CheckpointError(f"checkpoint data settings are invalid: {exc}") from exc


def cmd_eval(args) -> int:
    learner, data_meta = _load_checkpoint(args.checkpoint)
    datasets = _datasets_for(args, data_meta)
    split = datasets.get(args.split)
    if split is None or len(split) == 0:
        raise DataError(f"{args.split} split is empty")
    n = args.episodes if args.episodes is not None else learner.config.eval_episodes
    row = evaluate(learner, split, n)
    flag = " (single episode: interval degenerate)" if row.degenerate_interval else ""
    print(f"{args.split} accuracy {row.accuracy:.4f} +- {row.ci95:.4f} ({n} episodes){flag}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    grid = parse_grid(args.grid)
    try:
        shots = [int(s) for s in args.shots.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"--shots must be comma-separated integers: {exc}") from exc
    if not shots:
        raise ConfigError("--shots is empty")
    config = load_config(args.config)
    datasets = load_datasets(config.data)
    try:
        rows = ablation_suite(config.train, datasets, grid, shots, config.network_config())
    except ValueError as exc:
        if isinstance(exc, (DataError, NumericError)):
            raise
        raise ConfigError(str(exc)) from exc
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    columns = list(rows[0])
    with out.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {len(rows)} rows to {out}")
    return EXIT_OK


def cmd_dump_prototypes(args) -> int:
    learner, data_meta = _load_checkpoint(args.checkpoint)
    datasets = _datasets_for(args, data_meta)
    split = datasets.get(args.split)
    if split is None or len(split) == 0:
        raise DataError(f"{args.split} split is empty")
    d = learner.nets.dim
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with out.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode", "class_id", "kind", "sample_index"] + [f"f{i}" for i in range(d)])
        for episode, class_id, kind, index, vector in prototype_rows(learner, split, args.episodes, args.seed):
            writer.writerow([episode, class_id, kind, index] + [repr(float(v)) for v in vector])
            count += 1
    print(f"wrote {count} prototype rows to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vsm", description="Few-shot learning with variational semantic memory")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="meta-train from a TOML config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override [train] seed")
    p.add_argument("--out", default="run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint with the memory frozen")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["val", "test"], default="test")
    p.add_argument("--episodes", type=int, default=None, help="default: the checkpoint's eval_episodes (600)")
    p.add_argument("--config", default=None, help="take data settings from this config instead")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate a grid of variants")
    p.add_argument("--config", required=True)
    p.add_argument("--grid", required=True, help='e.g. "mode=protonet,vpn,vsm" or "alpha=0:1:0.1"')
    p.add_argument("--shots", default="1,5")
    p.add_argument("--out", default="ablation.csv")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dump-prototypes", help="write sampled and mean prototypes to CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_dump_prototypes)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, checkpoint.CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
