"""
Command-line entry point.

    python cli.py train  --config cfg.yaml --model out/model.cte [--synthetic 200]
    python cli.py eval   --model out/model.cte [--out metrics.json]
    python cli.py bench  --model out/model.cte --reps 3 [--out latency.json]
    python cli.py pareto --config sweep.yaml --out pareto.csv

Datasets are ``mnist``, ``cifar10`` or a CTED file, read from ``--data-dir``
(falling back to ``$CTE_DATA_DIR``). ``--synthetic N`` replaces the dataset
with N generated images.
"""

import os

# Seeded runs are only reproducible with single-threaded BLAS.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from src.classifier.ensemble import classify_batch_timed, evaluate
from src.classifier.model_io import load_model, save_model
from src.datasets.loaders import LabeledDataset, load_named, split_indices, synthetic_dataset
from src.training.losses import read_soft_labels
from src.training.trainer import train_ensemble
from src.utils.benchmark import ParetoPoint, linear_fit_r2, pareto_frontier, write_pareto_csv
from src.utils.config import TrainConfig, default_data_dir, load_config, load_sweep
from src.utils.errors import CTEError, DatasetFormatError
from src.utils.logging_setup import setup_logging

logger = logging.getLogger(__name__)


def _write_json(record: dict, path: Optional[str]):
    text = json.dumps(record, indent=2)
    print(text)
    if path:
        out = Path(path)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n")
        logger.info("Wrote %s", out)


def _dataset(args, part: str) -> LabeledDataset:
    if args.synthetic:
        seed = args.seed if part == "train" else args.seed + 1
        return synthetic_dataset(args.synthetic, args.synthetic_classes, seed=seed)
    data_dir = Path(args.data_dir) if args.data_dir else default_data_dir()
    return load_named(args.dataset, data_dir, part)


def _train_parts(args, config: TrainConfig, teacher: Optional[np.ndarray]):
    """Training part, optional validation part and the matching soft label rows"""
    train = _dataset(args, "train")
    if teacher is not None and teacher.shape[0] != len(train):
        raise DatasetFormatError(f"{teacher.shape[0]} soft label rows for {len(train)} training images")
    if config.validation_fraction <= 0:
        return train, None, teacher
    part_a, part_b = split_indices(train, 1.0 - config.validation_fraction, config.seed)
    if teacher is not None:
        teacher = teacher[part_a]
    return train.subset(part_a), train.subset(part_b), teacher


def cmd_train(args) -> int:
    config = load_config(args.config)
    if args.seed is None:
        args.seed = config.seed
    config = replace(config, seed=args.seed)
    teacher = read_soft_labels(args.soft_labels)[0] if args.soft_labels else None
    train, validation, teacher = _train_parts(args, config, teacher)

    model_path = Path(args.model)
    log_path = model_path.with_name(model_path.name + ".log.jsonl")
    result = train_ensemble(
        train.images, train.labels, train.class_count, config,
        teacher=teacher, validation=validation, log_path=log_path, progress=not args.quiet,
    )
    save_model(result.ensemble, model_path)
    final = result.history[-1] if result.history else None
    _write_json({
        "schema": "cte-train/1",
        "model": str(model_path),
        "log": str(log_path),
        "tables": result.ensemble.table_count,
        "train_examples": len(train),
        "train_error": final.train_error if final else None,
        "validation_error": final.validation_error if final else None,
        "seed": config.seed,
        "threads": args.threads,
    }, args.out)
    return 0


def cmd_eval(args) -> int:
    ensemble = load_model(args.model)
    dataset = _dataset(args, "test")
    result = evaluate(ensemble, dataset)
    record = {"schema": "cte-eval/1", "model": str(args.model), "dataset": dataset.provenance}
    record.update(result.to_dict())
    _write_json(record, args.out)
    return 0


def cmd_bench(args) -> int:
    ensemble = load_model(args.model)
    dataset = _dataset(args, "test")
    images = dataset.images[:args.limit] if args.limit else dataset.images
    images = np.concatenate([images] * max(args.reps, 1))
    labels, timing = classify_batch_timed(ensemble, images, warmup=args.warmup)
    record = {
        "schema": "cte-bench/1",
        "model": str(args.model),
        "tables": ensemble.table_count,
        "images": int(len(labels)),
        "threads": args.threads,
    }
    record.update(timing.to_dict())
    _write_json(record, args.out)
    return 0


def cmd_pareto(args) -> int:
    points = load_sweep(args.config)
    train = _dataset(args, "train")
    test = _dataset(args, "test")
    results = []
    for sweep_point in points:
        structure = sweep_point.config.structure
        point = ParetoPoint(sweep_point.point_id, structure.table_count, structure.total_bits, structure.shape_tag)
        try:
            trained = train_ensemble(train.images, train.labels, train.class_count, sweep_point.config,
                                     progress=False)
            point.error = evaluate(trained.ensemble, test).error_rate
            images = test.images[:args.limit] if args.limit else test.images
            _, timing = classify_batch_timed(trained.ensemble, np.concatenate([images] * max(args.reps, 1)))
            point.latency_us = timing.voting.median_us
        except Exception as e:
            logger.exception("Sweep point %s failed", sweep_point.point_id)
            point.status = f"failed: {e}"
        results.append(point)
        logger.info("Point %s: error=%.4f latency=%.2fus", point.config_id, point.error, point.latency_us)
    pareto_frontier(results)
    finished = [p for p in results if p.ok]
    r2 = linear_fit_r2([p.table_count for p in finished], [p.latency_us for p in finished])
    if r2 is not None:
        logger.info("Latency against table count: R^2=%.3f over %d points", r2, len(finished))
    write_pareto_csv(results, Path(args.out))
    return 0


def _add_dataset_args(parser: argparse.ArgumentParser):
    parser.add_argument("--dataset", default="mnist", help="mnist, cifar10 or a CTED file")
    parser.add_argument("--data-dir", help="Dataset root (default: $CTE_DATA_DIR)")
    parser.add_argument("--synthetic", type=int, default=0, metavar="N",
                        help="Use N synthetic images instead of a dataset")
    parser.add_argument("--synthetic-classes", type=int, default=2)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Convolutional tables ensemble classifier")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=1, help="Recorded; computation is single-threaded")
    common.add_argument("--out", help="Write the JSON/CSV result here as well")
    common.add_argument("--verbose", action="store_true")
    common.add_argument("--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", parents=[common], help="Train and save a model")
    train.add_argument("--config", help="YAML training configuration")
    train.add_argument("--model", required=True, help="Output model file")
    train.add_argument("--soft-labels", help="Teacher soft label file for the distillation loss")
    _add_dataset_args(train)
    train.set_defaults(handler=cmd_train)

    evaluate_cmd = sub.add_parser("eval", parents=[common], help="Error rate and confusion matrix")
    evaluate_cmd.add_argument("--model", required=True)
    _add_dataset_args(evaluate_cmd)
    evaluate_cmd.set_defaults(handler=cmd_eval)

    bench = sub.add_parser("bench", parents=[common], help="Per-image latency")
    bench.add_argument("--model", required=True)
    bench.add_argument("--reps", type=int, default=1, help="Passes over the images")
    bench.add_argument("--limit", type=int, default=0, help="Use only the first N images")
    bench.add_argument("--warmup", type=int, default=10)
    _add_dataset_args(bench)
    bench.set_defaults(handler=cmd_bench)

    pareto = sub.add_parser("pareto", parents=[common], help="Speed/accuracy sweep")
    pareto.add_argument("--config", required=True, help="YAML sweep specification")
    pareto.add_argument("--reps", type=int, default=1)
    pareto.add_argument("--limit", type=int, default=0)
    _add_dataset_args(pareto)
    pareto.set_defaults(handler=cmd_pareto, out="pareto.csv")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose, args.quiet)
    if args.seed is None and args.command != "train":
        args.seed = 0
    if args.threads != 1:
        logger.warning("Running single-threaded; --threads %d is only recorded", args.threads)
    try:
        return args.handler(args)
    except CTEError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception:
        logger.exception("Unexpected failure")
        return 1


if __name__ == "__main__":
    sys.exit(main())
