"""Command-line interface: train, eval, kfold, inspect.

Progress goes to stderr; results go to stdout and files under the run's
output directory.  Exit codes: 0 success, 1 runtime failure, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .config import RunConfig, load_run_config, write_manifest
from .data import (
    CIFAR10_TRAIN_FILES,
    load_cifar10,
    load_image_folder,
    make_fold_plan,
    split_cifar10,
    stratified_split,
)
from .errors import FormatError, TrainingError, ValidationError
from .model import UnionNet, model_report
from .train import (
    evaluate,
    format_report,
    load_checkpoint,
    run_kfold,
    train,
    write_report,
)


def _log(message: str) -> None:
    print(message, file=sys.stderr, flush=True)


def _load_dataset(cfg: RunConfig):
    """Returns (train_dataset, split, eval_dataset, eval_indices, class_names)."""
    if cfg.dataset == "cifar10":
        train_set, test_set = load_cifar10(cfg.data_dir)
        split = split_cifar10(train_set, cfg.seed)
        return train_set, split, test_set, np.arange(len(test_set)), None
    dataset = load_image_folder(cfg.data_dir, cfg.input_size)
    if dataset.num_classes != cfg.num_classes:
        raise ValidationError(
            f"field num_classes: config says {cfg.num_classes} but "
            f"{cfg.data_dir} has {dataset.num_classes} class directories"
        )
    split = stratified_split(dataset, cfg.val_fraction, cfg.seed)
    return dataset, split, dataset, split.val, dataset.class_names


def cmd_train(args) -> int:
    try:
        cfg = load_run_config(args.config, seed_override=args.seed, data_override=args.data)
        if not os.path.isdir(cfg.data_dir):
            raise ValidationError(f"field data_dir: {cfg.data_dir} does not exist")
        resume = None
        if args.checkpoint:
            resume = load_checkpoint(args.checkpoint)
            if resume.net.width != cfg.width or resume.net.num_classes != cfg.num_classes:
                raise ValidationError(
                    f"field width/num_classes: checkpoint is width "
                    f"{resume.net.width} x {resume.net.num_classes} classes, config says "
                    f"{cfg.width} x {cfg.num_classes}"
                )
    except (ValidationError, FormatError, OSError) as exc:
        _log(f"config error: {exc}")
        return 2
    try:
        dataset, split, eval_set, eval_idx, class_names = _load_dataset(cfg)
        os.makedirs(cfg.out_dir, exist_ok=True)
        write_manifest(cfg, os.path.join(cfg.out_dir, "manifest.txt"))
        net = UnionNet.create(cfg.width, cfg.num_classes, seed=cfg.seed)
        result = train(
            net,
            dataset,
            split,
            cfg.nadam_config(),
            cfg.plateau_config(),
            cfg.epochs,
            cfg.seed,
            cfg.out_dir,
            batch_size=cfg.batch_size,
            augment_policy=cfg.augment,
            resume=resume,
            log=_log,
        )
        best = load_checkpoint(result.best_path)
        final = evaluate(best.net, eval_set, eval_idx, best.means, cfg.batch_size)
        write_report(
            final.metrics,
            os.path.join(cfg.out_dir, "report.txt"),
            os.path.join(cfg.out_dir, "report.json"),
            class_names,
        )
        print(format_report(final.metrics, class_names), end="")
        print(f"best epoch: {result.best_epoch}  held-out accuracy: {final.metrics.accuracy:.4f}")
        return 0
    except (ValidationError, FormatError, TrainingError, OSError) as exc:
        _log(f"error: {exc}")
        return 1


def cmd_eval(args) -> int:
    try:
        input_size = 64
        if args.config:
            input_size = load_run_config(args.config, data_override=args.data).input_size
        if not os.path.isdir(args.data):
            raise ValidationError(f"field data: {args.data} does not exist")
    except (ValidationError, FormatError, OSError) as exc:
        _log(f"config error: {exc}")
        return 2
    try:
        ckpt = load_checkpoint(args.checkpoint)
    except (FormatError, OSError) as exc:
        _log(f"error: {exc}")
        return 1
    try:
        if os.path.exists(os.path.join(args.data, CIFAR10_TRAIN_FILES[0])):
            _, test_set = load_cifar10(args.data)
            dataset, indices, class_names = test_set, np.arange(len(test_set)), None
        else:
            dataset = load_image_folder(args.data, input_size)
            indices, class_names = np.arange(len(dataset)), dataset.class_names
        if dataset.num_classes != ckpt.net.num_classes:
            _log(
                f"config error: checkpoint has {ckpt.net.num_classes} classes, "
                f"dataset has {dataset.num_classes}"
            )
            return 2
        result = evaluate(ckpt.net, dataset, indices, ckpt.means)
        print(format_report(result.metrics, class_names), end="")
        print(f"accuracy: {result.metrics.accuracy:.4f}")
        return 0
    except (ValidationError, FormatError, OSError) as exc:
        _log(f"error: {exc}")
        return 1


def cmd_kfold(args) -> int:
    try:
        cfg = load_run_config(args.config, seed_override=args.seed, data_override=args.data)
        if cfg.dataset != "image-folder":
            raise ValidationError(
                f"field dataset: kfold requires image-folder, got {cfg.dataset!r}"
            )
        if not os.path.isdir(cfg.data_dir):
            raise ValidationError(f"field data_dir: {cfg.data_dir} does not exist")
        dataset = load_image_folder(cfg.data_dir, cfg.input_size)
        if dataset.num_classes != cfg.num_classes:
            raise ValidationError(
                f"field num_classes: config says {cfg.num_classes} but "
                f"{cfg.data_dir} has {dataset.num_classes} class directories"
            )
        plan = make_fold_plan(dataset, cfg.seed)
    except (ValidationError, FormatError, OSError) as exc:
        _log(f"config error: {exc}")
        return 2
    try:
        os.makedirs(cfg.out_dir, exist_ok=True)
        write_manifest(cfg, os.path.join(cfg.out_dir, "manifest.txt"))
        with open(os.path.join(cfg.out_dir, "folds.txt"), "w", encoding="utf-8") as fh:
            for fold in range(plan.num_folds):
                val = (fold + 1) % plan.num_folds
                rest = ",".join(
                    f"D{j}" for j in range(plan.num_folds) if j not in (fold, val)
                )
                fh.write(f"fold {fold}: test=D{fold} val=D{val} train={rest}\n")
        result = run_kfold(
            dataset,
            plan,
            cfg.width,
            cfg.nadam_config(),
            cfg.plateau_config(),
            cfg.epochs,
            cfg.seed,
            cfg.out_dir,
            batch_size=cfg.batch_size,
            augment_policy=cfg.augment,
            jobs=args.jobs,
            log=_log,
        )
        lines = [
            f"fold {i}: accuracy={acc:.4f}" for i, acc in enumerate(result.fold_accuracies)
        ]
        lines.append(
            f"mean accuracy over {len(result.fold_accuracies)} folds: "
            f"{result.mean_accuracy:.4f}"
        )
        summary = "\n".join(lines) + "\n"
        with open(os.path.join(cfg.out_dir, "summary.txt"), "w", encoding="utf-8") as fh:
            fh.write(summary)
        write_report(
            result.aggregate_metrics,
            os.path.join(cfg.out_dir, "report.txt"),
            os.path.join(cfg.out_dir, "report.json"),
            dataset.class_names,
        )
        print(summary, end="")
        return 0
    except (ValidationError, FormatError, TrainingError, OSError) as exc:
        _log(f"error: {exc}")
        return 1


def cmd_inspect(args) -> int:
    try:
        cfg = load_run_config(args.config, seed_override=args.seed, data_override=args.data)
    except (ValidationError, FormatError, OSError) as exc:
        _log(f"config error: {exc}")
        return 2
    net = UnionNet.create(cfg.width, cfg.num_classes, seed=cfg.seed)
    report = model_report(net)
    print(f"parameters: {report.parameter_count}")
    print(f"serialized size: {report.serialized_size_bytes} bytes")
    print(f"composite depth: {report.composite_depth}")
    print(f"physical convolutions: {report.physical_conv_count}")
    print("receptive fields: " + ",".join(str(r) for r in report.receptive_fields))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unionnet",
        description="Train and evaluate the multi-branch additive-fusion CNN",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, func, needs in (
        ("train", cmd_train, ("config", "checkpoint", "data", "seed")),
        ("eval", cmd_eval, ("config", "checkpoint", "data")),
        ("kfold", cmd_kfold, ("config", "data", "jobs", "seed")),
        ("inspect", cmd_inspect, ("config", "data", "seed")),
    ):
        cmd = sub.add_parser(name)
        if "config" in needs:
            required = name not in ("eval",)
            cmd.add_argument("--config", required=required, help="run configuration file")
        if "checkpoint" in needs:
            required = name == "eval"
            cmd.add_argument(
                "--checkpoint", required=required,
                help="checkpoint to evaluate or resume from",
            )
        if "data" in needs:
            cmd.add_argument(
                "--data", required=name == "eval", help="dataset path (overrides config)"
            )
        if "jobs" in needs:
            cmd.add_argument("--jobs", type=int, default=1, help="parallel fold workers")
        if "seed" in needs:
            cmd.add_argument("--seed", type=int, help="seed (overrides config)")
        cmd.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "seed", None) is not None and args.seed < 0:
        _log("config error: field seed: must be >= 0")
        return 2
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
