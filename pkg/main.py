import argparse
import hashlib
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

from pydantic import ValidationError

from core.network import build_network, count_parameters
from errors import DataNotFoundError, ParseError, RotUnrollError
from models import DATASET_NAMES, MODEL_NAMES, TrainConfig
from services.checkpoint_service import load_checkpoint, save_checkpoint
from services.dataset_service import DatasetService
from services.filter_export_service import FilterExportService
from services.training_service import TrainingService, write_metrics_csv
from settings import get_settings, read_config_file

logger = logging.getLogger("rotunroll")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_DATA_MISSING = 3
EXIT_PARSE = 4

# train flag dest -> TrainConfig field
TRAIN_FLAGS: Dict[str, str] = {
    "model": "model",
    "dataset": "dataset",
    "data_dir": "data_dir",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "lr": "learning_rate",
    "seed": "seed",
    "optimizer": "optimizer",
    "momentum": "momentum",
    "eval_dataset": "eval_dataset",
    "train_limit": "train_limit",
    "test_limit": "test_limit",
    "tied": "tied",
    "bn_in_recurrence": "bn_in_recurrence",
    "lam": "lam",
    "alpha": "alpha",
    "layers": "num_layers",
    "acceleration": "acceleration",
    "threshold_mode": "threshold_mode",
    "init_gain": "init_gain",
    "power_iterations": "power_iterations",
    "allow_dead_start": "allow_dead_start",
}
CONFIG_KEYS = set(TrainConfig.model_fields) | set(TRAIN_FLAGS)


class UsageError(RotUnrollError, ValueError):
    pass


def _add_train_parser(commands) -> None:
    p = commands.add_parser("train", help="train a model and write a checkpoint plus a metrics CSV")
    p.add_argument("--model", type=str.lower, choices=MODEL_NAMES)
    p.add_argument("--dataset", type=str.lower, choices=DATASET_NAMES)
    p.add_argument("--data-dir", type=Path)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--seed", type=int)
    p.add_argument("--optimizer", choices=["adam", "sgd-momentum"])
    p.add_argument("--momentum", type=float, help="sgd-momentum coefficient")
    p.add_argument("--eval-dataset", type=str.lower, choices=DATASET_NAMES, help="dataset for the per-epoch test accuracy")
    p.add_argument("--train-limit", type=int, help="use only the first N training images")
    p.add_argument("--test-limit", type=int, help="use only the first N test images")
    p.add_argument("--tied", action="store_true", default=None, help="share one filter bank across all layers")
    p.add_argument(
        "--bn-tap-off", dest="bn_in_recurrence", action="store_false", default=None,
        help="keep batch norm out of the recurrence",
    )
    p.add_argument("--lam", type=float, help="soft-threshold level")
    p.add_argument("--alpha", type=float, help="gradient step size")
    p.add_argument("--layers", type=int, help="number of unrolled layers")
    p.add_argument("--acceleration", choices=["ista", "fista"])
    p.add_argument("--threshold-mode", choices=["literal", "scaled"])
    p.add_argument("--init-gain", type=float)
    p.add_argument("--power-iterations", type=int)
    p.add_argument(
        "--allow-dead-start", action="store_true", default=None,
        help="keep training when every first-layer code starts at zero",
    )
    p.add_argument("--config", type=Path, help="key = value file; flags take precedence")
    p.add_argument("--resume", type=Path, help="continue from this checkpoint")
    p.add_argument("--out", type=Path, help="checkpoint path")
    p.add_argument("--metrics", type=Path, help="metrics CSV path (default: next to the checkpoint)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rotunroll",
        description="Rotation-equivariant unrolled sparse-coding networks",
    )
    commands = parser.add_subparsers(dest="command", required=True)
    _add_train_parser(commands)

    p = commands.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=str.lower, choices=DATASET_NAMES, help="defaults to the training dataset")
    p.add_argument("--data-dir", type=Path)
    p.add_argument("--dataset-file", type=Path, help="evaluate on a saved dataset container instead")
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--limit", type=int, help="use only the first N images")
    p.add_argument("--seed", type=int, default=0, help="rot-MNIST generation seed")

    p = commands.add_parser("export-filters", help="write the expanded filters of one layer as a PGM/PPM grid")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = commands.add_parser("gen-rotmnist", help="generate a seeded rotated-MNIST dataset file")
    p.add_argument("--data-dir", type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--limit", type=int, help="rotate only the first N images")
    p.add_argument("--out", type=Path, required=True)

    p = commands.add_parser("param-count", help="print the learnable-parameter breakdown")
    p.add_argument("--model", type=str.lower, choices=MODEL_NAMES, required=True)
    p.add_argument("--dataset", type=str.lower, choices=DATASET_NAMES, default="cifar10")
    return parser


def resolve_train_config(args: argparse.Namespace) -> TrainConfig:
    """CLI flag > --config file > environment > defaults"""
    values: Dict[str, object] = {"data_dir": get_settings().data_dir}
    if args.config is not None:
        for key, value in read_config_file(args.config).items():
            if key not in CONFIG_KEYS:
                raise UsageError(f"unknown key {key!r} in {args.config}")
            values[TRAIN_FLAGS.get(key, key)] = value
    for flag, target in TRAIN_FLAGS.items():
        value = getattr(args, flag)
        if value is not None:
            values[target] = value
    for required in ("model", "dataset"):
        if required not in values:
            raise UsageError(f"--{required} is required (flag or config file)")
    return TrainConfig.model_validate(values)


def cmd_train(args: argparse.Namespace) -> int:
    """Обучить модель и сохранить чекпоинт"""
    cfg = resolve_train_config(args)
    out = args.out or get_settings().output_dir / f"{cfg.model}-{cfg.dataset}-s{cfg.seed}.runl"
    resume = load_checkpoint(args.resume).as_training_state() if args.resume is not None else None

    result = TrainingService().train(cfg, resume=resume)
    save_checkpoint(result.network, out, cfg, result.epoch, result.rng, result.optimizer)
    metrics_path = args.metrics or out.with_suffix(".csv")
    write_metrics_csv(result.metrics, metrics_path)

    print(f"checkpoint: {out}")
    print(f"metrics: {metrics_path}")
    if result.metrics:
        last = result.metrics[-1]
        print(f"epoch {last.epoch}: train acc {last.train_acc:.4f}, test acc {last.test_acc:.4f}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    """Оценить чекпоинт на выборке"""
    checkpoint = load_checkpoint(args.checkpoint)
    if args.dataset_file is not None:
        dataset = DatasetService.load_dataset(args.dataset_file)
    else:
        service = DatasetService(args.data_dir or get_settings().data_dir)
        dataset = service.load(args.dataset or checkpoint.config.dataset, args.split, args.seed)
    result = TrainingService.evaluate(checkpoint.network, dataset.head(args.limit))
    print(f"accuracy: {result.accuracy:.4f}")
    print(f"loss: {result.mean_loss:.4f}")
    print(f"sparsity: {result.mean_sparsity:.4f}")
    return EXIT_OK


def cmd_export_filters(args: argparse.Namespace) -> int:
    """Экспортировать фильтры слоя"""
    checkpoint = load_checkpoint(args.checkpoint)
    path = FilterExportService().export(checkpoint.network, args.layer, args.out)
    print(path)
    return EXIT_OK


def cmd_gen_rotmnist(args: argparse.Namespace) -> int:
    """Сгенерировать повёрнутый MNIST"""
    service = DatasetService(args.data_dir or get_settings().data_dir)
    dataset = service.load_rot_mnist(args.split, args.seed, args.limit)
    service.save_dataset(dataset, args.out)
    digest = hashlib.sha256(args.out.read_bytes()).hexdigest()
    print(f"wrote {len(dataset)} images to {args.out} (sha256 {digest})")
    return EXIT_OK


def cmd_param_count(args: argparse.Namespace) -> int:
    """Вывести разбивку параметров"""
    breakdown = count_parameters(build_network(args.model, args.dataset))
    print(f"model: {args.model} ({args.dataset})")
    print(f"filters: {breakdown.filters}")
    print(f"batchnorm: {breakdown.batchnorm}")
    print(f"head: {breakdown.head}")
    print(f"total: {breakdown.total}")
    if breakdown.reported_total is not None:
        print(f"reported total: {breakdown.reported_total}")
        if breakdown.reported_total != breakdown.total:
            print(f"difference: {breakdown.reported_total - breakdown.total} (reported - counted)")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "export-filters": cmd_export_filters,
    "gen-rotmnist": cmd_gen_rotmnist,
    "param-count": cmd_param_count,
}


def main(argv: Optional[List[str]] = None) -> int:
    settings = get_settings()
    logging.basicConfig(
        level=settings.logging_level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    try:
        return COMMANDS[args.command](args)
    except DataNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA_MISSING
    except ParseError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PARSE
    except ValidationError as e:
        print(f"error: invalid configuration: {e}", file=sys.stderr)
        return EXIT_USAGE
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as e:
        # DimensionError, GroupError, LabelError, EmptyDatasetError
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except RotUnrollError as e:
        logger.error("%s failed: %s", args.command, e)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
