import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from config import settings
from core.certification import certify_dataset
from core.errors import PrototypeError
from core.evaluation import evaluate_model, prior_divergence, robustness_curve
from core.model import Model
from core.training import build_model, fit
from schemas.response import DivergenceReport
from utils.file_handlers import file_handler
from utils.idx import Dataset, load_idx

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _float_list(text: str) -> List[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'")
    if not values or any(v < 0 for v in values):
        raise argparse.ArgumentTypeError("expected nonnegative values")
    return values


def _class_pair(text: str) -> List[int]:
    try:
        a, b = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected two class indices 'A,B', got '{text}'")
    return [a, b]


def _int_at_least(minimum: int):
    def parse(text: str) -> int:
        try:
            value = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected an integer, got '{text}'")
        if value < minimum:
            raise argparse.ArgumentTypeError(f"expected an integer >= {minimum}, got {value}")
        return value
    return parse


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="prototype-cli", description="Train, evaluate and certify prototype-based classifiers")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def data_args(p, split=True):
        p.add_argument("--data-dir", type=Path, default=settings.data_dir)
        if split:
            p.add_argument("--split", choices=["train", "test"], default="test")

    def report_arg(p):
        p.add_argument("--report", type=Path, default=None, help="Write a JSON report")

    train = sub.add_parser("train", help="Train a model from a JSON config")
    train.add_argument("--config", type=Path, required=True)
    data_args(train, split=False)
    train.add_argument("--out", type=Path, required=True)
    train.add_argument("--seed", type=_int_at_least(0), default=None)
    report_arg(train)

    evaluate = sub.add_parser("eval", help="Clean accuracy")
    evaluate.add_argument("--model", type=Path, required=True)
    data_args(evaluate)
    report_arg(evaluate)

    certify = sub.add_parser("certify", help="Certified robust accuracy")
    certify.add_argument("--model", type=Path, required=True)
    data_args(certify)
    certify.add_argument("--epsilon", type=_float_list, required=True)
    report_arg(certify)

    attack = sub.add_parser("attack", help="Empirical robustness under an L2 PGD attack")
    attack.add_argument("--model", type=Path, required=True)
    data_args(attack)
    attack.add_argument("--epsilon", type=_float_list, required=True)
    attack.add_argument("--steps", type=_int_at_least(1), default=settings.attack_steps)
    attack.add_argument("--restarts", type=_int_at_least(1), default=settings.attack_restarts)
    attack.add_argument("--seed", type=_int_at_least(0), default=0)
    report_arg(attack)

    export = sub.add_parser("export-components", help="Write components as PGM images")
    export.add_argument("--model", type=Path, required=True)
    export.add_argument("--out-dir", type=Path, required=True)
    export.add_argument("--side", type=_int_at_least(1), default=settings.pgm_side)

    divergence = sub.add_parser("divergence", help="Jensen-Shannon divergence between class priors")
    divergence.add_argument("--model", type=Path, required=True)
    divergence.add_argument("--classes", type=_class_pair, required=True)
    report_arg(divergence)
    return parser


def load_split(data_dir: Path, split: str) -> Dataset:
    images, labels = (
        (settings.train_images, settings.train_labels) if split == "train"
        else (settings.test_images, settings.test_labels)
    )

    def locate(name: str) -> Path:
        for candidate in (data_dir / name, data_dir / f"{name}.gz"):
            if candidate.exists():
                return candidate
        raise FileNotFoundError(f"{name} not found in {data_dir}")

    return load_idx(locate(images), locate(labels))


def emit(key: str, value):
    print(f"{key}={value!r}" if isinstance(value, float) else f"{key}={value}")


def _save(report, args, model: Model, **params):
    """Write the report when --report was given, echoing the training config and the command parameters."""
    if args.report is None:
        return
    echo = {"command": args.command, "model": str(args.model), "training": model.metadata.get("config"), **params}
    file_handler.save_report(report.model_copy(update={"config": echo}), args.report.resolve())


def cmd_train(args) -> int:
    config = file_handler.load_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    data = load_split(args.data_dir, "train")
    model = build_model(config, data.n, data.C, data.points)
    model, history = fit(model, data.points, data.labels, config)
    file_handler.save_model(model, args.out.resolve())
    history_path = args.report or args.out.with_name(args.out.name + ".history.json")
    file_handler.save_report(history, history_path.resolve())
    emit("final_loss", history.epochs[-1].loss)
    emit("train_accuracy", history.epochs[-1].accuracy)
    emit("min_component_distance", history.min_component_distance)
    return EXIT_OK


def cmd_eval(args) -> int:
    model = file_handler.load_model(args.model)
    data = load_split(args.data_dir, args.split)
    report = evaluate_model(model, data.points, data.labels)
    emit("n_samples", report.n_samples)
    emit("accuracy", report.accuracy)
    _save(report, args, model, split=args.split, data_dir=str(args.data_dir))
    return EXIT_OK


def cmd_certify(args) -> int:
    model = file_handler.load_model(args.model)
    data = load_split(args.data_dir, args.split)
    report = certify_dataset(model, data.points, data.labels, args.epsilon)
    emit("clean_accuracy", report.clean_accuracy)
    for point in report.certified:
        emit(f"certified_accuracy@{point.epsilon!r}", point.accuracy)
    _save(report, args, model, split=args.split, data_dir=str(args.data_dir), epsilons=args.epsilon)
    return EXIT_OK


def cmd_attack(args) -> int:
    model = file_handler.load_model(args.model)
    data = load_split(args.data_dir, args.split)
    curve = robustness_curve(model, data.points, data.labels, sorted(args.epsilon),
                             steps=args.steps, restarts=args.restarts, seed=args.seed)
    for point in curve.points:
        emit(f"empirical_accuracy@{point.epsilon!r}", point.empirical)
        if point.certified is not None:
            emit(f"certified_accuracy@{point.epsilon!r}", point.certified)
            emit(f"violations@{point.epsilon!r}", point.violations)
    _save(curve, args, model, split=args.split, data_dir=str(args.data_dir), epsilons=sorted(args.epsilon),
          steps=args.steps, restarts=args.restarts, seed=args.seed)
    return EXIT_OK


def cmd_export(args) -> int:
    model = file_handler.load_model(args.model)
    written = file_handler.export_components(model, args.out_dir.resolve(), args.side)
    emit("images", len(written))
    return EXIT_OK


def cmd_divergence(args) -> int:
    model = file_handler.load_model(args.model)
    a, b = args.classes
    value = prior_divergence(model.head, a, b)
    emit("divergence", value)
    _save(DivergenceReport(class_a=a, class_b=b, divergence=value), args, model, classes=[a, b])
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "certify": cmd_certify,
    "attack": cmd_attack,
    "export-components": cmd_export,
    "divergence": cmd_divergence,
}


def run_cli(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=settings.log_level)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE

    logger.info(f"Running '{args.command}'")
    try:
        code = COMMANDS[args.command](args)
    except (PrototypeError, ValidationError, OSError) as e:
        logger.error(f"'{args.command}' failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    logger.info(f"'{args.command}' finished")
    return code


if __name__ == "__main__":
    sys.exit(run_cli())
