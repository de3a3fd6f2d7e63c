"""
caila.__main__
~~~~~~~~~~~~~~

Command line interface for the caila package.
"""

import argparse
import logging
from pathlib import Path
import sys
from typing import List, Optional, Tuple

from caila import __version__
from caila.api import ablate, evaluate_checkpoint, generate, train_model
from caila.config import CFG_FILE_PATH, CFG_ENV_VAR, CURRENT_CONFIG, Configuration
from caila.exceptions import CailaError, ConfigError

log = logging.getLogger("caila")

version_str = f"CAILA-Desk {__version__}"

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class UsageError(Exception):
    """Bad flag value detected after argument parsing"""


def _require_dir(path: str) -> Path:
    data = Path(path)
    if not data.is_dir():
        raise UsageError(f"data directory '{data}' does not exist")
    return data


def _configuration(config_path: Optional[str]) -> Configuration:
    if config_path is None:
        return CURRENT_CONFIG.copy()
    return Configuration.load_from_file(config_path)


def cmdln_gen_data(args: argparse.Namespace) -> None:
    summary = generate(
        args.out,
        attributes=args.attrs,
        objects=args.objs,
        seen_fraction=args.seen_frac,
        per_pair=args.per_pair,
        seed=args.seed,
        eval_per_pair=args.eval_per_pair,
        noise=args.noise,
        image_size=args.image_size,
    )
    print(f"seen pairs : {summary.seen_pairs}")
    print(f"unseen pairs : {summary.unseen_pairs}")
    for split, count in summary.counts.items():
        print(f"{split.value} images : {count}")


def _data_dir(args: argparse.Namespace, configuration: Configuration) -> Path:
    if args.data is not None:
        return _require_dir(args.data)
    return _require_dir(str(configuration.run_config(require_data=True).data))


def cmdln_train(args: argparse.Namespace) -> None:
    configuration = _configuration(args.config)
    data = _data_dir(args, configuration)
    result = train_model(data, args.out, configuration, seed=args.seed, metrics_path=args.metrics)
    print(f"checkpoint : {args.out}")
    print(f"best epoch : {result.best_epoch}")
    print(f"best val auc : {result.best_auc!r}")
    print(f"baseline val auc : {result.baseline_auc!r}")


def cmdln_eval(args: argparse.Namespace) -> None:
    configuration = _configuration(args.config)
    world = args.world or configuration.run_config().world
    report = evaluate_checkpoint(args.ckpt, _data_dir(args, configuration), world, args.report, args.split)
    print(report.summary())


def cmdln_ablate(args: argparse.Namespace) -> None:
    configuration = _configuration(args.config)
    report = ablate(_data_dir(args, configuration), args.seeds, configuration, args.report)
    print(report.to_text(), end="")


def print_caila_info() -> None:
    print(version_str)
    print()
    print(f"version : {__version__}")
    print(f"user config file : {CFG_FILE_PATH}")
    print(f"active config file : {CURRENT_CONFIG.path} (override with ${CFG_ENV_VAR})")


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def parse_arguments(
    argv: Optional[List[str]] = None,
) -> Tuple[argparse.Namespace, argparse.ArgumentParser]:
    """Parses

    Args:
        argv (Optional[List[str]], optional): specific arguments to parse. Defaults to None.

    Returns:
        Tuple[argparse.Namespace, argparse.ArgumentParser]: the argparse namespace and parser
    """

    parser = argparse.ArgumentParser(
        prog="caila", description="Train and evaluate concept-aware adapters on synthetic compositions"
    )
    parser.add_argument(
        "-V",
        "--version",
        action="store_true",
        help="print the version of the caila package",
    )
    parser.add_argument(
        "-v", "--verbose", default=0, action="count", help="specify verbosity of script"
    )

    subparsers = parser.add_subparsers(dest="command")
    gen_parser = subparsers.add_parser(
        "gen-data",
        description="Render a synthetic attribute/object benchmark",
        help="Generate a synthetic dataset",
    )
    gen_parser.add_argument("--out", required=True, help="directory to write the dataset to.")
    gen_parser.add_argument("--attrs", type=_positive_int, required=True, help="number of attributes.")
    gen_parser.add_argument("--objs", type=_positive_int, required=True, help="number of objects.")
    gen_parser.add_argument(
        "--seen-frac", type=float, required=True, help="fraction of all pairs used for training."
    )
    gen_parser.add_argument("--per-pair", type=_positive_int, required=True, help="training images per seen pair.")
    gen_parser.add_argument("--seed", type=int, default=0, help="random seed, default is %(default)s.")
    gen_parser.add_argument(
        "--eval-per-pair",
        type=_positive_int,
        default=None,
        help="validation and test images per pair, default is a quarter of --per-pair.",
    )
    gen_parser.add_argument("--noise", type=float, default=0.0, help="pixel noise level, default is %(default)s.")
    gen_parser.add_argument(
        "--image-size", type=_positive_int, default=64, help="image height and width, default is %(default)s."
    )

    train_parser = subparsers.add_parser(
        "train",
        description="Run backbone pretraining and adapter training, keeping the best validation epoch",
        help="Train a model",
    )
    train_parser.add_argument("--data", default=None, help="dataset directory, default is the configured 'data'.")
    train_parser.add_argument("--config", default=None, help="config file, default is the user config.")
    train_parser.add_argument("--out", required=True, help="checkpoint file to write.")
    train_parser.add_argument("--seed", type=int, default=None, help="override the configured seed.")
    train_parser.add_argument("--metrics", default=None, help="metrics log, default is <out>.metrics.csv.")

    eval_parser = subparsers.add_parser(
        "eval",
        description="Evaluate a checkpoint with the seen/unseen bias sweep",
        help="Evaluate a checkpoint",
    )
    eval_parser.add_argument("--ckpt", required=True, help="checkpoint file.")
    eval_parser.add_argument("--data", default=None, help="dataset directory, default is the configured 'data'.")
    eval_parser.add_argument("--config", default=None, help="config file, default is the user config.")
    eval_parser.add_argument(
        "--world", choices=["closed", "open"], default=None, help="candidate set, default is the configured 'world'."
    )
    eval_parser.add_argument("--report", default=None, help="report file; the curve goes to <report stem>.curve.csv.")
    eval_parser.add_argument(
        "--split", choices=["val", "test"], default="val", help="evaluation split, default is '%(default)s'."
    )

    ablate_parser = subparsers.add_parser(
        "ablate",
        description="Compare adapter and mixture-of-adapters placements",
        help="Run the adapter ablation",
    )
    ablate_parser.add_argument("--data", default=None, help="dataset directory, default is the configured 'data'.")
    ablate_parser.add_argument("--seeds", type=_positive_int, default=3, help="seeds per variant, default is %(default)s.")
    ablate_parser.add_argument("--config", default=None, help="config file, default is the user config.")
    ablate_parser.add_argument("--report", default=None, help="ablation report file.")

    subparsers.add_parser(
        "info",
        description="Show more information about caila",
        help="Show caila information",
    )

    return parser.parse_args(argv), parser


def main(argv: Optional[List[str]] = None) -> int:
    args, parser = parse_arguments(argv)

    levels = [
        logging.ERROR,
        logging.CRITICAL,
        logging.WARNING,
        logging.INFO,
        logging.DEBUG,
    ]
    ch = logging.StreamHandler()
    ch.setFormatter(logging.Formatter("[%(levelname)s] - %(message)s"))
    log.addHandler(ch)
    log.setLevel(levels[min(4, args.verbose)])

    commands = {
        "gen-data": cmdln_gen_data,
        "train": cmdln_train,
        "eval": cmdln_eval,
        "ablate": cmdln_ablate,
    }
    sub_command = getattr(args, "command")
    try:
        if sub_command in commands:
            commands[sub_command](args)
        elif sub_command == "info":
            print_caila_info()
        else:
            if getattr(args, "version"):
                print(version_str)
            else:
                parser.print_usage()
    except (UsageError, ConfigError) as e:
        print(f"caila: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (CailaError, OSError) as e:
        print(f"caila: error: {e}", file=sys.stderr)
        return EXIT_FAILURE
    finally:
        log.removeHandler(ch)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
